"""Pure-numpy trilinear gather/scatter kernels.

Reference implementation; the numba kernels in ``_numba`` must agree with
these to rounding.
"""

import numpy as np


def _axis_weights(p, n):
    """Clamp coordinates to [0, n-1]; return left index, fraction, in-range mask."""
    inside = (p >= 0.0) & (p <= n - 1)
    pc = np.clip(p, 0.0, n - 1)
    i0 = np.minimum(np.floor(pc).astype(np.intp), n - 2)
    t = pc - i0
    return i0, t, inside


def trilinear(field, coords):
    """Sample a ``(C, nx, ny, nz)`` field at ``(3, M)`` points; returns ``(C, M)``."""
    C, nx, ny, nz = field.shape
    i0, tx, _ = _axis_weights(coords[0], nx)
    j0, ty, _ = _axis_weights(coords[1], ny)
    k0, tz, _ = _axis_weights(coords[2], nz)
    flat = field.reshape(C, -1)
    base = (i0 * ny + j0) * nz + k0
    sx, sy = ny * nz, nz
    ux, uy, uz = 1.0 - tx, 1.0 - ty, 1.0 - tz
    out = (
        flat[:, base] * (ux * uy * uz)
        + flat[:, base + sx] * (tx * uy * uz)
        + flat[:, base + sy] * (ux * ty * uz)
        + flat[:, base + sx + sy] * (tx * ty * uz)
        + flat[:, base + 1] * (ux * uy * tz)
        + flat[:, base + sx + 1] * (tx * uy * tz)
        + flat[:, base + sy + 1] * (ux * ty * tz)
        + flat[:, base + sx + sy + 1] * (tx * ty * tz)
    )
    return out


def trilinear_adjoint(field, coords, upstream, need_field_grad=True):
    """Reverse-mode of :func:`trilinear`.

    Returns ``(d_field, d_coords)`` where ``d_field`` has the field's shape
    (or is None) and ``d_coords`` is ``(3, M)``. Coordinates that were clamped
    on an axis get zero derivative along it.
    """
    C, nx, ny, nz = field.shape
    i0, tx, inx = _axis_weights(coords[0], nx)
    j0, ty, iny = _axis_weights(coords[1], ny)
    k0, tz, inz = _axis_weights(coords[2], nz)
    flat = field.reshape(C, -1)
    base = (i0 * ny + j0) * nz + k0
    sx, sy = ny * nz, nz
    ux, uy, uz = 1.0 - tx, 1.0 - ty, 1.0 - tz

    offsets = (0, sx, sy, sx + sy, 1, sx + 1, sy + 1, sx + sy + 1)
    # corner weights and their partials, corner order matches offsets
    wx = (ux, tx, ux, tx, ux, tx, ux, tx)
    wy = (uy, uy, ty, ty, uy, uy, ty, ty)
    wz = (uz, uz, uz, uz, tz, tz, tz, tz)
    dx = (-1.0, 1.0, -1.0, 1.0, -1.0, 1.0, -1.0, 1.0)
    dy = (-1.0, -1.0, 1.0, 1.0, -1.0, -1.0, 1.0, 1.0)
    dz = (-1.0, -1.0, -1.0, -1.0, 1.0, 1.0, 1.0, 1.0)

    d_coords = np.zeros((3,) + coords.shape[1:])
    d_field = np.zeros_like(flat) if need_field_grad else None
    nvox = nx * ny * nz
    for corner, off in enumerate(offsets):
        vals = flat[:, base + off]
        # sum_c upstream_c * value_c at this corner
        gv = np.einsum("cm,cm->m", upstream, vals)
        d_coords[0] += gv * (dx[corner] * wy[corner] * wz[corner])
        d_coords[1] += gv * (wx[corner] * dy[corner] * wz[corner])
        d_coords[2] += gv * (wx[corner] * wy[corner] * dz[corner])
        if need_field_grad:
            w = wx[corner] * wy[corner] * wz[corner]
            idx = base + off
            for c in range(C):
                d_field[c] += np.bincount(idx, weights=upstream[c] * w, minlength=nvox)
    d_coords[0] *= inx
    d_coords[1] *= iny
    d_coords[2] *= inz
    if need_field_grad:
        d_field = d_field.reshape(field.shape)
    return d_field, d_coords
