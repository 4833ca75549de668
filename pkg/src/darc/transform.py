"""Warping, composition, velocity exponentiation and Jacobians.

Deformations are stored as displacements ``u`` with ``phi(x) = x + u(x)`` and
applied by backward warping, ``(V o phi)(x) = V(x + u(x))``. Sampling is
trilinear with clamp-to-edge on every axis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .fields import (
    check_labels,
    check_scalar,
    check_vector,
    identity_grid,
    same_grid,
    spatial_gradient,
)

DEFAULT_EXP_STEPS = 7


@dataclass
class TriMesh:
    """Triangle mesh in voxel coordinates; faces are counter-clockwise seen from outside."""

    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.faces.size:
            if self.faces.min() < 0 or self.faces.max() >= len(self.vertices):
                raise ValueError("face index out of range")
            f = self.faces
            if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
                raise ValueError("degenerate face")

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)


def _sample_points(F4, coords):
    return kernels.trilinear(F4, np.ascontiguousarray(coords, dtype=np.float64))


def sample_trilinear(V: np.ndarray, p) -> float:
    """Trilinear value of scalar volume ``V`` at point ``p`` (border-clamped)."""
    p = np.asarray(p, dtype=np.float64).reshape(3)
    if not np.all(np.isfinite(p)):
        raise ValueError(f"non-finite sample point {p}")
    V = np.ascontiguousarray(V, dtype=np.float64)
    return float(_sample_points(V[None], p.reshape(3, 1))[0, 0])


def sample_field(F: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Sample a ``(C, nx, ny, nz)`` field at ``(N, 3)`` points; returns ``(N, C)``."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    F = np.ascontiguousarray(F, dtype=np.float64)
    return _sample_points(F, points.T).T


def _warp_coords(u):
    return (identity_grid(u.shape[1:]) + u).reshape(3, -1)


def warp_volume(V: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Backward-warp a scalar volume: ``out(x) = V(x + u(x))``."""
    V = check_scalar(V)
    u = check_vector(u, "displacement")
    same_grid(V, u)
    out = _sample_points(np.ascontiguousarray(V[None]), _warp_coords(u))
    return out.reshape(V.shape)


def warp_labels_nn(L: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Nearest-neighbour backward warp of a label volume (label ids preserved)."""
    L = check_labels(L)
    u = check_vector(u, "displacement")
    same_grid(L, u)
    p = identity_grid(L.shape) + u
    # round half up, then clamp
    idx = [np.clip(np.floor(p[a] + 0.5).astype(np.intp), 0, L.shape[a] - 1) for a in range(3)]
    return L[idx[0], idx[1], idx[2]]


def compose(u_a: np.ndarray, u_b: np.ndarray) -> np.ndarray:
    """Displacement of ``phi_a o phi_b``: ``u_a(x + u_b(x)) + u_b(x)``."""
    if u_a.shape != u_b.shape:
        raise ValueError(f"grid mismatch: {u_a.shape} vs {u_b.shape}")
    u_a = np.ascontiguousarray(u_a, dtype=np.float64)
    sampled = _sample_points(u_a, _warp_coords(u_b)).reshape(u_a.shape)
    return sampled + u_b


def exp_velocity_path(v: np.ndarray, steps: int = DEFAULT_EXP_STEPS) -> list[np.ndarray]:
    """Scaling and squaring, keeping every intermediate displacement.

    Returns ``[u_0, ..., u_steps]`` with ``u_0 = v / 2**steps`` and
    ``u_{k+1} = compose(u_k, u_k)``.
    """
    if steps < 0:
        raise ValueError(f"steps must be >= 0, got {steps}")
    u = np.asarray(v, dtype=np.float64) / (2.0**steps)
    path = [u]
    for _ in range(steps):
        u = compose(u, u)
        path.append(u)
    return path


def exp_velocity(v: np.ndarray, steps: int = DEFAULT_EXP_STEPS) -> np.ndarray:
    """Displacement of ``Exp(v)`` by scaling and squaring."""
    return exp_velocity_path(v, steps)[-1]


def exp_velocity_adjoint(path: list[np.ndarray], grad_u: np.ndarray) -> np.ndarray:
    """Pull ``dL/du_steps`` back to ``dL/dv`` through the squaring recursion in ``path``."""
    steps = len(path) - 1
    g = np.asarray(grad_u, dtype=np.float64)
    for k in range(steps - 1, -1, -1):
        u = np.ascontiguousarray(path[k])
        upstream = g.reshape(3, -1)
        # u_{k+1}(x) = u_k(p) + u_k(x), p = x + u_k(x)
        d_field, d_coords = kernels.trilinear_adjoint(u, _warp_coords(u), upstream)
        g = d_field + g + d_coords.reshape(u.shape)
    return g / (2.0**steps)


def warp_volume_adjoint(V: np.ndarray, u: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """``dL/du`` for ``W = warp_volume(V, u)`` given ``dL/dW``."""
    V4 = np.ascontiguousarray(V, dtype=np.float64)[None]
    _, d_coords = kernels.trilinear_adjoint(
        V4, _warp_coords(u), np.ascontiguousarray(grad_out, dtype=np.float64).reshape(1, -1),
        need_field_grad=False,
    )
    return d_coords.reshape(u.shape)


def jacobian_matrix(u: np.ndarray) -> np.ndarray:
    """``I + grad u`` per voxel, shape ``(3, 3, nx, ny, nz)``; entry ``[c, a]`` is d phi_c / d x_a."""
    u = check_vector(u, "displacement")
    J = np.stack([spatial_gradient(u[c]) for c in range(3)])
    for c in range(3):
        J[c, c] += 1.0
    return J


def jacobian_determinant(u: np.ndarray) -> np.ndarray:
    """Per-voxel ``det(I + grad u)``."""
    J = jacobian_matrix(u)
    return (
        J[0, 0] * (J[1, 1] * J[2, 2] - J[1, 2] * J[2, 1])
        - J[0, 1] * (J[1, 0] * J[2, 2] - J[1, 2] * J[2, 0])
        + J[0, 2] * (J[1, 0] * J[2, 1] - J[1, 1] * J[2, 0])
    )


def folding_fraction(u: np.ndarray) -> float:
    """Percentage of voxels whose Jacobian determinant is <= 0."""
    det = jacobian_determinant(u)
    return 100.0 * np.count_nonzero(det <= 0) / det.size


def warp_mesh(mesh: TriMesh, u: np.ndarray) -> TriMesh:
    """Move each vertex ``p`` to ``p + u(p)``; faces are shared with the input."""
    u = check_vector(u, "displacement")
    if mesh.n_vertices == 0:
        return TriMesh(mesh.vertices.copy(), mesh.faces.copy())
    disp = sample_field(u, mesh.vertices)
    return TriMesh(mesh.vertices + disp, mesh.faces.copy())
