"""numba-compiled trilinear gather/scatter kernels.

Same contract as ``_numpy``. Kernels are ``nogil`` so per-subject work can
run on a thread pool.
"""

import math

import numpy as np
from numba import njit


@njit(cache=True, nogil=True)
def _axis(p, n):
    if p < 0.0:
        return 0, 0.0, 0.0
    if p > n - 1:
        return n - 2, 1.0, 0.0
    i = int(math.floor(p))
    if i > n - 2:
        i = n - 2
    return i, p - i, 1.0


@njit(cache=True, nogil=True)
def _trilinear(field, coords, out):
    C, nx, ny, nz = field.shape
    M = coords.shape[1]
    for m in range(M):
        i, tx, _ = _axis(coords[0, m], nx)
        j, ty, _ = _axis(coords[1, m], ny)
        k, tz, _ = _axis(coords[2, m], nz)
        ux = 1.0 - tx
        uy = 1.0 - ty
        uz = 1.0 - tz
        for c in range(C):
            out[c, m] = (
                field[c, i, j, k] * (ux * uy * uz)
                + field[c, i + 1, j, k] * (tx * uy * uz)
                + field[c, i, j + 1, k] * (ux * ty * uz)
                + field[c, i + 1, j + 1, k] * (tx * ty * uz)
                + field[c, i, j, k + 1] * (ux * uy * tz)
                + field[c, i + 1, j, k + 1] * (tx * uy * tz)
                + field[c, i, j + 1, k + 1] * (ux * ty * tz)
                + field[c, i + 1, j + 1, k + 1] * (tx * ty * tz)
            )


@njit(cache=True, nogil=True)
def _trilinear_adjoint(field, coords, upstream, d_field, d_coords, need_field_grad):
    C, nx, ny, nz = field.shape
    M = coords.shape[1]
    for m in range(M):
        i, tx, inx = _axis(coords[0, m], nx)
        j, ty, iny = _axis(coords[1, m], ny)
        k, tz, inz = _axis(coords[2, m], nz)
        ux = 1.0 - tx
        uy = 1.0 - ty
        uz = 1.0 - tz
        gx = 0.0
        gy = 0.0
        gz = 0.0
        for c in range(C):
            g = upstream[c, m]
            f000 = field[c, i, j, k]
            f100 = field[c, i + 1, j, k]
            f010 = field[c, i, j + 1, k]
            f110 = field[c, i + 1, j + 1, k]
            f001 = field[c, i, j, k + 1]
            f101 = field[c, i + 1, j, k + 1]
            f011 = field[c, i, j + 1, k + 1]
            f111 = field[c, i + 1, j + 1, k + 1]
            gx += g * (
                (f100 - f000) * uy * uz
                + (f110 - f010) * ty * uz
                + (f101 - f001) * uy * tz
                + (f111 - f011) * ty * tz
            )
            gy += g * (
                (f010 - f000) * ux * uz
                + (f110 - f100) * tx * uz
                + (f011 - f001) * ux * tz
                + (f111 - f101) * tx * tz
            )
            gz += g * (
                (f001 - f000) * ux * uy
                + (f101 - f100) * tx * uy
                + (f011 - f010) * ux * ty
                + (f111 - f110) * tx * ty
            )
            if need_field_grad:
                d_field[c, i, j, k] += g * (ux * uy * uz)
                d_field[c, i + 1, j, k] += g * (tx * uy * uz)
                d_field[c, i, j + 1, k] += g * (ux * ty * uz)
                d_field[c, i + 1, j + 1, k] += g * (tx * ty * uz)
                d_field[c, i, j, k + 1] += g * (ux * uy * tz)
                d_field[c, i + 1, j, k + 1] += g * (tx * uy * tz)
                d_field[c, i, j + 1, k + 1] += g * (ux * ty * tz)
                d_field[c, i + 1, j + 1, k + 1] += g * (tx * ty * tz)
        d_coords[0, m] = gx * inx
        d_coords[1, m] = gy * iny
        d_coords[2, m] = gz * inz


def trilinear(field, coords):
    out = np.empty((field.shape[0], coords.shape[1]))
    _trilinear(field, coords, out)
    return out


def trilinear_adjoint(field, coords, upstream, need_field_grad=True):
    d_field = np.zeros(field.shape) if need_field_grad else np.zeros((1, 1, 1, 1))
    d_coords = np.empty(coords.shape)
    _trilinear_adjoint(field, coords, upstream, d_field, d_coords, need_field_grad)
    return (d_field if need_field_grad else None), d_coords
