"""Grid geometry and dense field helpers.

Volumes are float64 arrays indexed ``[x, y, z]`` with shape ``(nx, ny, nz)``;
vector fields (velocities, displacements) are ``(3, nx, ny, nz)`` in voxel
units. On disk the linear index is ``x + nx*(y + ny*z)`` (Fortran order of
the in-memory array).
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

MIN_DIM = 4


@dataclass(frozen=True)
class Grid:
    """Regular voxel grid. ``spacing`` (mm/voxel) is metadata only."""

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or any(d < MIN_DIM for d in dims):
            raise ValueError(f"grid dims must be 3 integers >= {MIN_DIM}, got {self.dims}")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or any(not np.isfinite(s) or s <= 0 for s in spacing):
            raise ValueError(f"grid spacing must be 3 positive reals, got {self.spacing}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)

    @property
    def size(self) -> int:
        return self.dims[0] * self.dims[1] * self.dims[2]

    @classmethod
    def of(cls, array: np.ndarray) -> "Grid":
        """Grid of a scalar ``(nx,ny,nz)`` or vector ``(3,nx,ny,nz)`` array."""
        shape = array.shape[-3:]
        return cls(shape)


def check_scalar(V, name="volume"):
    V = np.asarray(V, dtype=np.float64)
    if V.ndim != 3:
        raise ValueError(f"{name} must be a 3D array, got shape {V.shape}")
    Grid.of(V)
    if not np.all(np.isfinite(V)):
        raise ValueError(f"{name} contains non-finite values")
    return V


def check_vector(F, name="field"):
    F = np.asarray(F, dtype=np.float64)
    if F.ndim != 4 or F.shape[0] != 3:
        raise ValueError(f"{name} must have shape (3, nx, ny, nz), got {F.shape}")
    Grid.of(F)
    if not np.all(np.isfinite(F)):
        raise ValueError(f"{name} contains non-finite values")
    return F


def check_labels(L, name="labels"):
    L = np.asarray(L)
    if L.ndim != 3 or not np.issubdtype(L.dtype, np.integer):
        raise ValueError(f"{name} must be a 3D integer array")
    if L.size and L.min() < 0:
        raise ValueError(f"{name} must be non-negative")
    Grid.of(L)
    return L


def same_grid(*arrays):
    shapes = {a.shape[-3:] for a in arrays}
    if len(shapes) != 1:
        raise ValueError(f"grid mismatch: {sorted(shapes)}")


def zeros_vector(dims) -> np.ndarray:
    return np.zeros((3,) + tuple(dims))


def field_lincomb(a: float, F: np.ndarray, b: float, G: np.ndarray) -> np.ndarray:
    """Componentwise ``a*F + b*G``."""
    if F.shape != G.shape:
        raise ValueError(f"grid mismatch: {F.shape} vs {G.shape}")
    return a * F + b * G


def spatial_gradient(V: np.ndarray) -> np.ndarray:
    """Finite-difference gradient of a scalar volume, shape ``(3, nx, ny, nz)``.

    Central differences inside, one-sided differences on the boundary faces.
    """
    if V.ndim != 3 or min(V.shape) < 2:
        raise ValueError("spatial_gradient needs a 3D volume with every dim >= 2")
    return np.stack(np.gradient(V, edge_order=1))


def gradient_adjoint(G: np.ndarray, axis: int) -> np.ndarray:
    """Transpose of the finite-difference operator of :func:`spatial_gradient` along ``axis``."""
    G = np.moveaxis(G, axis, 0)
    out = np.zeros_like(G)
    # boundary rows: D[0] = x1 - x0, D[n-1] = x[n-1] - x[n-2]
    out[0] -= G[0]
    out[1] += G[0]
    out[-1] += G[-1]
    out[-2] -= G[-1]
    # interior rows: D[i] = (x[i+1] - x[i-1]) / 2
    half = 0.5 * G[1:-1]
    out[2:] += half
    out[:-2] -= half
    return np.moveaxis(out, 0, axis)


def pairwise_sum(x: np.ndarray) -> float:
    """Sum a flat array by recursive halving (bounded rounding growth)."""
    x = np.asarray(x, dtype=np.float64).ravel()
    while x.size > 1:
        if x.size % 2:
            x = np.append(x, 0.0)
        x = x[0::2] + x[1::2]
    return float(x[0]) if x.size else 0.0


def reduce_mean_vector(F: np.ndarray) -> tuple[float, float, float]:
    """Per-channel mean over all voxels of a vector field."""
    F = np.asarray(F, dtype=np.float64)
    n = F[0].size
    return tuple(pairwise_sum(F[c]) / n for c in range(3))


@lru_cache(maxsize=16)
def _identity(dims):
    grid = np.stack(np.meshgrid(*(np.arange(d, dtype=np.float64) for d in dims), indexing="ij"))
    grid.setflags(write=False)
    return grid


def identity_grid(dims) -> np.ndarray:
    """Voxel-center coordinates, ``(3, nx, ny, nz)``; read-only and cached."""
    return _identity(tuple(int(d) for d in dims))
