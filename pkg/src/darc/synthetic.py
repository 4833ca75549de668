"""Synthetic ellipsoid phantom population with known deformations."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .fields import Grid
from .transform import DEFAULT_EXP_STEPS, exp_velocity, warp_labels_nn, warp_volume

# radii of the nested structures, as fractions of each axis length
_OUTER_RADII = (0.36, 0.31, 0.27)
_NEST_SCALES = (1.0, 0.68, 0.38)
# intensity midpoints between the structure levels 0, 1/3, 2/3, 1
LABEL_THRESHOLDS = (1.0 / 6.0, 0.5, 5.0 / 6.0)


@dataclass
class Population:
    images: list
    labels: list
    velocities: list
    displacements: list


def ellipsoid_phantom(dims, edge_width=1.0):
    """Three nested ellipsoids with soft edges.

    Returns ``(intensity, labels)``; intensity steps by 1/3 per structure and
    the label counts how many ellipsoids contain the voxel (0 = background).
    """
    dims = Grid(dims).dims
    centre = [(d - 1) / 2.0 for d in dims]
    coords = np.meshgrid(*(np.arange(d, dtype=np.float64) for d in dims), indexing="ij")
    intensity = np.zeros(dims)
    labels = np.zeros(dims, dtype=np.uint16)
    for scale in _NEST_SCALES:
        radii = [f * d * scale for f, d in zip(_OUTER_RADII, dims)]
        r = np.sqrt(sum(((c - m) / R) ** 2 for c, m, R in zip(coords, centre, radii)))
        # signed distance along the normalised radius, in voxels
        sd = (1.0 - r) * np.mean(radii)
        intensity += 1.0 / (1.0 + np.exp(-sd / edge_width)) / len(_NEST_SCALES)
        labels += (r < 1.0).astype(np.uint16)
    return intensity, labels


def random_velocity(rng, dims, sigma, amp):
    """Gaussian-smoothed white noise rescaled to max vector norm ``amp``."""
    v = rng.standard_normal((3,) + tuple(dims))
    v = np.stack([gaussian_filter(v[c], sigma, mode="wrap") for c in range(3)])
    peak = np.sqrt((v * v).sum(axis=0)).max()
    return v * (amp / peak) if peak > 0 else v * 0.0


def gen_synthetic_population(seed, n, dims=(32, 32, 32), deform_sigma=4.0, deform_amp=3.0, steps=DEFAULT_EXP_STEPS):
    """Deform the phantom ``n`` times; ground-truth fields are returned for checks."""
    if n < 2:
        raise ValueError(f"need n >= 2 subjects, got {n}")
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or min(dims) < 16:
        raise ValueError(f"dims must be three integers >= 16, got {dims}")
    if deform_amp < 0 or deform_sigma <= 0:
        raise ValueError("deform_amp must be >= 0 and deform_sigma > 0")
    rng = np.random.default_rng(seed)
    base, base_labels = ellipsoid_phantom(dims)
    pop = Population([], [], [], [])
    for _ in range(n):
        v = random_velocity(rng, dims, deform_sigma, deform_amp)
        u = exp_velocity(v, steps)
        pop.images.append(warp_volume(base, u))
        pop.labels.append(warp_labels_nn(base_labels, u))
        pop.velocities.append(v)
        pop.displacements.append(u)
    return pop


def annotate_by_thresholds(V, thresholds=LABEL_THRESHOLDS):
    """Label a volume by counting how many ascending thresholds each voxel exceeds."""
    return np.searchsorted(np.asarray(thresholds), V, side="right").astype(np.uint16)
