"""One-shot segmentation through inverse deformations, and Dice overlap."""

from __future__ import annotations

import numpy as np

from .fields import check_labels, check_vector, same_grid
from .transform import DEFAULT_EXP_STEPS, exp_velocity, warp_labels_nn


def propagate_labels(atlas_labels, v, steps=DEFAULT_EXP_STEPS):
    """Carry the atlas annotation into a subject: ``labels o Exp(-v)``."""
    atlas_labels = check_labels(atlas_labels, "atlas labels")
    v = check_vector(v, "velocity")
    same_grid(atlas_labels, v)
    return warp_labels_nn(atlas_labels, exp_velocity(-v, steps))


def dice(a, b, label_set):
    """Per-label Dice and their mean.

    Labels absent from both volumes are left out of the mean (their entry is
    NaN); a label present in only one volume scores 0.
    """
    label_set = list(label_set)
    if not label_set:
        raise ValueError("label_set must not be empty")
    a = check_labels(a, "a")
    b = check_labels(b, "b")
    same_grid(a, b)
    per = {}
    for lab in label_set:
        ma, mb = a == lab, b == lab
        denom = int(ma.sum()) + int(mb.sum())
        per[lab] = float("nan") if denom == 0 else 2.0 * np.count_nonzero(ma & mb) / denom
    scored = [d for d in per.values() if not np.isnan(d)]
    mean = float(np.mean(scored)) if scored else float("nan")
    return per, mean
