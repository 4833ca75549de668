"""Groupwise atlas construction by coordinate descent.

Each outer iteration registers every subject to the current atlas
(independently, so in parallel), removes the mean displacement from the
resulting deformations, and then updates the atlas with the deformations
held fixed: closed form for MSE (mean) and L1 (median), mini-batch Adam for
NCC and SSIM.
"""

from __future__ import annotations

import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .fields import check_scalar, pairwise_sum, same_grid
from .loss import LossConfig, NumericalError, dissimilarity, regularizer, subject_loss_and_grad
from .transform import DEFAULT_EXP_STEPS, exp_velocity, folding_fraction, warp_volume

log = logging.getLogger(__name__)

LOG_FIELDS = (
    "iteration",
    "registration_loss",
    "data_before_update",
    "data_after_update",
    "regularization",
    "objective",
    "centrality_before",
    "centrality_after",
    "folding_pct_mean",
    "folding_pct_max",
)


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` and ``subject`` say where."""

    def __init__(self, stage, message, subject=None):
        self.stage = stage
        self.subject = subject
        where = stage if subject is None else f"{stage} (subject {subject})"
        super().__init__(f"[{where}] {message}")


@dataclass(frozen=True)
class OptimConfig:
    outer_iters: int = 10
    inner_iters: int = 300
    atlas_epochs: int = 20
    learn_rate: float = 1e-2
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 4
    exp_steps: int = DEFAULT_EXP_STEPS
    seed: int = 0
    warm_start: bool = False
    n_jobs: int | None = None

    def __post_init__(self):
        for name in ("outer_iters", "inner_iters", "atlas_epochs", "batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not self.learn_rate > 0:
            raise ValueError(f"learn_rate must be > 0, got {self.learn_rate}")
        if self.exp_steps < 0:
            raise ValueError(f"exp_steps must be >= 0, got {self.exp_steps}")

    def to_dict(self):
        d = asdict(self)
        d.pop("n_jobs")  # does not affect results
        return d


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def like(cls, x):
        return cls(np.zeros_like(x, dtype=np.float64), np.zeros_like(x, dtype=np.float64))


def adam_step(var, grad, state: AdamState, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update; returns the new variable (state is updated in place)."""
    if var.shape != grad.shape or state.m.shape != var.shape:
        raise ValueError(f"shape mismatch: var {var.shape}, grad {grad.shape}, state {state.m.shape}")
    state.t += 1
    state.m = beta1 * state.m + (1.0 - beta1) * grad
    state.v = beta2 * state.v + (1.0 - beta2) * grad * grad
    m_hat = state.m / (1.0 - beta1**state.t)
    v_hat = state.v / (1.0 - beta2**state.t)
    return var - lr * m_hat / (np.sqrt(v_hat) + eps)


def register_pairwise(I, A, cfg: LossConfig, opt: OptimConfig, v0=None):
    """Fit a stationary velocity so that ``I o Exp(v)`` matches ``A``.

    Returns ``(v, losses)`` where ``losses[k]`` is the objective before the
    k-th Adam step.
    """
    same_grid(I, A)
    v = np.zeros((3,) + I.shape) if v0 is None else np.array(v0, dtype=np.float64)
    state = AdamState.like(v)
    losses = []
    for k in range(opt.inner_iters):
        try:
            loss, g = subject_loss_and_grad(I, A, v, cfg, opt.exp_steps)
        except NumericalError as exc:
            raise NumericalError(f"iteration {k}: {exc}") from exc
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"iteration {k}: non-finite gradient")
        losses.append(loss)
        v = adam_step(v, g, state, opt.learn_rate, opt.adam_beta1, opt.adam_beta2, opt.adam_eps)
    return v, losses


def centrality_activation(fields):
    """Subtract the voxelwise mean displacement from every field."""
    fields = list(fields)
    if not fields:
        raise ValueError("centrality_activation needs at least one field")
    same_grid(*fields)
    mean = np.mean(np.stack(fields), axis=0)
    return [f - mean for f in fields]


def centrality(fields) -> float:
    """Largest per-channel voxel mean of the summed displacement ``sum_i u_i``."""
    total = np.sum(np.stack(fields), axis=0)
    return max(abs(pairwise_sum(total[c]) / total[c].size) for c in range(3))


def update_atlas_closed_form(warped, metric):
    """Voxelwise mean (MSE) or lower median (L1) of the warped images."""
    warped = list(warped)
    if not warped:
        raise ValueError("need at least one warped image")
    same_grid(*warped)
    stack = np.stack(warped)
    metric = metric.lower()
    if metric == "mse":
        return stack.mean(axis=0)
    if metric == "l1":
        # lower median keeps the result inside the input value set
        k = (len(warped) - 1) // 2
        return np.partition(stack, k, axis=0)[k]
    raise ValueError(f"closed-form update exists only for mse/l1, not {metric!r}")


def update_atlas_sgd(images, deformations, A, cfg: LossConfig, opt: OptimConfig, rng=None, warp=warp_volume):
    """Mini-batch Adam on the atlas with deformations fixed.

    Only one batch of warped images is alive at a time.
    """
    images = list(images)
    deformations = list(deformations)
    if not images or len(images) != len(deformations):
        raise ValueError("need matching, non-empty image and deformation lists")
    rng = np.random.default_rng(opt.seed) if rng is None else rng
    A = np.array(A, dtype=np.float64)
    state = AdamState.like(A)
    n = len(images)
    for epoch in range(opt.atlas_epochs):
        order = rng.permutation(n)
        for b, start in enumerate(range(0, n, opt.batch_size)):
            grad = np.zeros_like(A)
            total = 0.0
            for i in order[start:start + opt.batch_size]:
                W = warp(images[i], deformations[i])
                loss, _, gA = dissimilarity(W, A, cfg)
                del W
                total += loss
                grad += gA
            if not np.isfinite(total) or not np.all(np.isfinite(grad)):
                raise NumericalError(f"non-finite atlas loss at epoch {epoch}, batch {b}")
            A = adam_step(A, grad, state, opt.learn_rate, opt.adam_beta1, opt.adam_beta2, opt.adam_eps)
    return A


@dataclass
class AtlasResult:
    atlas: np.ndarray
    velocities: list
    forward_deformations: list
    log: list = field(default_factory=list)
    timings: list = field(default_factory=list)


def _map(fn, items, n_jobs):
    n_jobs = n_jobs or os.cpu_count() or 1
    if n_jobs == 1 or len(items) == 1:
        return [fn(*it) for it in items]
    with ThreadPoolExecutor(max_workers=n_jobs) as pool:
        return list(pool.map(lambda it: fn(*it), items))


def _mean_data(warped, A, cfg):
    return float(np.mean([dissimilarity(W, A, cfg)[0] for W in warped]))


def build_atlas(images, cfg: LossConfig, opt: OptimConfig, callback=None):
    """Run the coordinate-descent atlas construction.

    ``callback(k, atlas, record)`` is invoked after every outer iteration.
    """
    images = [check_scalar(I, f"image {i}") for i, I in enumerate(images)]
    if len(images) < 2:
        raise StageError("input", f"atlas construction needs n >= 2 images, got {len(images)}")
    same_grid(*images)
    n = len(images)
    A = np.mean(np.stack(images), axis=0)
    velocities = [None] * n
    hat = None
    result = AtlasResult(A, [], [])

    def register(i, I, A_k, v_prev):
        try:
            v, losses = register_pairwise(I, A_k, cfg, opt, v_prev if opt.warm_start else None)
        except NumericalError as exc:
            raise StageError("register", str(exc), subject=i) from exc
        return v, losses[-1]

    for k in range(opt.outer_iters):
        t0 = time.perf_counter()
        out = _map(register, [(i, images[i], A, velocities[i]) for i in range(n)], opt.n_jobs)
        velocities = [v for v, _ in out]
        registration_loss = float(np.mean([l for _, l in out]))
        t1 = time.perf_counter()

        phis = [exp_velocity(v, opt.exp_steps) for v in velocities]
        c_before = centrality(phis)
        hat = centrality_activation(phis)
        c_after = centrality(hat)
        del phis

        folding = [folding_fraction(u) for u in hat]
        reg = float(np.mean([regularizer(u, cfg.lam)[0] for u in hat]))
        t2 = time.perf_counter()

        if cfg.metric in ("mse", "l1"):
            warped = [warp_volume(I, u) for I, u in zip(images, hat)]
            before = _mean_data(warped, A, cfg)
            A = update_atlas_closed_form(warped, cfg.metric)
            after = _mean_data(warped, A, cfg)
            del warped
        else:
            before = float(np.mean([dissimilarity(warp_volume(I, u), A, cfg)[0] for I, u in zip(images, hat)]))
            try:
                A = update_atlas_sgd(images, hat, A, cfg, opt, rng=np.random.default_rng([opt.seed, k]))
            except NumericalError as exc:
                raise StageError("atlas-update", str(exc)) from exc
            after = float(np.mean([dissimilarity(warp_volume(I, u), A, cfg)[0] for I, u in zip(images, hat)]))
        t3 = time.perf_counter()

        record = {
            "iteration": k + 1,
            "registration_loss": registration_loss,
            "data_before_update": before,
            "data_after_update": after,
            "regularization": reg,
            "objective": after + reg,
            "centrality_before": c_before,
            "centrality_after": c_after,
            "folding_pct_mean": float(np.mean(folding)),
            "folding_pct_max": float(np.max(folding)),
        }
        result.log.append(record)
        result.timings.append({
            "iteration": k + 1,
            "register_s": t1 - t0,
            "activation_s": t2 - t1,
            "atlas_update_s": t3 - t2,
            "wall_time_s": t3 - t0,
        })
        log.info(
            "iter %d: reg_loss=%.6g data %.6g -> %.6g centrality %.3g -> %.3g folding %.3f%%",
            k + 1, registration_loss, before, after, c_before, c_after, record["folding_pct_mean"],
        )
        if callback is not None:
            callback(k + 1, A, record)

    result.atlas = A
    result.velocities = velocities
    result.forward_deformations = hat
    return result
