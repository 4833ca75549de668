"""Dissimilarity metrics, diffusion regularizer, and exact per-subject gradients.

Every metric is a per-voxel mean so that ``lambda`` carries over between
grid sizes. Gradients are hand-written adjoints of the forward formulas.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.ndimage import uniform_filter

from .fields import check_scalar, gradient_adjoint, same_grid, spatial_gradient
from .transform import DEFAULT_EXP_STEPS, exp_velocity_adjoint, exp_velocity_path, warp_volume, warp_volume_adjoint

METRICS = ("mse", "l1", "ncc", "ssim")
NCC_VARIANCE_FLOOR = 1e-5
DEFAULT_LAMBDA = {"mse": 0.5, "l1": 0.5, "ncc": 8.0, "ssim": 8.0}


class NumericalError(RuntimeError):
    """Raised when a loss or gradient turns non-finite."""


@dataclass(frozen=True)
class LossConfig:
    metric: str = "mse"
    lam: float | None = None
    ncc_window: int = 9
    ssim_window: int = 7
    ssim_c1: float = 1e-4
    ssim_c2: float = 9e-4
    regularize_on: str = "deformation"

    def __post_init__(self):
        metric = self.metric.lower()
        if metric not in METRICS:
            raise ValueError(f"unknown metric {self.metric!r}; expected one of {METRICS}")
        object.__setattr__(self, "metric", metric)
        if self.lam is None:
            object.__setattr__(self, "lam", DEFAULT_LAMBDA[metric])
        if not self.lam >= 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        for name in ("ncc_window", "ssim_window"):
            w = getattr(self, name)
            if w < 3 or w % 2 == 0:
                raise ValueError(f"{name} must be odd and >= 3, got {w}")
        if self.regularize_on not in ("deformation", "velocity"):
            raise ValueError(f"regularize_on must be 'deformation' or 'velocity', got {self.regularize_on!r}")

    def to_dict(self):
        return asdict(self)


class _BoxMean:
    """Local mean over a cubic window, normalised by the in-volume voxel count."""

    def __init__(self, shape, window):
        self.window = window
        self.inv_count = 1.0 / self._sum(np.ones(shape))

    def _sum(self, x):
        return uniform_filter(x, size=self.window, mode="constant", cval=0.0) * self.window**3

    def __call__(self, x):
        return self._sum(x) * self.inv_count

    def adjoint(self, g):
        # box sum is symmetric, so B^T = S D^-1
        return self._sum(g * self.inv_count)


def _mse(W, A):
    r = W - A
    n = r.size
    gW = (2.0 / n) * r
    return float(np.mean(r * r)), gW, -gW


def _l1(W, A):
    r = W - A
    n = r.size
    gW = np.sign(r) / n
    return float(np.mean(np.abs(r))), gW, -gW


def _ncc(W, A, window):
    B = _BoxMean(W.shape, window)
    n = W.size
    mW, mA = B(W), B(A)
    sWA = B(W * A) - mW * mA
    sWW = B(W * W) - mW * mW
    sAA = B(A * A) - mA * mA
    Q = np.maximum(sWW, NCC_VARIANCE_FLOOR)
    R = np.maximum(sAA, NCC_VARIANCE_FLOOR)
    cc = sWA * sWA / (Q * R)
    loss = 1.0 - float(np.mean(cc))

    g = -1.0 / n
    gP = g * 2.0 * sWA / (Q * R)
    gQ = np.where(sWW > NCC_VARIANCE_FLOOR, -g * cc / Q, 0.0)
    gR = np.where(sAA > NCC_VARIANCE_FLOOR, -g * cc / R, 0.0)

    bP, bQ, bR = B.adjoint(gP), B.adjoint(gQ), B.adjoint(gR)
    gW = A * bP - B.adjoint(gP * mA) + 2.0 * W * bQ - B.adjoint(2.0 * gQ * mW)
    gA = W * bP - B.adjoint(gP * mW) + 2.0 * A * bR - B.adjoint(2.0 * gR * mA)
    return loss, gW, gA


def _ssim(W, A, window, c1, c2):
    B = _BoxMean(W.shape, window)
    n = W.size
    mW, mA = B(W), B(A)
    sWA = B(W * A) - mW * mA
    sWW = B(W * W) - mW * mW
    sAA = B(A * A) - mA * mA
    num1 = 2.0 * mW * mA + c1
    num2 = 2.0 * sWA + c2
    den1 = mW * mW + mA * mA + c1
    den2 = sWW + sAA + c2
    s = num1 * num2 / (den1 * den2)
    loss = 1.0 - float(np.mean(s))

    g = -1.0 / n
    g_num1 = g * num2 / (den1 * den2)
    g_num2 = g * num1 / (den1 * den2)
    g_den1 = -g * s / den1
    g_den2 = -g * s / den2
    # partials w.r.t. local statistics
    g_mW = 2.0 * mA * g_num1 + 2.0 * mW * g_den1
    g_mA = 2.0 * mW * g_num1 + 2.0 * mA * g_den1
    g_sWA = 2.0 * g_num2
    g_sWW = g_den2
    g_sAA = g_den2
    # s.. = B(xy) - B(x)B(y) -> fold the product terms into the mean gradients
    g_mW = g_mW - g_sWA * mA - 2.0 * g_sWW * mW
    g_mA = g_mA - g_sWA * mW - 2.0 * g_sAA * mA
    b_sWA = B.adjoint(g_sWA)
    gW = B.adjoint(g_mW) + A * b_sWA + 2.0 * W * B.adjoint(g_sWW)
    gA = B.adjoint(g_mA) + W * b_sWA + 2.0 * A * B.adjoint(g_sAA)
    return loss, gW, gA


def dissimilarity(W: np.ndarray, A: np.ndarray, cfg: LossConfig):
    """Return ``(loss, dL/dW, dL/dA)`` for the configured metric."""
    W = np.asarray(W, dtype=np.float64)
    A = np.asarray(A, dtype=np.float64)
    same_grid(W, A)
    if cfg.metric == "mse":
        return _mse(W, A)
    if cfg.metric == "l1":
        return _l1(W, A)
    if cfg.metric == "ncc":
        return _ncc(W, A, cfg.ncc_window)
    if cfg.metric == "ssim":
        return _ssim(W, A, cfg.ssim_window, cfg.ssim_c1, cfg.ssim_c2)
    raise ValueError(f"unknown metric {cfg.metric!r}")


def regularizer(u: np.ndarray, lam: float):
    """Diffusion penalty ``lam * sum_{c,axis} mean((d u_c / d axis)^2)`` and its gradient."""
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    u = np.asarray(u, dtype=np.float64)
    n = u[0].size
    loss = 0.0
    grad = np.zeros_like(u)
    for c in range(3):
        D = spatial_gradient(u[c])
        loss += float(np.sum(D * D))
        for a in range(3):
            grad[c] += gradient_adjoint(D[a], a)
    return lam * loss / n, (2.0 * lam / n) * grad


def subject_loss_and_grad(I, A, v, cfg: LossConfig, steps: int = DEFAULT_EXP_STEPS, details=False):
    """Objective of one subject against the atlas and its exact gradient w.r.t. ``v``.

    ``u = Exp(v)``, ``W = I o u``, loss = dissimilarity(W, A) + regularizer.
    With ``details=True`` a third element carries the data/regularizer split.
    """
    path = exp_velocity_path(v, steps)
    u = path[-1]
    W = warp_volume(I, u)
    data, gW, _ = dissimilarity(W, A, cfg)
    reg_field = u if cfg.regularize_on == "deformation" else v
    reg, g_reg = regularizer(reg_field, cfg.lam)
    loss = data + reg
    if not np.isfinite(loss):
        raise NumericalError(f"non-finite subject loss (data={data}, reg={reg})")

    g_u = warp_volume_adjoint(I, u, gW)
    if cfg.regularize_on == "deformation":
        g_u = g_u + g_reg
    g_v = exp_velocity_adjoint(path, g_u)
    if cfg.regularize_on == "velocity":
        g_v = g_v + g_reg
    if details:
        return loss, g_v, {"data": data, "reg": reg, "u": u, "warped": W}
    return loss, g_v


def check_image(I, name="image"):
    return check_scalar(I, name)
