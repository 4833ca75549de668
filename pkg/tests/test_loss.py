import numpy as np
import pytest
from conftest import smooth_field, smooth_image
from gradcheck import check, make_instance
from hypothesis import given, settings
from hypothesis import strategies as st

from darc.atlas import OptimConfig, register_pairwise
from darc.fields import spatial_gradient
from darc.loss import METRICS, LossConfig, NumericalError, dissimilarity, regularizer, subject_loss_and_grad
from darc.transform import exp_velocity

DIMS = (10, 9, 8)


def test_config_validation():
    assert LossConfig("MSE").metric == "mse"
    assert LossConfig("ncc").lam == 8.0
    for bad in ({"metric": "mi"}, {"lam": -1}, {"ncc_window": 4}, {"ssim_window": 1}, {"regularize_on": "x"}):
        with pytest.raises(ValueError):
            LossConfig(**bad)


@pytest.mark.parametrize("metric", METRICS)
def test_identical_images_have_zero_loss(metric, rng):
    A = smooth_image(rng, DIMS)
    assert dissimilarity(A, A, LossConfig(metric))[0] == pytest.approx(0.0, abs=1e-12)


def test_offset_examples(rng):
    A = smooth_image(rng, DIMS)
    assert dissimilarity(A + 0.1, A, LossConfig("mse"))[0] == pytest.approx(0.01)
    assert dissimilarity(A + 0.1, A, LossConfig("l1"))[0] == pytest.approx(0.1)


def test_constant_volumes_under_ncc():
    loss, gW, gA = dissimilarity(np.full(DIMS, 0.2), np.full(DIMS, 0.7), LossConfig("ncc"))
    assert loss == pytest.approx(1.0)
    assert np.all(np.isfinite(gW)) and np.all(np.isfinite(gA))


@pytest.mark.parametrize("metric", ["mse", "l1"])
def test_symmetric_metrics(metric, rng):
    W, A = smooth_image(rng, DIMS), smooth_image(rng, DIMS)
    cfg = LossConfig(metric)
    l1, gW, gA = dissimilarity(W, A, cfg)
    l2, _, _ = dissimilarity(A, W, cfg)
    assert l1 == pytest.approx(l2)
    np.testing.assert_array_equal(gA, -gW)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(METRICS))
def test_dissimilarity_nonnegative(seed, metric):
    rng = np.random.default_rng(seed)
    W, A = rng.random((6, 6, 6)), rng.random((6, 6, 6))
    assert dissimilarity(W, A, LossConfig(metric, ncc_window=3, ssim_window=3))[0] >= -1e-12


@pytest.mark.parametrize("metric", METRICS)
def test_atlas_gradient_matches_finite_differences(metric, rng):
    W, A = smooth_image(rng, (6, 6, 6)), smooth_image(rng, (6, 6, 6))
    cfg = LossConfig(metric, ncc_window=3, ssim_window=3)
    _, _, gA = dissimilarity(W, A, cfg)
    h = 1e-6
    for idx in [(0, 0, 0), (2, 3, 1), (5, 5, 5), (3, 0, 4)]:
        Ap, Am = A.copy(), A.copy()
        Ap[idx] += h
        Am[idx] -= h
        fd = (dissimilarity(W, Ap, cfg)[0] - dissimilarity(W, Am, cfg)[0]) / (2 * h)
        assert gA[idx] == pytest.approx(fd, rel=1e-5, abs=1e-9)


def test_regularizer_examples(rng):
    Z = np.zeros((3,) + DIMS)
    loss, grad = regularizer(Z, 0.5)
    assert loss == 0.0 and not grad.any()
    assert regularizer(np.ones((3,) + DIMS) * 2.5, 0.5)[0] == 0.0
    u = np.zeros((3, 4, 4, 4))
    u[0] = np.arange(4.0)[:, None, None]
    assert regularizer(u, 0.7)[0] == pytest.approx(0.7)
    u2 = smooth_field(rng, DIMS, 1.5, 2)
    assert regularizer(u2 + 3.0, 0.5)[0] == pytest.approx(regularizer(u2, 0.5)[0])


def test_regularizer_gradient_is_exact(rng):
    u = smooth_field(rng, (5, 5, 5), 1.0, 1.0)
    loss, grad = regularizer(u, 0.3)
    # the penalty is quadratic, so the central difference is exact up to rounding
    for idx in [(0, 0, 0, 0), (1, 2, 2, 2), (2, 4, 1, 3), (0, 4, 4, 4)]:
        e = np.zeros_like(u)
        e[idx] = 1e-4
        fd = (regularizer(u + e, 0.3)[0] - regularizer(u - e, 0.3)[0]) / 2e-4
        assert grad[idx] == pytest.approx(fd, rel=1e-7)


def test_zero_velocity_identical_images(rng):
    A = smooth_image(rng, DIMS)
    loss, g = subject_loss_and_grad(A, A, np.zeros((3,) + DIMS), LossConfig("mse"))
    assert loss == 0.0 and np.all(np.isfinite(g))


@pytest.mark.parametrize("metric", METRICS)
@pytest.mark.parametrize("steps", [0, 7])
def test_velocity_gradient_matches_finite_differences(metric, steps):
    report = check(metric, steps, seed=11)
    assert report.ok, report


def test_velocity_regularizer_gradient():
    I, A, v = make_instance(5, (6, 6, 6))
    cfg = LossConfig("mse", regularize_on="velocity")
    _, g = subject_loss_and_grad(I, A, v, cfg, 3)
    e = np.zeros_like(v)
    e[1, 2, 3, 1] = 1e-6
    fd = (subject_loss_and_grad(I, A, v + e, cfg, 3)[0] - subject_loss_and_grad(I, A, v - e, cfg, 3)[0]) / 2e-6
    assert g[1, 2, 3, 1] == pytest.approx(fd, rel=1e-4)


def test_non_finite_input_raises(rng):
    I = smooth_image(rng, DIMS)
    I[2, 2, 2] = np.nan
    with pytest.raises((NumericalError, ValueError)):
        subject_loss_and_grad(I, I, np.zeros((3,) + DIMS), LossConfig("mse"))


def test_large_lambda_flattens_deformation(rng):
    I, A = smooth_image(rng, (12, 12, 12), 1.5), smooth_image(rng, (12, 12, 12), 1.5)
    opt = OptimConfig(outer_iters=1, inner_iters=60, learn_rate=5e-2)
    stiff, _ = register_pairwise(I, A, LossConfig("mse", lam=1e4), opt)
    loose, _ = register_pairwise(I, A, LossConfig("mse", lam=0.0), opt)

    def roughness(v):
        u = exp_velocity(v)
        return sum(float(np.mean(spatial_gradient(u[c]) ** 2)) for c in range(3))

    assert roughness(stiff) < 1e-2 * roughness(loose)
