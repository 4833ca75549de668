import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from darc.fields import (
    Grid,
    field_lincomb,
    gradient_adjoint,
    pairwise_sum,
    reduce_mean_vector,
    spatial_gradient,
)

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False, width=32)
vec4 = arrays(np.float64, (3, 4, 4, 4), elements=finite)


def test_grid_validation():
    assert Grid((4, 5, 6)).size == 120
    with pytest.raises(ValueError):
        Grid((3, 8, 8))
    with pytest.raises(ValueError):
        Grid((8, 8, 8), spacing=(1.0, 0.0, 1.0))


def test_lincomb_examples():
    F = np.random.default_rng(0).standard_normal((3, 4, 4, 4))
    Z = np.zeros_like(F)
    np.testing.assert_array_equal(field_lincomb(1.0, F, 0.0, Z), F)
    np.testing.assert_array_equal(field_lincomb(1.0, F, -1.0, F), Z)
    a = np.zeros((3, 4, 4, 4))
    a[0] = 2.0
    b = np.zeros((3, 4, 4, 4))
    b[1] = 2.0
    out = field_lincomb(0.5, a, 0.5, b)
    assert np.all(out[0] == 1) and np.all(out[1] == 1) and np.all(out[2] == 0)
    with pytest.raises(ValueError):
        field_lincomb(1.0, F, 1.0, np.zeros((3, 5, 4, 4)))


@given(vec4, vec4)
def test_lincomb_commutes(F, G):
    np.testing.assert_array_equal(field_lincomb(1, F, 1, G) - field_lincomb(1, G, 1, F), 0.0)


def test_gradient_examples():
    assert np.all(spatial_gradient(np.full((5, 6, 7), 3.25)) == 0)
    x = np.arange(6, dtype=float)[:, None, None] * np.ones((6, 5, 4))
    g = spatial_gradient(x)
    np.testing.assert_array_equal(g[0], 1.0)
    np.testing.assert_array_equal(g[1:], 0.0)
    # interior central difference of x^2 at x=3: (16 - 4) / 2 = 6
    assert spatial_gradient(x**2)[0][3, 2, 2] == 6.0


@pytest.mark.parametrize("n", [2, 3, 4, 7])
def test_gradient_adjoint_is_transpose(n):
    # dense matrix of the 1-D stencil, built column by column from the forward op
    D = np.zeros((n, n))
    for j in range(n):
        e = np.zeros((n, 4, 4))
        e[j] = 1.0
        D[:, j] = spatial_gradient(e)[0][:, 0, 0]
    g = np.random.default_rng(n).standard_normal((n, 4, 4))
    np.testing.assert_allclose(gradient_adjoint(g, 0)[:, 1, 2], D.T @ g[:, 1, 2], atol=1e-14)


def test_reduce_mean_examples():
    assert reduce_mean_vector(np.zeros((3, 4, 4, 4))) == (0.0, 0.0, 0.0)
    c = np.ones((3, 4, 4, 4)) * np.array([1.0, 2.0, 3.0])[:, None, None, None]
    assert reduce_mean_vector(c) == (1.0, 2.0, 3.0)
    half = np.zeros((3, 4, 4, 4))
    half[0, :2] = 2.0
    assert reduce_mean_vector(half) == (1.0, 0.0, 0.0)


@settings(max_examples=30)
@given(arrays(np.float32, (3, 6, 5, 4), elements=st.floats(-100, 100, width=32)))
def test_mean_removal_leaves_zero_mean(F):
    means = np.array(reduce_mean_vector(F))
    centred = field_lincomb(1.0, F.astype(np.float32), -1.0, np.broadcast_to(means[:, None, None, None], F.shape).astype(np.float32))
    assert np.max(np.abs(reduce_mean_vector(centred))) <= 1e-5


def test_pairwise_sum_accuracy():
    x = np.full(1 << 16, 0.1, dtype=np.float32)
    assert abs(pairwise_sum(x) - 6553.6) < 1e-3
