import os
import subprocess
import sys

import numpy as np
import pytest

from darc.kernels import _numba, _numpy


def _inputs(rng, C=3, dims=(6, 5, 7), M=200, spread=1.5):
    field = rng.standard_normal((C,) + dims)
    # include points outside the grid so clamping is exercised
    lo = -spread
    coords = np.stack([rng.uniform(lo, d - 1 + spread, M) for d in dims])
    return field, coords


@pytest.mark.parametrize("impl", [_numpy, _numba], ids=["numpy", "numba"])
def test_nodes_are_reproduced(impl, rng):
    field = rng.standard_normal((2, 4, 5, 6))
    idx = np.stack(np.meshgrid(*(np.arange(d) for d in field.shape[1:]), indexing="ij")).reshape(3, -1)
    out = impl.trilinear(field, idx.astype(np.float64))
    np.testing.assert_array_equal(out, field.reshape(2, -1))


def test_backends_agree(rng):
    field, coords = _inputs(rng)
    np.testing.assert_allclose(_numba.trilinear(field, coords), _numpy.trilinear(field, coords), rtol=0, atol=1e-12)
    G = rng.standard_normal((3, coords.shape[1]))
    fa, ca = _numba.trilinear_adjoint(field, coords, G)
    fb, cb = _numpy.trilinear_adjoint(field, coords, G)
    np.testing.assert_allclose(fa, fb, atol=1e-12)
    np.testing.assert_allclose(ca, cb, atol=1e-12)


@pytest.mark.parametrize("impl", [_numpy, _numba], ids=["numpy", "numba"])
def test_field_adjoint_dot_product(impl, rng):
    # <T F, G> == <F, T^T G> for the linear map F -> trilinear(F, coords)
    field, coords = _inputs(rng)
    G = rng.standard_normal((3, coords.shape[1]))
    lhs = np.sum(impl.trilinear(field, coords) * G)
    d_field, _ = impl.trilinear_adjoint(field, coords, G)
    rhs = np.sum(field * d_field)
    assert lhs == pytest.approx(rhs, rel=1e-12)


@pytest.mark.parametrize("impl", [_numpy, _numba], ids=["numpy", "numba"])
def test_coordinate_gradient_matches_finite_differences(impl, rng):
    field, coords = _inputs(rng, spread=0.0)
    # keep away from cell faces where the interpolant has kinks
    coords = np.floor(coords) + np.clip(coords - np.floor(coords), 0.05, 0.95)
    coords = np.minimum(coords, np.array(field.shape[1:])[:, None] - 1.05)
    G = rng.standard_normal((3, coords.shape[1]))
    _, d_coords = impl.trilinear_adjoint(field, coords, G)
    h = 1e-6
    for a in range(3):
        cp, cm = coords.copy(), coords.copy()
        cp[a] += h
        cm[a] -= h
        fd = np.sum((impl.trilinear(field, cp) - impl.trilinear(field, cm)) * G, axis=0) / (2 * h)
        np.testing.assert_allclose(d_coords[a], fd, rtol=1e-6, atol=1e-8)


@pytest.mark.parametrize("impl", [_numpy, _numba], ids=["numpy", "numba"])
def test_clamped_coordinates_have_zero_derivative(impl, rng):
    field = rng.standard_normal((1, 4, 4, 4))
    coords = np.array([[-2.0, 1.5, 5.0], [1.5, 1.5, 1.5], [1.5, 9.0, 1.5]])
    _, d = impl.trilinear_adjoint(field, coords, np.ones((1, 3)), need_field_grad=False)
    assert d[0, 0] == 0 and d[0, 2] == 0 and d[2, 1] == 0
    assert d[0, 1] != 0


@pytest.mark.parametrize("flag,expected", [("1", "numpy"), ("true", "numpy"), ("0", "numba"), (None, "numba")])
def test_env_flag_selects_backend(flag, expected):
    env = {k: v for k, v in os.environ.items() if k != "DARC_DISABLE_NUMBA"}
    if flag is not None:
        env["DARC_DISABLE_NUMBA"] = flag
    out = subprocess.run([sys.executable, "-c", "from darc import kernels; print(kernels.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == expected
