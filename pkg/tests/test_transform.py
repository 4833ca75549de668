import numpy as np
import pytest
from conftest import smooth_field
from hypothesis import given, settings
from hypothesis import strategies as st

from darc.transform import (
    TriMesh,
    compose,
    exp_velocity,
    folding_fraction,
    jacobian_determinant,
    sample_trilinear,
    warp_labels_nn,
    warp_mesh,
    warp_volume,
)

DIMS = (12, 10, 9)


def ramp(dims=DIMS, axis=0):
    shape = [1, 1, 1]
    shape[axis] = dims[axis]
    return np.broadcast_to(np.arange(dims[axis], dtype=float).reshape(shape), dims).copy()


def const(c, dims=DIMS):
    return np.ones((3,) + dims) * np.asarray(c, dtype=float)[:, None, None, None]


def test_trimesh_validation():
    with pytest.raises(ValueError):
        TriMesh(np.zeros((3, 3)), np.array([[0, 1, 3]]))
    with pytest.raises(ValueError):
        TriMesh(np.zeros((3, 3)), np.array([[0, 1, 1]]))


def test_sample_examples(rng):
    V = rng.random(DIMS)
    assert sample_trilinear(V, (3, 4, 5)) == V[3, 4, 5]
    assert sample_trilinear(ramp(), (2.5, 0, 0)) == 2.5
    E = np.zeros((4, 4, 4))
    E[1:] = 10.0
    assert sample_trilinear(E, (0.25, 2, 2)) == pytest.approx(2.5)
    with pytest.raises(ValueError):
        sample_trilinear(V, (np.nan, 0, 0))


def test_trilinear_polynomial_exact(rng):
    c = rng.standard_normal(8)
    x, y, z = np.meshgrid(*(np.arange(d, dtype=float) for d in DIMS), indexing="ij")

    def poly(x, y, z):
        return c[0] + c[1] * x + c[2] * y + c[3] * z + c[4] * x * y + c[5] * x * z + c[6] * y * z + c[7] * x * y * z

    V = poly(x, y, z)
    for _ in range(50):
        p = rng.uniform(0, np.array(DIMS) - 1)
        assert sample_trilinear(V, p) == pytest.approx(poly(*p), rel=1e-10, abs=1e-10)


def test_border_clamp():
    V = ramp()
    assert sample_trilinear(V, (-3.0, 1, 1)) == 0.0
    assert sample_trilinear(V, (40.0, 1, 1)) == DIMS[0] - 1


def test_warp_examples(rng):
    V = rng.random(DIMS)
    np.testing.assert_array_equal(warp_volume(V, np.zeros((3,) + DIMS)), V)
    out = warp_volume(ramp(), const((1, 0, 0)))
    np.testing.assert_allclose(out[:-1], ramp()[:-1] + 1)
    np.testing.assert_allclose(out[-1], DIMS[0] - 1)
    np.testing.assert_allclose(warp_volume(np.full(DIMS, 0.3), smooth_field(rng, DIMS, 2, 4)), 0.3)
    with pytest.raises(ValueError):
        warp_volume(V, np.zeros((3, 4, 4, 4)))


def test_warp_labels_examples(rng):
    L = np.zeros((12, 6, 6), dtype=np.uint16)
    L[4:9] = 3
    np.testing.assert_array_equal(warp_labels_nn(L, np.zeros((3, 12, 6, 6))), L)
    out = warp_labels_nn(L, const((1, 0, 0), (12, 6, 6)))
    assert np.flatnonzero(out[:, 0, 0]).tolist() == [3, 4, 5, 6, 7]
    one = np.full((8, 8, 8), 5, dtype=np.uint16)
    assert set(np.unique(warp_labels_nn(one, smooth_field(rng, (8, 8, 8), 2, 3)))) == {5}


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_label_set_closure(seed):
    rng = np.random.default_rng(seed)
    L = rng.integers(0, 4, (6, 6, 6)).astype(np.uint16)
    out = warp_labels_nn(L, smooth_field(rng, (6, 6, 6), 1.5, 3.0))
    assert set(np.unique(out)) <= set(np.unique(L))


def test_compose_examples(rng):
    u = smooth_field(rng, DIMS, 2, 2)
    Z = np.zeros_like(u)
    np.testing.assert_array_equal(compose(Z, u), u)
    np.testing.assert_array_equal(compose(u, Z), u)
    np.testing.assert_allclose(compose(const((1, 0, -2)), const((0.5, 1, 0))), const((1.5, 1, -2)))


def test_exp_examples(rng):
    Z = np.zeros((3,) + DIMS)
    np.testing.assert_array_equal(exp_velocity(Z), Z)
    np.testing.assert_allclose(exp_velocity(const((1.5, -2, 0.25))), const((1.5, -2, 0.25)))
    v = smooth_field(rng, DIMS, 2, 2)
    np.testing.assert_array_equal(exp_velocity(v, 0), v)
    with pytest.raises(ValueError):
        exp_velocity(v, -1)


def test_inverse_consistency(rng):
    dims = (32, 32, 32)
    for _ in range(3):
        v = smooth_field(rng, dims, 2, 3)
        u = exp_velocity(v)
        residual = compose(u, exp_velocity(-v))
        assert np.sqrt((residual**2).sum(0)).mean() < 0.1
        assert folding_fraction(u) == 0.0
        assert jacobian_determinant(u)[1:-1, 1:-1, 1:-1].min() > 0


def test_jacobian_examples():
    Z = np.zeros((3,) + DIMS)
    np.testing.assert_array_equal(jacobian_determinant(Z), 1.0)
    np.testing.assert_allclose(jacobian_determinant(const((3, -1, 2))), 1.0)
    stretch = np.zeros((3,) + DIMS)
    stretch[0] = 0.5 * ramp()
    np.testing.assert_allclose(jacobian_determinant(stretch)[1:-1], 1.5)
    fold = np.zeros((3,) + DIMS)
    fold[0] = -2.0 * ramp()
    assert folding_fraction(Z) == 0.0
    assert folding_fraction(fold) == 100.0


def test_warp_mesh_examples(rng):
    verts = rng.uniform(1, 8, (20, 3))
    faces = np.array([[i, i + 1, i + 2] for i in range(18)])
    m = TriMesh(verts, faces)
    np.testing.assert_array_equal(warp_mesh(m, np.zeros((3,) + DIMS)).vertices, verts)
    moved = warp_mesh(m, const((0, 0, 2)))
    np.testing.assert_allclose(moved.vertices, verts + [0, 0, 2])
    np.testing.assert_array_equal(moved.faces, faces)
    bent = warp_mesh(m, smooth_field(rng, DIMS, 2, 2))
    assert bent.n_vertices == m.n_vertices and bent.n_faces == m.n_faces
