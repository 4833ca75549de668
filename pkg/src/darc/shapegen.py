"""PCA shape model over velocity fields, mesh extraction, and synthesis metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree
from skimage import measure

from .fields import check_vector, same_grid
from .transform import DEFAULT_EXP_STEPS, TriMesh, exp_velocity


@dataclass
class PcaModel:
    """Mean velocity plus principal directions (columns) and their variances."""

    dims: tuple
    mean_velocity: np.ndarray  # flattened, length 3*nx*ny*nz
    components: np.ndarray  # (d, p), orthonormal columns
    eigenvalues: np.ndarray  # (p,), descending, >= 0

    @property
    def p(self) -> int:
        return self.components.shape[1]

    def field(self, flat):
        return np.asarray(flat).reshape((3,) + tuple(self.dims))

    def project(self, v):
        """Coordinates of ``v - mean`` along each component."""
        return self.components.T @ (np.ravel(v) - self.mean_velocity)

    def reconstruct(self, coeffs):
        return self.field(self.mean_velocity + self.components @ np.asarray(coeffs, dtype=np.float64))


def fit_pca(velocities, p):
    """Fit a PCA model with ``p`` components through the n-by-n Gram matrix."""
    velocities = [check_vector(v, "velocity") for v in velocities]
    n = len(velocities)
    if n < 2:
        raise ValueError(f"PCA needs n >= 2 fields, got {n}")
    if not 1 <= p <= n - 1:
        raise ValueError(f"p must lie in [1, {n - 1}], got {p}")
    same_grid(*velocities)
    X = np.stack([v.ravel() for v in velocities])  # (n, d)
    mean = X.mean(axis=0)
    Xc = X - mean
    gram = Xc @ Xc.T
    evals, evecs = np.linalg.eigh(gram)
    order = np.argsort(evals)[::-1][:p]
    evals = np.clip(evals[order], 0.0, None)
    evecs = evecs[:, order]
    comps = Xc.T @ evecs  # (d, p), norms sqrt(evals)
    norms = np.linalg.norm(comps, axis=0)
    scale = np.max(norms) if norms.size else 0.0
    for j in range(p):
        if norms[j] > 1e-12 * max(scale, 1.0):
            comps[:, j] /= norms[j]
        else:
            # no variance along this direction; keep the basis orthonormal anyway
            comps[:, j] = _orthonormal_fill(comps[:, :j], Xc.shape[1], j)
            evals[j] = 0.0
    # fix the sign so the largest-magnitude entry is positive
    for j in range(p):
        k = np.argmax(np.abs(comps[:, j]))
        if comps[k, j] < 0:
            comps[:, j] *= -1.0
    return PcaModel(velocities[0].shape[1:], mean, comps, evals / (n - 1))


def _orthonormal_fill(basis, d, j):
    e = np.zeros(d)
    e[j % d] = 1.0
    for _ in range(2):
        e -= basis @ (basis.T @ e)
    nrm = np.linalg.norm(e)
    if nrm < 1e-8:
        e = np.random.default_rng(j).standard_normal(d)
        e -= basis @ (basis.T @ e)
        nrm = np.linalg.norm(e)
    return e / nrm


def sample_pca(model: PcaModel, seed, steps=DEFAULT_EXP_STEPS):
    """Draw ``alpha_j ~ N(0, eigenvalue_j)``; return ``(velocity, displacement)``."""
    rng = np.random.default_rng(seed)
    alpha = rng.standard_normal(model.p) * np.sqrt(model.eigenvalues)
    v = model.reconstruct(alpha)
    return v, exp_velocity(v, steps)


def mode_shape(model: PcaModel, j, t):
    """Velocity at ``t`` standard deviations along component ``j`` (1-based)."""
    if not 1 <= j <= model.p:
        raise ValueError(f"component index must lie in [1, {model.p}], got {j}")
    alpha = np.zeros(model.p)
    alpha[j - 1] = t * np.sqrt(model.eigenvalues[j - 1])
    return model.reconstruct(alpha)


def marching_cubes(V, iso=0.5):
    """Closed, outward-oriented iso-surface mesh of ``V`` in voxel coordinates.

    The volume is padded by one voxel below ``iso`` so surfaces touching the
    border still close.
    """
    V = np.asarray(V, dtype=np.float64)
    lo, hi = float(V.min()), float(V.max())
    if hi < iso:
        # nothing reaches the level: no surface
        return TriMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    if not lo < iso < hi:
        raise ValueError(f"iso {iso} must lie strictly between volume min {lo} and max {hi}")
    pad = np.pad(V, 1, mode="constant", constant_values=min(lo, iso) - 1.0)
    verts, faces, _, _ = measure.marching_cubes(pad, level=iso, method="lewiner", allow_degenerate=False)
    verts = verts.astype(np.float64) - 1.0
    mesh = _dedupe(verts, faces.astype(np.int64))
    if signed_volume(mesh) < 0:
        mesh = TriMesh(mesh.vertices, mesh.faces[:, ::-1].copy())
    return mesh


def _dedupe(verts, faces):
    # merge coincident vertices, then drop faces that collapsed
    _, first, inverse = np.unique(np.round(verts, 9), axis=0, return_index=True, return_inverse=True)
    order = np.argsort(first)
    remap = np.empty_like(order)
    remap[order] = np.arange(len(order))
    inverse = remap[inverse.ravel()]
    verts = verts[np.sort(first)]
    faces = inverse[faces]
    keep = (faces[:, 0] != faces[:, 1]) & (faces[:, 1] != faces[:, 2]) & (faces[:, 0] != faces[:, 2])
    return TriMesh(verts, faces[keep])


def signed_volume(mesh: TriMesh) -> float:
    """Enclosed volume; positive when faces are counter-clockwise seen from outside."""
    if mesh.n_faces == 0:
        return 0.0
    a, b, c = (mesh.vertices[mesh.faces[:, k]] for k in range(3))
    return float(np.einsum("ij,ij->i", a, np.cross(b, c)).sum() / 6.0)


def edge_face_counts(mesh: TriMesh):
    """Map each undirected edge to the number of faces using it."""
    f = mesh.faces
    edges = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    edges = np.sort(edges, axis=1)
    uniq, counts = np.unique(edges, axis=0, return_counts=True)
    return uniq, counts


def is_watertight(mesh: TriMesh) -> bool:
    if mesh.n_faces == 0:
        return False
    _, counts = edge_face_counts(mesh)
    return bool(np.all(counts == 2))


def euler_characteristic(mesh: TriMesh) -> int:
    edges, _ = edge_face_counts(mesh)
    used = np.unique(mesh.faces)
    return int(len(used) - len(edges) + mesh.n_faces)


# --- synthesis metrics --------------------------------------------------------


def mesh_distance(m1: TriMesh, m2: TriMesh, correspondence=False):
    """Symmetric mean vertex-to-nearest-vertex distance.

    With ``correspondence=True`` and equal vertex counts, the mean distance
    between corresponding vertices is used instead.
    """
    if correspondence and m1.n_vertices == m2.n_vertices:
        return float(np.linalg.norm(m1.vertices - m2.vertices, axis=1).mean())
    d12, _ = cKDTree(m2.vertices).query(m1.vertices)
    d21, _ = cKDTree(m1.vertices).query(m2.vertices)
    return 0.5 * (float(d12.mean()) + float(d21.mean()))


def distance_matrix(set_a, set_b, correspondence=False):
    return np.array([[mesh_distance(a, b, correspondence) for b in set_b] for a in set_a])


def _occupancy(meshes, lo, hi, resolution):
    span = np.where(hi > lo, hi - lo, 1.0)
    grids = []
    for m in meshes:
        idx = np.floor((m.vertices - lo) / span * resolution).astype(np.intp)
        idx = np.clip(idx, 0, resolution - 1)
        g = np.zeros((resolution,) * 3)
        g[idx[:, 0], idx[:, 1], idx[:, 2]] = 1.0
        grids.append(g)
    return np.mean(grids, axis=0)


def shape_jsd(generated, real, resolution=32):
    """Jensen-Shannon divergence (nats) between mean vertex-occupancy grids."""
    allv = np.concatenate([m.vertices for m in list(generated) + list(real)])
    lo, hi = allv.min(axis=0), allv.max(axis=0)
    P = _occupancy(generated, lo, hi, resolution).ravel()
    Q = _occupancy(real, lo, hi, resolution).ravel()
    P = P / P.sum()
    Q = Q / Q.sum()
    M = 0.5 * (P + Q)

    def kl(a, b):
        nz = a > 0
        return float(np.sum(a[nz] * np.log(a[nz] / b[nz])))

    return max(0.0, 0.5 * kl(P, M) + 0.5 * kl(Q, M))


def one_nna(generated, real, correspondence=False, dist=None):
    """Leave-one-out 1-NN accuracy on the union labelled generated/real."""
    meshes = list(generated) + list(real)
    labels = np.array([0] * len(generated) + [1] * len(real))
    D = distance_matrix(meshes, meshes, correspondence) if dist is None else np.array(dist, dtype=np.float64)
    D = D.copy()
    np.fill_diagonal(D, np.inf)
    nn = np.argmin(D, axis=1)
    return float(np.mean(labels[nn] == labels))


def synthesis_metrics(generated, real, correspondence=False, resolution=32):
    """Specificity, coverage, minimum matching distance, shape JSD and 1-NNA."""
    generated, real = list(generated), list(real)
    if not generated or not real:
        raise ValueError("generated and real mesh sets must both be non-empty")
    meshes = generated + real
    D_all = distance_matrix(meshes, meshes, correspondence)
    ng = len(generated)
    D = D_all[:ng, ng:]  # generated x real
    matched = np.unique(np.argmin(D, axis=1))
    return {
        "specificity": float(D.min(axis=1).mean()),
        "coverage": len(matched) / len(real),
        "mmd": float(D.min(axis=0).mean()),
        "jsd": shape_jsd(generated, real, resolution),
        "one_nna": one_nna(generated, real, dist=D_all),
    }
