"""File formats: raw+sidecar volumes, a NIfTI-1 subset, PLY meshes, PGM renders,
CSV tables and JSON run manifests.

Raw volume layout
-----------------
``name.vol`` is a text header of ``key = value`` lines::

    dims = nx ny nz
    spacing = sx sy sz
    dtype = f32            # or u16 for labels
    order = x-fastest
    kind = scalar          # scalar | vector3 | labels-u16
    data = name.raw

``name.raw`` holds little-endian values with linear index ``x + nx*(y + ny*z)``;
vector fields store the three channels one after another (channel slowest).
"""

from __future__ import annotations

import csv
import gzip
import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .fields import Grid
from .transform import TriMesh

KINDS = {"scalar": ("f32", 1), "vector3": ("f32", 3), "labels-u16": ("u16", 1)}
_DTYPES = {"f32": np.dtype("<f4"), "u16": np.dtype("<u2")}


class FormatError(ValueError):
    pass


# --- raw + sidecar ------------------------------------------------------------


def _infer_kind(array):
    if array.ndim == 4:
        return "vector3"
    if np.issubdtype(array.dtype, np.integer):
        return "labels-u16"
    return "scalar"


def write_volume(path, array, kind=None, spacing=(1.0, 1.0, 1.0)):
    """Write ``array`` as ``path`` (.vol header) plus a sibling .raw payload."""
    path = Path(path)
    if path.suffix != ".vol":
        path = path.with_suffix(".vol")
    array = np.asarray(array)
    kind = kind or _infer_kind(array)
    if kind not in KINDS:
        raise FormatError(f"unknown volume kind {kind!r}")
    dtype, channels = KINDS[kind]
    shape = array.shape if channels == 1 else array.shape[1:]
    if (channels == 3 and (array.ndim != 4 or array.shape[0] != 3)) or (channels == 1 and array.ndim != 3):
        raise FormatError(f"array of shape {array.shape} does not fit kind {kind}")
    grid = Grid(shape, spacing)
    if dtype == "u16" and array.size and (array.min() < 0 or array.max() > 65535):
        raise FormatError("label ids must fit in uint16")
    data = array.astype(_DTYPES[dtype])
    if channels == 1:
        payload = data.tobytes(order="F")
    else:
        payload = b"".join(data[c].tobytes(order="F") for c in range(3))
    raw = path.with_suffix(".raw")
    path.parent.mkdir(parents=True, exist_ok=True)
    raw.write_bytes(payload)
    header = (
        "# darc volume\n"
        f"dims = {grid.dims[0]} {grid.dims[1]} {grid.dims[2]}\n"
        f"spacing = {' '.join(repr(s) for s in grid.spacing)}\n"
        f"dtype = {dtype}\n"
        "order = x-fastest\n"
        f"kind = {kind}\n"
        f"data = {raw.name}\n"
    )
    path.write_text(header)
    return path


def read_header(path):
    fields = {}
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"{path}: malformed header line {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        fields[key] = value
    return fields


def read_volume(path):
    """Read a .vol/.raw pair. Returns ``(array, grid, kind)``.

    Scalars come back as float32 arrays, labels as uint16, vector fields as
    float32 ``(3, nx, ny, nz)``.
    """
    path = Path(path)
    hdr = read_header(path)
    try:
        dims = tuple(int(x) for x in hdr["dims"].split())
        spacing = tuple(float(x) for x in hdr.get("spacing", "1 1 1").split())
        kind = hdr["kind"]
        dtype = hdr["dtype"]
    except KeyError as exc:
        raise FormatError(f"{path}: header is missing {exc}") from None
    if hdr.get("order", "x-fastest") != "x-fastest":
        raise FormatError(f"{path}: unsupported order {hdr['order']!r}")
    if kind not in KINDS or KINDS[kind][0] != dtype:
        raise FormatError(f"{path}: bad kind/dtype combination {kind}/{dtype}")
    grid = Grid(dims, spacing)
    channels = KINDS[kind][1]
    raw = path.parent / hdr.get("data", path.with_suffix(".raw").name)
    payload = raw.read_bytes()
    expected = grid.size * channels * _DTYPES[dtype].itemsize
    if len(payload) != expected:
        raise FormatError(f"{raw}: payload is {len(payload)} bytes, expected {expected}")
    flat = np.frombuffer(payload, dtype=_DTYPES[dtype])
    if channels == 1:
        array = flat.reshape(dims, order="F")
    else:
        array = np.stack([flat[c * grid.size:(c + 1) * grid.size].reshape(dims, order="F") for c in range(3)])
    return array.astype(_DTYPES[dtype].newbyteorder("="), copy=True), grid, kind


# --- NIfTI-1 ------------------------------------------------------------------

_NIFTI_CODES = {16: np.dtype("f4"), 512: np.dtype("u2")}


def write_nifti(path, array, spacing=(1.0, 1.0, 1.0)):
    """Single-file NIfTI-1 (.nii or .nii.gz) for float32 scalars or uint16 labels."""
    array = np.asarray(array)
    if array.ndim != 3:
        raise FormatError("NIfTI writer handles 3D scalar or label volumes only")
    code = 512 if np.issubdtype(array.dtype, np.integer) else 16
    data = array.astype(_NIFTI_CODES[code].newbyteorder("<"))
    hdr = bytearray(348)
    struct.pack_into("<i", hdr, 0, 348)
    hdr[38:39] = b"r"
    struct.pack_into("<8h", hdr, 40, 3, *array.shape, 1, 1, 1, 1)
    struct.pack_into("<hhh", hdr, 70, code, data.dtype.itemsize * 8, 0)
    struct.pack_into("<8f", hdr, 76, 1.0, *spacing, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", hdr, 108, 352.0)
    struct.pack_into("<ff", hdr, 112, 1.0, 0.0)
    hdr[123] = 2  # mm
    struct.pack_into("<hh", hdr, 252, 0, 1)
    struct.pack_into("<4f", hdr, 280, spacing[0], 0.0, 0.0, 0.0)
    struct.pack_into("<4f", hdr, 296, 0.0, spacing[1], 0.0, 0.0)
    struct.pack_into("<4f", hdr, 312, 0.0, 0.0, spacing[2], 0.0)
    hdr[344:348] = b"n+1\x00"
    blob = bytes(hdr) + b"\x00" * 4 + data.tobytes(order="F")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    opener = gzip.open if path.name.endswith(".gz") else open
    with opener(path, "wb") as fh:
        fh.write(blob)
    return path


def read_nifti(path):
    """Read a NIfTI-1 scalar/label volume; returns ``(array, grid, kind)``."""
    path = Path(path)
    opener = gzip.open if path.name.endswith(".gz") else open
    with opener(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 348:
        raise FormatError(f"{path}: too short for a NIfTI-1 header")
    if struct.unpack_from("<i", blob, 0)[0] == 348:
        e = "<"
    elif struct.unpack_from(">i", blob, 0)[0] == 348:
        e = ">"
    else:
        raise FormatError(f"{path}: not a NIfTI-1 file")
    if blob[344:348] != b"n+1\x00":
        raise FormatError(f"{path}: bad magic {blob[344:348]!r}")
    dim = struct.unpack_from(e + "8h", blob, 40)
    if dim[0] < 3 or any(d > 1 for d in dim[4:1 + dim[0]]):
        raise FormatError(f"{path}: only 3D volumes are supported (dim={dim})")
    code = struct.unpack_from(e + "h", blob, 70)[0]
    if code not in _NIFTI_CODES:
        raise FormatError(f"{path}: unsupported datatype code {code}")
    pixdim = struct.unpack_from(e + "8f", blob, 76)
    offset = int(struct.unpack_from(e + "f", blob, 108)[0])
    slope, inter = struct.unpack_from(e + "ff", blob, 112)
    dims = tuple(int(d) for d in dim[1:4])
    dt = _NIFTI_CODES[code].newbyteorder(e)
    count = dims[0] * dims[1] * dims[2]
    flat = np.frombuffer(blob, dtype=dt, count=count, offset=offset)
    array = flat.reshape(dims, order="F").astype(_NIFTI_CODES[code])
    kind = "labels-u16" if code == 512 else "scalar"
    if code == 16 and (slope not in (0.0, 1.0) or inter != 0.0):
        array = (array * (slope or 1.0) + inter).astype(np.float32)
    spacing = tuple(abs(p) if p else 1.0 for p in pixdim[1:4])
    return array, Grid(dims, spacing), kind


def load_volume(path):
    """Read ``.vol``, ``.nii`` or ``.nii.gz`` by extension."""
    name = str(path)
    if name.endswith(".nii") or name.endswith(".nii.gz"):
        return read_nifti(path)
    if name.endswith(".vol"):
        return read_volume(path)
    raise FormatError(f"unrecognised volume extension: {path}")


def save_volume(path, array, kind=None, spacing=(1.0, 1.0, 1.0)):
    name = str(path)
    if name.endswith(".nii") or name.endswith(".nii.gz"):
        return write_nifti(path, array, spacing)
    return write_volume(path, array, kind, spacing)


def normalize_intensity(V):
    """Min-max rescale to [0, 1]; constant volumes map to 0."""
    V = np.asarray(V, dtype=np.float64)
    lo, hi = V.min(), V.max()
    return np.zeros_like(V) if hi <= lo else (V - lo) / (hi - lo)


# --- PLY ----------------------------------------------------------------------


def write_ply(path, mesh: TriMesh, binary=True):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fmt = "binary_little_endian" if binary else "ascii"
    header = (
        "ply\n"
        f"format {fmt} 1.0\n"
        f"element vertex {mesh.n_vertices}\n"
        "property double x\nproperty double y\nproperty double z\n"
        f"element face {mesh.n_faces}\n"
        "property list uchar int vertex_indices\n"
        "end_header\n"
    ).encode("ascii")
    if binary:
        verts = mesh.vertices.astype("<f8").tobytes()
        faces = np.zeros(mesh.n_faces, dtype=[("n", "u1"), ("idx", "<i4", (3,))])
        faces["n"] = 3
        faces["idx"] = mesh.faces
        body = verts + faces.tobytes()
    else:
        lines = [" ".join(repr(float(c)) for c in v) for v in mesh.vertices]
        lines += ["3 " + " ".join(str(int(i)) for i in f) for f in mesh.faces]
        body = ("\n".join(lines) + ("\n" if lines else "")).encode("ascii")
    path.write_bytes(header + body)
    return path


_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def read_ply(path) -> TriMesh:
    """Read triangle meshes in ASCII or binary little-endian PLY."""
    blob = Path(path).read_bytes()
    end = blob.find(b"end_header")
    if not blob.startswith(b"ply") or end < 0:
        raise FormatError(f"{path}: not a PLY file")
    body_start = blob.index(b"\n", end) + 1
    lines = blob[:end].decode("ascii").splitlines()
    fmt, elements = None, []
    for line in lines:
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            elements.append([tok[1], int(tok[2]), []])
        elif tok[0] == "property":
            elements[-1][2].append(tok[1:])
    if fmt not in ("ascii", "binary_little_endian"):
        raise FormatError(f"{path}: unsupported PLY format {fmt}")
    verts = np.zeros((0, 3))
    faces = np.zeros((0, 3), dtype=np.int64)
    if fmt == "ascii":
        rows = blob[body_start:].decode("ascii").split("\n")
        pos = 0
        for name, count, props in elements:
            chunk = [r.split() for r in rows[pos:pos + count]]
            pos += count
            if name == "vertex":
                names = [p[-1] for p in props]
                cols = [names.index(a) for a in "xyz"]
                verts = np.array([[float(r[c]) for c in cols] for r in chunk]).reshape(-1, 3)
            elif name == "face":
                faces = np.array([[int(x) for x in r[1:4]] for r in chunk], dtype=np.int64).reshape(-1, 3)
        return TriMesh(verts, faces)
    pos = body_start
    for name, count, props in elements:
        if props and props[0][0] == "list":
            cnt_t, idx_t = _PLY_TYPES[props[0][1]], _PLY_TYPES[props[0][2]]
            dt = np.dtype([("n", "<" + cnt_t), ("idx", "<" + idx_t, (3,))])
            arr = np.frombuffer(blob, dtype=dt, count=count, offset=pos)
            if count and np.any(arr["n"] != 3):
                raise FormatError(f"{path}: only triangle faces are supported")
            pos += dt.itemsize * count
            if name == "face":
                faces = arr["idx"].astype(np.int64)
        else:
            dt = np.dtype([(p[-1], "<" + _PLY_TYPES[p[0]]) for p in props])
            arr = np.frombuffer(blob, dtype=dt, count=count, offset=pos)
            pos += dt.itemsize * count
            if name == "vertex":
                verts = np.stack([arr[a].astype(np.float64) for a in "xyz"], axis=1)
    return TriMesh(verts, faces)


# --- PGM renders --------------------------------------------------------------


def _slice(V, axis, index):
    if axis not in (0, 1, 2):
        raise ValueError(f"axis must be 0, 1 or 2, got {axis}")
    if not 0 <= index < V.shape[axis]:
        raise ValueError(f"slice index {index} outside [0, {V.shape[axis] - 1}] on axis {axis}")
    # rows follow the higher remaining axis, columns the lower one
    return np.take(V, index, axis=axis).T


def slice_image(V, axis, index, labels=None):
    """8-bit min-max-normalised slice; label boundaries drawn at 255 if ``labels`` given."""
    S = _slice(np.asarray(V, dtype=np.float64), axis, index)
    lo, hi = S.min(), S.max()
    if hi > lo:
        img = np.round((S - lo) / (hi - lo) * 254.0).astype(np.uint8)
    else:
        img = np.full(S.shape, 128, dtype=np.uint8)
    if labels is not None:
        L = _slice(np.asarray(labels), axis, index)
        edge = np.zeros(L.shape, dtype=bool)
        edge[:-1, :] |= L[:-1, :] != L[1:, :]
        edge[:, :-1] |= L[:, :-1] != L[:, 1:]
        img[edge] = 255
    return img


def write_pgm(path, img):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    h, w = img.shape
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(img, dtype=np.uint8).tobytes())
    return path


def read_pgm(path):
    blob = Path(path).read_bytes()
    parts = blob.split(b"\n", 3)
    if parts[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM")
    w, h = (int(x) for x in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8, count=w * h).reshape(h, w)


def render_slices(V, axis, index, path, labels=None):
    return write_pgm(path, slice_image(V, axis, index, labels))


# --- tables and manifests -----------------------------------------------------


def write_csv(path, rows, fieldnames):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return path


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(path, manifest):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def read_manifest(path):
    return json.loads(Path(path).read_text())


def save_pca(path, model):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, dims=np.array(model.dims), mean_velocity=model.mean_velocity,
                 components=model.components, eigenvalues=model.eigenvalues)
    return path


def load_pca(path):
    from .shapegen import PcaModel

    with np.load(path) as z:
        return PcaModel(tuple(int(d) for d in z["dims"]), z["mean_velocity"], z["components"], z["eigenvalues"])
