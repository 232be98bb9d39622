"""Point-cloud containers, file formats, normalization and voxelization."""

from __future__ import annotations

import dataclasses
import io
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

FORMATS = ("ply_ascii", "ply_binary_le", "kitti_bin", "csv_xyz")


class ParseError(ValueError):
    """Raised when a point-cloud file cannot be parsed.

    ``offset`` is the byte offset at which parsing failed.
    """

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class RangeError(ValueError):
    def __init__(self, message: str, index: int):
        super().__init__(message)
        self.index = index


@dataclass
class PointCloud:
    """N x 3 coordinates with optional unit normals."""

    coords: np.ndarray
    normals: Optional[np.ndarray] = None
    source_id: str = ""
    # set by estimate_normals for points whose neighborhood had rank < 2
    degenerate: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        self.coords = np.ascontiguousarray(np.asarray(self.coords, dtype=np.float64).reshape(-1, 3))
        if len(self.coords) < 1:
            raise ValueError("point cloud must contain at least one point")
        if not np.all(np.isfinite(self.coords)):
            raise ValueError("point cloud coordinates must be finite")
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
            if self.normals.shape != self.coords.shape:
                raise ValueError(
                    f"normals shape {self.normals.shape} does not match coords {self.coords.shape}"
                )
            lengths = np.linalg.norm(self.normals, axis=1)
            if np.any(np.abs(lengths - 1.0) > 1e-6):
                raise ValueError("normals must have unit length")

    def __len__(self) -> int:
        return len(self.coords)

    @property
    def n(self) -> int:
        return len(self.coords)

    def with_coords(self, coords: np.ndarray) -> "PointCloud":
        return PointCloud(coords, None, self.source_id)


@dataclass(frozen=True)
class BoundingBox:
    p_min: np.ndarray
    p_max: np.ndarray

    @classmethod
    def of(cls, pc: PointCloud) -> "BoundingBox":
        return cls(pc.coords.min(axis=0), pc.coords.max(axis=0))

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.p_max - self.p_min))


@dataclass(frozen=True)
class NormalizeTransform:
    """Maps world coordinates ``x`` to ``x * scale + offset``."""

    scale: float
    offset: np.ndarray
    padding: float

    def apply(self, coords: np.ndarray) -> np.ndarray:
        return np.asarray(coords, dtype=np.float64) * self.scale + self.offset

    def invert(self, coords: np.ndarray) -> np.ndarray:
        return (np.asarray(coords, dtype=np.float64) - self.offset) / self.scale


# ---------------------------------------------------------------------------
# loaders

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def _parse_ply_header(data: bytes):
    if not data.startswith(b"ply"):
        raise ParseError("missing 'ply' magic", 0)
    end = data.find(b"end_header")
    if end < 0:
        raise ParseError("header has no end_header line", len(data))
    nl = data.find(b"\n", end)
    body_start = len(data) if nl < 0 else nl + 1
    fmt = None
    elements = []  # (name, count, [(prop_name, type or ('list', ctype, itype))])
    offset = 0
    for raw in data[:end].split(b"\n"):
        line_offset = offset
        offset += len(raw) + 1
        try:
            tokens = raw.decode("ascii").strip().split()
        except UnicodeDecodeError:
            raise ParseError("non-ascii byte in header", line_offset) from None
        if not tokens or tokens[0] in ("ply", "comment", "obj_info"):
            continue
        if tokens[0] == "format":
            if len(tokens) < 2:
                raise ParseError("malformed format line", line_offset)
            fmt = tokens[1]
        elif tokens[0] == "element":
            if len(tokens) != 3 or not tokens[2].isdigit():
                raise ParseError("malformed element line", line_offset)
            elements.append((tokens[1], int(tokens[2]), []))
        elif tokens[0] == "property":
            if not elements:
                raise ParseError("property before any element", line_offset)
            if len(tokens) == 5 and tokens[1] == "list":
                if tokens[2] not in _PLY_TYPES or tokens[3] not in _PLY_TYPES:
                    raise ParseError("unknown list property type", line_offset)
                elements[-1][2].append((tokens[4], ("list", tokens[2], tokens[3])))
            elif len(tokens) == 3 and tokens[1] in _PLY_TYPES:
                elements[-1][2].append((tokens[2], tokens[1]))
            else:
                raise ParseError("malformed property line", line_offset)
        else:
            raise ParseError(f"unknown header keyword {tokens[0]!r}", line_offset)
    if fmt not in ("ascii", "binary_little_endian"):
        raise ParseError(f"unsupported ply format {fmt!r}", 0)
    if not elements or elements[0][0] != "vertex":
        raise ParseError("first element must be 'vertex'", 0)
    props = [p[0] for p in elements[0][2]]
    for axis in "xyz":
        if axis not in props:
            raise ParseError(f"vertex element lacks property {axis!r}", 0)
    return fmt, elements, body_start


def _read_ply(data: bytes, expect: str) -> np.ndarray:
    fmt, elements, body_start = _parse_ply_header(data)
    want = "ascii" if expect == "ply_ascii" else "binary_little_endian"
    if fmt != want:
        raise ParseError(f"file format is {fmt}, expected {want}", 0)
    _, count, props = elements[0]
    if count == 0:
        raise ParseError("vertex element has zero points", body_start)
    if any(isinstance(t, tuple) for _, t in props):
        raise ParseError("list properties in vertex element are not supported", body_start)
    names = [p for p, _ in props]
    cols = [names.index(a) for a in "xyz"]
    if fmt == "ascii":
        out = np.empty((count, 3))
        pos = body_start
        for i in range(count):
            nl = data.find(b"\n", pos)
            line = data[pos:] if nl < 0 else data[pos:nl]
            if pos >= len(data):
                raise ParseError(f"truncated vertex record {i}", pos)
            parts = line.split()
            if len(parts) < len(names):
                raise ParseError(f"truncated vertex record {i}", pos)
            try:
                out[i] = [float(parts[c]) for c in cols]
            except ValueError:
                raise ParseError(f"non-numeric value in vertex record {i}", pos) from None
            pos = len(data) if nl < 0 else nl + 1
        return out
    dtype = np.dtype([(n, "<" + _PLY_TYPES[t]) for n, t in props])
    need = dtype.itemsize * count
    if len(data) - body_start < need:
        avail = (len(data) - body_start) // dtype.itemsize
        raise ParseError(f"truncated vertex record {avail}", body_start + avail * dtype.itemsize)
    rec = np.frombuffer(data, dtype=dtype, count=count, offset=body_start)
    return np.stack([rec[a].astype(np.float64) for a in "xyz"], axis=1)


def _read_kitti(data: bytes) -> np.ndarray:
    if len(data) == 0:
        raise ParseError("file contains zero points", 0)
    if len(data) % 16:
        raise ParseError("truncated record", len(data) - len(data) % 16)
    arr = np.frombuffer(data, dtype="<f4").reshape(-1, 4)
    return arr[:, :3].astype(np.float64)


def _read_csv(data: bytes) -> np.ndarray:
    rows = []
    pos = 0
    for raw in data.split(b"\n"):
        line = raw.strip()
        if line:
            parts = line.split(b",")
            if len(parts) != 3:
                raise ParseError("expected 3 comma-separated values", pos)
            try:
                rows.append([float(p) for p in parts])
            except ValueError:
                raise ParseError("non-numeric value", pos) from None
        pos += len(raw) + 1
    if not rows:
        raise ParseError("file contains zero points", 0)
    return np.asarray(rows, dtype=np.float64)


def load_pointcloud(path, format: Optional[str] = None) -> PointCloud:
    """Read a point cloud in one of :data:`FORMATS`, keeping file order.

    When ``format`` is omitted it is inferred from the extension (``.ply``
    files are sniffed for ascii vs binary).
    """
    path = os.fspath(path)
    with open(path, "rb") as fh:
        data = fh.read()
    if format is None:
        format = _guess_format(path, data)
    if format in ("ply_ascii", "ply_binary_le"):
        coords = _read_ply(data, format)
    elif format == "kitti_bin":
        coords = _read_kitti(data)
    elif format == "csv_xyz":
        coords = _read_csv(data)
    else:
        raise ValueError(f"unknown format {format!r}; expected one of {FORMATS}")
    if not np.all(np.isfinite(coords)):
        bad = int(np.argmax(~np.all(np.isfinite(coords), axis=1)))
        raise ParseError(f"non-finite coordinate in point {bad}", 0)
    return PointCloud(coords, source_id=os.path.basename(path))


def _guess_format(path: str, data: bytes) -> str:
    ext = os.path.splitext(path)[1].lower()
    if ext == ".ply":
        head = data[:512]
        return "ply_ascii" if b"format ascii" in head else "ply_binary_le"
    if ext == ".bin":
        return "kitti_bin"
    if ext in (".csv", ".txt", ".xyz"):
        return "csv_xyz"
    raise ValueError(f"cannot infer point-cloud format from {path!r}")


def save_pointcloud(pc: PointCloud, path, format: Optional[str] = None, double: bool = False) -> None:
    """Write ``pc``; PLY files use float32 coordinates unless ``double`` is set."""
    path = os.fspath(path)
    if format is None:
        format = _guess_format(path, b"")
    buf = io.BytesIO()
    ply_double = double and format in ("ply_ascii", "ply_binary_le")
    xyz = pc.coords.astype("<f8" if ply_double else "<f4")
    if format in ("ply_ascii", "ply_binary_le"):
        kind = "ascii" if format == "ply_ascii" else "binary_little_endian"
        ptype = "double" if ply_double else "float"
        header = ["ply", f"format {kind} 1.0", f"element vertex {pc.n}",
                  f"property {ptype} x", f"property {ptype} y", f"property {ptype} z", "end_header"]
        buf.write(("\n".join(header) + "\n").encode("ascii"))
        if kind == "ascii":
            for x, y, z in xyz:
                buf.write(f"{float(x)!r} {float(y)!r} {float(z)!r}\n".encode("ascii"))
        else:
            buf.write(xyz.tobytes())
    elif format == "kitti_bin":
        rec = np.zeros((pc.n, 4), dtype="<f4")
        rec[:, :3] = xyz
        buf.write(rec.tobytes())
    elif format == "csv_xyz":
        for x, y, z in pc.coords:
            buf.write(f"{float(x)!r},{float(y)!r},{float(z)!r}\n".encode("ascii"))
    else:
        raise ValueError(f"unknown format {format!r}")
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


# ---------------------------------------------------------------------------
# normalization / quantization

def normalize_to_unit_cube(pc: PointCloud, padding: float = 0.05):
    """Isotropically map ``pc`` into ``[padding, 1 - padding]^3``.

    The longest bounding-box edge spans the padded cube; shorter axes are
    centred. A cloud of identical points maps to the cube centre.
    """
    if not 0.0 <= padding <= 0.49:
        raise ValueError(f"padding must lie in [0, 0.49], got {padding}")
    lo = pc.coords.min(axis=0)
    hi = pc.coords.max(axis=0)
    extent = float(np.max(hi - lo))
    scale = (1.0 - 2.0 * padding) / extent if extent > 0 else 1.0
    centre = 0.5 * (lo + hi)
    offset = 0.5 - centre * scale
    tf = NormalizeTransform(scale, offset, padding)
    out = tf.apply(pc.coords)
    return PointCloud(out, pc.normals, pc.source_id), tf


def remove_outliers(pc: PointCloud, percentile: float = 99.0) -> PointCloud:
    """Drop points whose distance to the centroid exceeds the given percentile."""
    r = np.linalg.norm(pc.coords - pc.coords.mean(axis=0), axis=1)
    keep = r <= np.percentile(r, percentile)
    normals = None if pc.normals is None else pc.normals[keep]
    return PointCloud(pc.coords[keep], normals, pc.source_id)


def voxelize_quantize(pc: PointCloud, bits: int = 10) -> PointCloud:
    """Snap unit-cube coordinates onto the ``2**bits`` integer grid.

    Duplicate cells are merged keeping the first occurrence in input order.
    """
    if not 1 <= bits <= 16:
        raise ValueError(f"bits must lie in [1, 16], got {bits}")
    c = pc.coords
    outside = np.any((c < 0.0) | (c > 1.0), axis=1)
    if outside.any():
        i = int(np.argmax(outside))
        raise RangeError(f"point {i} lies outside the unit cube: {c[i]}", i)
    grid = np.round(c * (2**bits - 1)).astype(np.int64)
    _, first = np.unique(grid, axis=0, return_index=True)
    first.sort()
    return PointCloud(grid[first].astype(np.float64), None, pc.source_id)


def dequantize(pc: PointCloud, bits: int = 10) -> PointCloud:
    return PointCloud(pc.coords / (2**bits - 1), None, pc.source_id)


# ---------------------------------------------------------------------------
# synthetic data

SHAPES = ("sphere_surface", "plane", "gaussian_clusters")


def generate_synthetic(shape: str, n: int, density_contrast: float = 1.0, seed: int = 0) -> PointCloud:
    """Deterministic synthetic cloud in the unit cube.

    With ``density_contrast > 1`` one region (a spherical cap, a disc on the
    plane, or the first cluster) is sampled that many times more densely than
    the rest.
    """
    if n < 8:
        raise ValueError(f"n must be >= 8, got {n}")
    if density_contrast < 1:
        raise ValueError("density_contrast must be >= 1")
    rng = np.random.default_rng(seed)
    if shape == "sphere_surface":
        pts = _sphere(rng, n, density_contrast)
    elif shape == "plane":
        pts = _plane(rng, n, density_contrast)
    elif shape == "gaussian_clusters":
        pts = _clusters(rng, n, density_contrast)
    else:
        raise ValueError(f"unknown shape {shape!r}; expected one of {SHAPES}")
    return PointCloud(pts, source_id=f"{shape}-{seed}")


def _weighted_accept(rng, n, candidates_fn, in_region_fn, contrast):
    # rejection sampling: points outside the dense region are kept with prob 1/contrast
    out = []
    have = 0
    while have < n:
        cand = candidates_fn(2 * (n - have) + 16)
        keep = in_region_fn(cand) | (rng.random(len(cand)) < 1.0 / contrast)
        cand = cand[keep]
        out.append(cand)
        have += len(cand)
    return np.concatenate(out)[:n]


def _sphere(rng, n, contrast):
    pole = rng.normal(size=3)
    pole /= np.linalg.norm(pole)

    def cand(m):
        v = rng.normal(size=(m, 3))
        return v / np.linalg.norm(v, axis=1, keepdims=True)

    unit = _weighted_accept(rng, n, cand, lambda v: v @ pole > 0.5, contrast)
    return 0.5 + 0.5 * unit


def _plane(rng, n, contrast):
    normal = rng.normal(size=3)
    normal /= np.linalg.norm(normal)
    u = np.cross(normal, [1.0, 0.0, 0.0] if abs(normal[0]) < 0.9 else [0.0, 1.0, 0.0])
    u /= np.linalg.norm(u)
    v = np.cross(normal, u)
    centre = rng.uniform(-0.2, 0.2, size=2)

    def cand(m):
        return rng.uniform(-0.5, 0.5, size=(m, 2))

    uv = _weighted_accept(rng, n, cand, lambda p: np.linalg.norm(p - centre, axis=1) < 0.2, contrast)
    pts = 0.5 + 0.6 * (uv[:, :1] * u + uv[:, 1:] * v)
    return pts


def _clusters(rng, n, contrast, k=4):
    centres = rng.uniform(0.25, 0.75, size=(k, 3))
    sigma = 0.07
    # equal spatial extent, first cluster carries `contrast` times the points
    weights = np.ones(k)
    weights[0] = contrast
    counts = np.floor(n * weights / weights.sum()).astype(int)
    counts[0] += n - counts.sum()
    pts = np.concatenate([centres[i] + sigma * rng.normal(size=(counts[i], 3)) for i in range(k)])
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    scale = 0.9 / float(np.max(hi - lo))
    return 0.5 + (pts - 0.5 * (lo + hi)) * scale


def synthetic_dataset(count: int = 64, n: int = 2048, seed: int = 0,
                      contrast_range: tuple = (1.0, 8.0)) -> list:
    """``count`` normalized synthetic clouds cycling through :data:`SHAPES` with random density contrast."""
    rng = np.random.default_rng(seed)
    clouds = []
    for i in range(count):
        contrast = float(rng.uniform(*contrast_range))
        pc = generate_synthetic(SHAPES[i % len(SHAPES)], n, contrast, seed=int(rng.integers(2**31)))
        clouds.append(dataclasses.replace(pc, source_id=f"synthetic-{i:03d}"))
    return clouds
