"""Point-cloud ingestion, normalization, downsampling, and per-view rigid
transforms feeding the projection pipeline.

Supported on-disk formats: PLY (ascii / binary little-endian, positions only)
and whitespace-delimited XYZ text. A dataset manifest is a JSON file mapping
shape id -> {pointcloud, metadata, label}.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class PointCloudError(Exception):
    """Malformed or unreadable point-cloud file. Carries the byte offset at
    which the problem was detected."""

    def __init__(self, message: str, byte_offset: int = 0):
        super().__init__(f"{message} (byte offset {byte_offset})")
        self.byte_offset = byte_offset


class ManifestError(Exception):
    """Invalid dataset manifest."""


@dataclass
class PointCloud:
    """A raw 3D shape sample: (n, 3) float64 positions in model space plus an
    identifier and an optional semantic description."""

    points: np.ndarray
    id: str
    metadata: str | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] == 0:
            raise ValueError(f"point cloud '{self.id}' must be a non-empty (n, 3) array")
        if not np.all(np.isfinite(pts)):
            raise ValueError(f"point cloud '{self.id}' contains non-finite coordinates")
        if not self.id:
            raise ValueError("point cloud id must be non-empty")
        self.points = pts

    def __len__(self) -> int:
        return self.points.shape[0]

    def with_points(self, points: np.ndarray) -> "PointCloud":
        return PointCloud(points=points, id=self.id, metadata=self.metadata)


@dataclass(frozen=True)
class ViewPose:
    """One orthographic camera: azimuth/elevation in degrees."""

    index: int
    azimuth_deg: float
    elevation_deg: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.azimuth_deg < 360.0:
            raise ValueError(f"azimuth {self.azimuth_deg} outside [0, 360)")
        if not -90.0 <= self.elevation_deg <= 90.0:
            raise ValueError(f"elevation {self.elevation_deg} outside [-90, 90]")
        if self.index < 0:
            raise ValueError("pose index must be >= 0")


@dataclass
class DatasetEntry:
    shape_id: str
    pointcloud: Path
    label: str
    metadata: str | None = None


@dataclass
class DatasetManifest:
    entries: list[DatasetEntry] = field(default_factory=list)

    def __post_init__(self):
        ids = [e.shape_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ManifestError("duplicate shape ids in dataset manifest")


# ---------------------------------------------------------------------------
# file loading
# ---------------------------------------------------------------------------

FORMATS = ("ply-ascii", "ply-binary-le", "xyz-text")

_PLY_SCALARS = {
    "char": "b", "int8": "b",
    "uchar": "B", "uint8": "B",
    "short": "h", "int16": "h",
    "ushort": "H", "uint16": "H",
    "int": "i", "int32": "i",
    "uint": "I", "uint32": "I",
    "float": "f", "float32": "f",
    "double": "d", "float64": "d",
}


def detect_format(path: str | Path) -> str:
    """Infer the file format: .xyz/.txt are text; .ply files are sniffed from
    their header's format line."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix in (".xyz", ".txt"):
        return "xyz-text"
    if suffix == ".ply":
        with open(path, "rb") as fh:
            head = fh.read(256)
        return "ply-binary-le" if b"binary_little_endian" in head else "ply-ascii"
    raise PointCloudError(f"cannot infer format of {path}", 0)


def load_point_cloud(path: str | Path, fmt: str, shape_id: str | None = None,
                     metadata: str | None = None) -> PointCloud:
    """Read vertex positions from `path` in the declared format.

    Non-position vertex attributes are ignored; input order is preserved.
    Raises PointCloudError (with a byte offset) on malformed headers,
    truncated payloads, or empty clouds.
    """
    path = Path(path)
    if fmt not in FORMATS:
        raise ValueError(f"unknown format {fmt!r}; expected one of {FORMATS}")
    sid = shape_id if shape_id is not None else path.stem
    raw = path.read_bytes()
    if fmt == "xyz-text":
        pts = _parse_xyz_text(raw)
    else:
        pts = _parse_ply(raw, binary=(fmt == "ply-binary-le"))
    return PointCloud(points=pts, id=sid, metadata=metadata)


def _parse_xyz_text(raw: bytes) -> np.ndarray:
    rows = []
    offset = 0
    for line in raw.splitlines(keepends=True):
        stripped = line.strip()
        if stripped:
            parts = stripped.split()
            if len(parts) < 3:
                raise PointCloudError(f"expected 3 coordinates, got {len(parts)}", offset)
            try:
                rows.append((float(parts[0]), float(parts[1]), float(parts[2])))
            except ValueError:
                raise PointCloudError("unparseable coordinate", offset) from None
        offset += len(line)
    if not rows:
        raise PointCloudError("zero vertices in xyz file", offset)
    return np.array(rows, dtype=np.float64)


def _parse_ply(raw: bytes, binary: bool) -> np.ndarray:
    # --- header ---
    end = raw.find(b"end_header\n")
    if not raw.startswith(b"ply") or end < 0:
        raise PointCloudError("not a PLY file (missing 'ply'/'end_header')", 0)
    header = raw[:end].decode("ascii", errors="replace")
    body_start = end + len(b"end_header\n")

    expected_fmt = "binary_little_endian" if binary else "ascii"
    n_vertices = -1
    properties: list[tuple[str, str]] = []  # (struct code, name)
    in_vertex_element = False
    offset = 0
    for line in header.splitlines():
        tokens = line.split()
        if not tokens:
            offset += len(line) + 1
            continue
        if tokens[0] == "format":
            if len(tokens) < 2 or tokens[1] != expected_fmt:
                raise PointCloudError(
                    f"format mismatch: declared {tokens[1] if len(tokens) > 1 else '?'},"
                    f" expected {expected_fmt}", offset)
        elif tokens[0] == "element":
            in_vertex_element = tokens[1] == "vertex"
            if in_vertex_element:
                try:
                    n_vertices = int(tokens[2])
                except (IndexError, ValueError):
                    raise PointCloudError("malformed vertex element line", offset) from None
            elif n_vertices >= 0:
                break  # later elements (faces etc.) are ignored
        elif tokens[0] == "property" and in_vertex_element:
            if tokens[1] == "list":
                raise PointCloudError("list property inside vertex element", offset)
            code = _PLY_SCALARS.get(tokens[1])
            if code is None:
                raise PointCloudError(f"unknown property type {tokens[1]!r}", offset)
            properties.append((code, tokens[2]))
        offset += len(line) + 1

    if n_vertices < 0:
        raise PointCloudError("no vertex element in header", 0)
    if n_vertices == 0:
        raise PointCloudError("zero vertices declared", 0)
    names = [name for _, name in properties]
    if not {"x", "y", "z"} <= set(names):
        raise PointCloudError("vertex element lacks x/y/z properties", 0)

    if binary:
        fmt = "<" + "".join(code for code, _ in properties)
        stride = struct.calcsize(fmt)
        payload = raw[body_start:]
        needed = stride * n_vertices
        if len(payload) < needed:
            raise PointCloudError(
                f"truncated payload: need {needed} bytes, have {len(payload)}",
                body_start + len(payload))
        cols = {name: i for i, (_, name) in enumerate(properties)}
        rows = struct.unpack("<" + "".join(code for code, _ in properties) * n_vertices,
                             payload[:needed])
        arr = np.array(rows, dtype=np.float64).reshape(n_vertices, len(properties))
        return np.ascontiguousarray(arr[:, [cols["x"], cols["y"], cols["z"]]])

    # ascii payload: one vertex per line
    ix, iy, iz = names.index("x"), names.index("y"), names.index("z")
    pts = np.empty((n_vertices, 3), dtype=np.float64)
    offset = body_start
    lines = raw[body_start:].splitlines(keepends=True)
    row = 0
    for line in lines:
        if row == n_vertices:
            break
        stripped = line.strip()
        if stripped:
            parts = stripped.split()
            if len(parts) < len(properties):
                raise PointCloudError(
                    f"vertex row has {len(parts)} fields, header declares {len(properties)}",
                    offset)
            try:
                pts[row] = (float(parts[ix]), float(parts[iy]), float(parts[iz]))
            except ValueError:
                raise PointCloudError("unparseable vertex coordinate", offset) from None
            row += 1
        offset += len(line)
    if row < n_vertices:
        raise PointCloudError(
            f"truncated payload: {n_vertices} vertices declared, {row} present", offset)
    return pts


def write_point_cloud_ply(pc: PointCloud, path: str | Path) -> None:
    """Write a binary little-endian PLY with float32 x/y/z positions."""
    path = Path(path)
    header = (
        "ply\n"
        "format binary_little_endian 1.0\n"
        f"element vertex {len(pc)}\n"
        "property float32 x\n"
        "property float32 y\n"
        "property float32 z\n"
        "end_header\n"
    )
    payload = pc.points.astype("<f4").tobytes(order="C")
    path.write_bytes(header.encode("ascii") + payload)


def load_dataset_manifest(path: str | Path) -> DatasetManifest:
    """Parse a JSON dataset manifest: {shape_id: {pointcloud, metadata, label}}."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"invalid JSON in {path}: {exc}") from None
    if not isinstance(doc, dict) or not doc:
        raise ManifestError(f"dataset manifest {path} must be a non-empty JSON object")
    entries = []
    base = path.parent
    for shape_id, rec in doc.items():
        if "pointcloud" not in rec or "label" not in rec:
            raise ManifestError(f"manifest entry {shape_id!r} needs 'pointcloud' and 'label'")
        pc_path = Path(rec["pointcloud"])
        if not pc_path.is_absolute():
            pc_path = base / pc_path
        entries.append(DatasetEntry(shape_id=shape_id, pointcloud=pc_path,
                                    label=str(rec["label"]),
                                    metadata=rec.get("metadata")))
    return DatasetManifest(entries=entries)


# ---------------------------------------------------------------------------
# geometric transforms
# ---------------------------------------------------------------------------

def _unit_cube_pass(pts: np.ndarray) -> np.ndarray:
    """One application of the unit-cube map: isotropic scale by the longest
    bounding-box edge, each axis centered by padding."""
    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    extent = hi - lo
    scale = extent.max()
    if scale == 0.0:
        return np.full_like(pts, 0.5)
    pad = (1.0 - extent / scale) / 2.0
    return (pts - lo) / scale + pad


def normalize_unit_cube(pc: PointCloud, _max_passes: int = 32) -> PointCloud:
    """Map the cloud into [0,1]^3: single isotropic scale from the longest
    bounding-box edge, then centered so the box midpoint lands at
    (0.5, 0.5, 0.5). Zero-extent clouds collapse to the cube center.

    The map is iterated to its floating-point fixed point, which makes the
    operation bitwise idempotent: re-normalizing an already-normalized cloud
    reproduces it exactly.
    """
    cur = _unit_cube_pass(pc.points)
    for _ in range(_max_passes):
        nxt = _unit_cube_pass(cur)
        if np.array_equal(nxt, cur):
            break
        cur = nxt
    return pc.with_points(cur)


def make_view_set(n_views: int = 10, azimuth_start_deg: float = 30.0,
                  azimuth_step_deg: float = 30.0,
                  elevation_deg: float = 0.0) -> list[ViewPose]:
    """Azimuth sweep: pose k sits at (start + k*step) mod 360 degrees."""
    if n_views < 1:
        raise ValueError("n_views must be >= 1")
    return [
        ViewPose(index=k,
                 azimuth_deg=(azimuth_start_deg + k * azimuth_step_deg) % 360.0,
                 elevation_deg=elevation_deg)
        for k in range(n_views)
    ]


def rotate_to_view(pc: PointCloud, pose: ViewPose) -> PointCloud:
    """Rotate about the cube center: azimuth about the vertical (y) axis,
    then elevation about the horizontal (x) axis. The view depth axis is +z.

    If the rotated bounding box spills outside [0,1]^3 it is shrunk
    isotropically about the center until it fits (never enlarged, never
    re-centered), then clamped. Shrink-only keeps single off-center points in
    place, so a half-turn genuinely mirrors them.
    """
    a = math.radians(pose.azimuth_deg)
    e = math.radians(pose.elevation_deg)
    ca, sa = math.cos(a), math.sin(a)
    ce, se = math.cos(e), math.sin(e)
    # azimuth about y, then elevation about x, applied to (p - center)
    r_az = np.array([[ca, 0.0, sa],
                     [0.0, 1.0, 0.0],
                     [-sa, 0.0, ca]])
    r_el = np.array([[1.0, 0.0, 0.0],
                     [0.0, ce, -se],
                     [0.0, se, ce]])
    rot = r_el @ r_az
    centered = (pc.points - 0.5) @ rot.T
    max_dev = np.abs(centered).max()
    if max_dev > 0.5:
        centered = centered * (0.5 / max_dev)
    out = np.clip(centered + 0.5, 0.0, 1.0)
    return pc.with_points(out)


def uniform_downsample(pc: PointCloud, n: int, seed: int) -> PointCloud:
    """Keep at most n points, sampled uniformly without replacement under
    `seed`; the surviving points keep their input order."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if len(pc) <= n:
        return pc
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(pc), size=n, replace=False)
    idx.sort()
    return pc.with_points(pc.points[idx])
