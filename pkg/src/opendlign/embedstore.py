"""Bit-exact storage and in-memory handling of encoder feature matrices.

Features cross the process boundary as "DLEM" files: a fixed header (magic,
version, rows, dim, dtype code, normalized flag, 16-byte encoder tag) followed
by the row-major little-endian float32 payload. Matrices are float32 on disk;
all arithmetic here runs in float64.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"DLEM"
VERSION = 1
DTYPE_F32 = 1
ENCODER_TAGS = ("pretrained", "finetuned", "text")
_HEADER = struct.Struct("<4sIIIBB16s")


class EmbeddingError(Exception):
    pass


class BadMagicError(EmbeddingError):
    pass


class VersionMismatchError(EmbeddingError):
    pass


class PayloadLengthError(EmbeddingError):
    pass


class NonFiniteDataError(EmbeddingError):
    pass


@dataclass
class EmbeddingMatrix:
    """n x d feature rows from an external encoder state."""

    data: np.ndarray
    encoder_tag: str
    normalized: bool = False

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise EmbeddingError("embedding matrix must be 2-D with n, d >= 1")
        if not np.all(np.isfinite(arr)):
            raise NonFiniteDataError("embedding matrix contains NaN/Inf")
        if self.encoder_tag not in ENCODER_TAGS:
            raise EmbeddingError(
                f"encoder_tag {self.encoder_tag!r} not in {ENCODER_TAGS}")
        if self.normalized:
            norms = np.linalg.norm(arr, axis=1)
            if np.abs(norms - 1.0).max() > 1e-5:
                raise EmbeddingError("normalized flag set but rows are not unit norm")
        self.data = arr

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]


@dataclass
class ViewFeatureSet:
    """Per-view feature rows (N x d) of one shape under one encoder state."""

    shape_id: str
    features: np.ndarray
    encoder_tag: str

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise EmbeddingError("view features must be 2-D")

    @property
    def n_views(self) -> int:
        return self.features.shape[0]


def write_embeddings(m: EmbeddingMatrix, path: str | Path) -> None:
    """Serialize to the DLEM format; float32 payload round-trips bit-exactly."""
    tag = m.encoder_tag.encode("ascii")
    header = _HEADER.pack(MAGIC, VERSION, m.rows, m.dim, DTYPE_F32,
                          1 if m.normalized else 0, tag.ljust(16, b"\x00"))
    payload = m.data.astype("<f4").tobytes(order="C")
    Path(path).write_bytes(header + payload)


def read_embeddings(path: str | Path) -> EmbeddingMatrix:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise PayloadLengthError(f"{path}: file shorter than header")
    magic, version, rows, dim, dtype, normalized, tag = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise VersionMismatchError(f"{path}: version {version}, expected {VERSION}")
    if dtype != DTYPE_F32:
        raise EmbeddingError(f"{path}: unsupported dtype code {dtype}")
    expected = rows * dim * 4
    payload = raw[_HEADER.size:]
    if len(payload) != expected:
        raise PayloadLengthError(
            f"{path}: payload is {len(payload)} bytes, expected {expected}")
    data = np.frombuffer(payload, dtype="<f4").reshape(rows, dim)
    if not np.all(np.isfinite(data)):
        raise NonFiniteDataError(f"{path}: payload contains NaN/Inf")
    return EmbeddingMatrix(data=data.astype(np.float64),
                           encoder_tag=tag.rstrip(b"\x00").decode("ascii"),
                           normalized=bool(normalized))


def l2_normalize(m: EmbeddingMatrix) -> EmbeddingMatrix:
    """Divide every row by its L2 norm; errors on an all-zero row."""
    norms = np.linalg.norm(m.data, axis=1)
    zero = np.nonzero(norms == 0.0)[0]
    if zero.size:
        raise EmbeddingError(f"cannot normalize zero row {int(zero[0])}")
    return EmbeddingMatrix(data=m.data / norms[:, None],
                           encoder_tag=m.encoder_tag, normalized=True)


def normalize_rows(rows: np.ndarray) -> np.ndarray:
    rows = np.asarray(rows, dtype=np.float64)
    norms = np.linalg.norm(rows, axis=1)
    zero = np.nonzero(norms == 0.0)[0]
    if zero.size:
        raise EmbeddingError(f"cannot normalize zero row {int(zero[0])}")
    return rows / norms[:, None]


def mean_pool_normalized(v: ViewFeatureSet) -> np.ndarray:
    """L2-normalize each view row, then average across views. The pooled
    vector is deliberately NOT re-normalized; downstream losses consume it
    as-is."""
    if v.n_views < 1:
        raise EmbeddingError("need at least one view")
    return normalize_rows(v.features).mean(axis=0)


# ---------------------------------------------------------------------------
# feature manifest
# ---------------------------------------------------------------------------

@dataclass
class FeatureManifest:
    """Paths to per-shape encoder features (both encoder states) and per-label
    text features."""

    shapes: dict[str, dict[str, Path]]
    labels: dict[str, Path]


def load_feature_manifest(path: str | Path) -> FeatureManifest:
    """Parse {"shapes": {id: {"pretrained": p, "finetuned": p}},
    "labels": {label: {"text": p}}} with paths relative to the manifest."""
    path = Path(path)
    doc = json.loads(path.read_text())
    base = path.parent

    def resolve(p: str) -> Path:
        q = Path(p)
        return q if q.is_absolute() else base / q

    shapes = {}
    for sid, rec in doc.get("shapes", {}).items():
        if "pretrained" not in rec or "finetuned" not in rec:
            raise EmbeddingError(
                f"feature manifest entry {sid!r} needs 'pretrained' and 'finetuned'")
        shapes[sid] = {k: resolve(rec[k]) for k in ("pretrained", "finetuned")}
    labels = {}
    for label, rec in doc.get("labels", {}).items():
        if "text" not in rec:
            raise EmbeddingError(f"label entry {label!r} needs 'text'")
        labels[label] = resolve(rec["text"])
    return FeatureManifest(shapes=shapes, labels=labels)
