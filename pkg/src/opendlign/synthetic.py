"""Synthetic dataset generators.

These build self-contained fixtures for exercising the pipeline without any
external encoder: simple geometric point clouds with a dataset manifest, and
feature files for orthogonal-class zero-shot / few-shot / alignment runs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .embedstore import EmbeddingMatrix, write_embeddings, normalize_rows
from .geomio import PointCloud, write_point_cloud_ply


def make_shape_cloud(kind: str, n_points: int, seed: int,
                     shape_id: str | None = None,
                     metadata: str | None = None) -> PointCloud:
    """Sample a surface point cloud: 'sphere', 'box', or 'torus'."""
    rng = np.random.default_rng(seed)
    if kind == "sphere":
        v = rng.normal(size=(n_points, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        pts = v * 0.5
    elif kind == "box":
        face = rng.integers(0, 6, n_points)
        uv = rng.uniform(-0.5, 0.5, (n_points, 2))
        pts = np.empty((n_points, 3))
        axis = face % 3
        sign = np.where(face < 3, 0.5, -0.5)
        for i in range(n_points):
            rest = [a for a in range(3) if a != axis[i]]
            pts[i, axis[i]] = sign[i]
            pts[i, rest[0]] = uv[i, 0]
            pts[i, rest[1]] = uv[i, 1]
    elif kind == "torus":
        theta = rng.uniform(0, 2 * np.pi, n_points)
        phi = rng.uniform(0, 2 * np.pi, n_points)
        r_major, r_minor = 0.35, 0.15
        pts = np.stack([
            (r_major + r_minor * np.cos(phi)) * np.cos(theta),
            r_minor * np.sin(phi),
            (r_major + r_minor * np.cos(phi)) * np.sin(theta),
        ], axis=1)
    else:
        raise ValueError(f"unknown shape kind {kind!r}")
    sid = shape_id or f"{kind}_{seed}"
    return PointCloud(points=pts + 0.5, id=sid,
                      metadata=metadata if metadata is not None else kind)


def write_demo_dataset(out_dir: str | Path, n_per_kind: int = 1,
                       n_points: int = 20000, seed: int = 0) -> Path:
    """Write PLY clouds plus a dataset manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {}
    counter = 0
    for kind in ("sphere", "box", "torus"):
        for i in range(n_per_kind):
            pc = make_shape_cloud(kind, n_points, seed + counter,
                                  shape_id=f"{kind}_{i:03d}")
            rel = f"{pc.id}.ply"
            write_point_cloud_ply(pc, out_dir / rel)
            manifest[pc.id] = {"pointcloud": rel, "format": "ply-binary-le",
                               "metadata": kind, "label": kind}
            counter += 1
    path = out_dir / "dataset.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path


# ---------------------------------------------------------------------------
# orthogonal-class feature fixtures
# ---------------------------------------------------------------------------

@dataclass
class ZeroShotFixture:
    labels: list[str]               # M class names
    label_dirs: np.ndarray          # (M, d) orthonormal
    shape_ids: list[str]
    truths: dict[str, str]
    pre_features: dict[str, np.ndarray]   # shape_id -> (N, d)
    ft_features: dict[str, np.ndarray]


def make_zeroshot_fixture(n_shapes: int, n_classes: int, dim: int,
                          n_views: int, sigma: float, seed: int) -> ZeroShotFixture:
    """Shapes whose view features are a noisy copy of their class direction.

    Class directions are the first `n_classes` standard basis vectors of R^dim
    (mutually orthogonal); every view draws fresh Gaussian noise with the
    given sigma per coordinate and is then L2-normalized.
    """
    if n_classes > dim:
        raise ValueError("need dim >= n_classes for orthogonal directions")
    rng = np.random.default_rng(seed)
    labels = [f"class_{c:03d}" for c in range(n_classes)]
    dirs = np.eye(dim)[:n_classes]
    shape_ids, truths, pre, ft = [], {}, {}, {}
    for s in range(n_shapes):
        c = s % n_classes
        sid = f"shape_{s:04d}"
        shape_ids.append(sid)
        truths[sid] = labels[c]
        noisy = dirs[c] + sigma * rng.normal(size=(2 * n_views, dim))
        rows = normalize_rows(noisy)
        pre[sid] = rows[:n_views]
        ft[sid] = rows[n_views:]
    return ZeroShotFixture(labels=labels, label_dirs=dirs, shape_ids=shape_ids,
                           truths=truths, pre_features=pre, ft_features=ft)


def write_zeroshot_fixture(fix: ZeroShotFixture, out_dir: str | Path) -> Path:
    """Write DLEM files, a feature manifest, and a truths JSON; returns the
    feature-manifest path."""
    out_dir = Path(out_dir)
    (out_dir / "features").mkdir(parents=True, exist_ok=True)
    doc = {"shapes": {}, "labels": {}}
    for sid in fix.shape_ids:
        rels = {}
        for tag, feats in (("pretrained", fix.pre_features[sid]),
                           ("finetuned", fix.ft_features[sid])):
            rel = f"features/{sid}_{tag}.dlem"
            write_embeddings(EmbeddingMatrix(data=feats, encoder_tag=tag,
                                             normalized=True), out_dir / rel)
            rels[tag] = rel
        doc["shapes"][sid] = rels
    for label, direction in zip(fix.labels, fix.label_dirs):
        rel = f"features/label_{label}.dlem"
        prompts = np.tile(direction, (80, 1))
        write_embeddings(EmbeddingMatrix(data=prompts, encoder_tag="text",
                                         normalized=True), out_dir / rel)
        doc["labels"][label] = {"text": rel}
    manifest_path = out_dir / "features.json"
    manifest_path.write_text(json.dumps(doc, indent=2) + "\n")
    (out_dir / "truths.json").write_text(json.dumps(fix.truths, indent=2) + "\n")
    return manifest_path


def write_align_fixture(out_dir: str | Path, n_shapes: int = 64, dim: int = 16,
                        n_tokens: int = 4, seed: int = 0,
                        image_equals_frozen: bool = True) -> Path:
    """Write an alignment-training manifest whose targets are reachable by the
    residual identity: pooled image features equal the (unit) frozen depth
    features. Returns the manifest path."""
    out_dir = Path(out_dir)
    (out_dir / "align").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    doc = {"shapes": {}}
    for s in range(n_shapes):
        sid = f"shape_{s:04d}"
        frozen = normalize_rows(rng.normal(size=(1, dim)))
        tokens = 0.1 * rng.normal(size=(n_tokens, dim))
        image = frozen if image_equals_frozen else normalize_rows(rng.normal(size=(1, dim)))
        rels = {}
        for key, data, tag in (("depth_tokens", tokens, "finetuned"),
                               ("depth_frozen", frozen, "finetuned"),
                               ("image_pooled", image, "pretrained")):
            rel = f"align/{sid}_{key}.dlem"
            write_embeddings(EmbeddingMatrix(data=data, encoder_tag=tag), out_dir / rel)
            rels[key] = rel
        doc["shapes"][sid] = rels
    path = out_dir / "align.json"
    path.write_text(json.dumps(doc, indent=2) + "\n")
    return path
