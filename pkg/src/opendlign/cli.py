"""Batch command-line frontend.

Subcommands: project, prompts, align, classify-zs, classify-fs, retrieve,
eval. Options resolve as flag > config file > built-in default. Every command
validates its inputs before writing anything and stamps its output directory
with a run.json (config hash, seed, tool version).

Exit codes: 0 success, 1 validation failure, 2 partial processing failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .geomio import (DatasetManifest, ManifestError, detect_format,
                     load_dataset_manifest, load_point_cloud, make_view_set,
                     normalize_unit_cube, uniform_downsample)
from .projection import (ProjectionConfig, export_control_image,
                         export_generation_manifest, project_views,
                         save_control_png, save_depth_png, warmup_kernels)
from .prompts import PromptSet, default_prompt_set, export_prompts_json, pool_text_features
from .embedstore import (EmbeddingError, load_feature_manifest, read_embeddings,
                         normalize_rows)
from .align import (TrainConfig, load_align_dataset, save_checkpoint,
                    train_align, write_loss_curve, AlignError)
from .inference import (InferenceError, LogRegConfig, build_retrieval_index,
                        fewshot_classify, fit_logreg, knn_retrieve,
                        topk_accuracy, zeroshot_classify)


EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_PARTIAL = 2


class ValidationFailure(Exception):
    pass


@dataclasses.dataclass
class ViewConfig:
    n_views: int = 10
    azimuth_start_deg: float = 30.0
    azimuth_step_deg: float = 30.0
    elevation_deg: float = 0.0


@dataclasses.dataclass
class RunConfig:
    projection: ProjectionConfig = dataclasses.field(default_factory=ProjectionConfig)
    views: ViewConfig = dataclasses.field(default_factory=ViewConfig)
    train: TrainConfig = dataclasses.field(default_factory=TrainConfig)
    seed: int = 0
    max_points: int = 10000
    jobs: int = 1


def _default_jobs() -> int | None:
    env = os.environ.get("DLIGN_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ValidationFailure(f"DLIGN_THREADS={env!r} is not an integer") from None
    return None


def load_run_config(path: str | Path | None, overrides: dict) -> RunConfig:
    """Merge defaults, an optional JSON config file, and CLI overrides."""
    doc = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ValidationFailure(f"config file not found: {p}")
        try:
            doc = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ValidationFailure(f"invalid config JSON: {exc}") from None

    def build(cls, section: str, extra: dict):
        kwargs = dict(doc.get(section, {}))
        kwargs.update({k: v for k, v in extra.items() if v is not None})
        try:
            return cls(**kwargs)
        except (TypeError, ValueError) as exc:
            raise ValidationFailure(f"bad '{section}' config: {exc}") from None

    cfg = RunConfig(
        projection=build(ProjectionConfig, "projection", overrides.get("projection", {})),
        views=build(ViewConfig, "views", overrides.get("views", {})),
        train=build(TrainConfig, "train", overrides.get("train", {})),
    )
    for key in ("seed", "max_points", "jobs"):
        if overrides.get(key) is not None:
            setattr(cfg, key, overrides[key])
        elif key in doc:
            setattr(cfg, key, doc[key])
    env_jobs = _default_jobs()
    if overrides.get("jobs") is None and "jobs" not in doc and env_jobs is not None:
        cfg.jobs = env_jobs
    return cfg


def config_hash(cfg: RunConfig) -> str:
    canon = json.dumps(dataclasses.asdict(cfg), sort_keys=True)
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def write_run_stamp(out_dir: Path, cfg: RunConfig, extra: dict | None = None) -> None:
    doc = {"config_hash": config_hash(cfg), "seed": cfg.seed, "version": __version__}
    if extra:
        doc.update(extra)
    (out_dir / "run.json").write_text(json.dumps(doc, indent=2) + "\n")


# ---------------------------------------------------------------------------
# project
# ---------------------------------------------------------------------------

def cmd_project(args) -> int:
    cfg = load_run_config(args.config, {
        "projection": {},
        "views": {"n_views": args.n_views, "elevation_deg": args.elevation},
        "seed": args.seed, "max_points": args.max_points, "jobs": args.jobs,
    })
    manifest_path = Path(args.dataset)
    if not manifest_path.exists():
        raise ValidationFailure(f"dataset manifest not found: {manifest_path}")
    try:
        manifest = load_dataset_manifest(manifest_path)
    except ManifestError as exc:
        raise ValidationFailure(str(exc)) from None
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    poses = make_view_set(cfg.views.n_views, cfg.views.azimuth_start_deg,
                          cfg.views.azimuth_step_deg, cfg.views.elevation_deg)
    warmup_kernels()
    failures = []
    done = 0
    fmt_doc = json.loads(manifest_path.read_text())
    for entry in manifest.entries:
        try:
            fmt = fmt_doc[entry.shape_id].get("format") or detect_format(entry.pointcloud)
            pc = load_point_cloud(entry.pointcloud, fmt, shape_id=entry.shape_id,
                                  metadata=entry.metadata)
            pc = normalize_unit_cube(pc)
            pc = uniform_downsample(pc, cfg.max_points, cfg.seed)
            depths = project_views(pc, poses, cfg.projection, jobs=cfg.jobs)
            shape_dir = out_dir / entry.shape_id
            shape_dir.mkdir(parents=True, exist_ok=True)
            control_rels = []
            for k, depth in enumerate(depths):
                save_depth_png(depth, shape_dir / f"view_{k}_depth.png")
                control = export_control_image(depth)
                rel = f"view_{k}_control.png"
                save_control_png(control, shape_dir / rel)
                control_rels.append(rel)
            export_generation_manifest(pc, poses, control_rels,
                                       shape_dir / "generation_manifest.json")
            done += 1
            print(f"projected {entry.shape_id}: {len(poses)} views")
        except Exception as exc:
            failures.append({"shape_id": entry.shape_id, "error": str(exc)})
            print(f"FAILED {entry.shape_id}: {exc}", file=sys.stderr)
    write_run_stamp(out_dir, cfg, {"shapes_done": done, "failures": failures})
    print(f"{done}/{len(manifest.entries)} shapes projected, "
          f"{len(failures)} failed")
    return EXIT_PARTIAL if failures else EXIT_OK


# ---------------------------------------------------------------------------
# prompts
# ---------------------------------------------------------------------------

def cmd_prompts(args) -> int:
    labels_path = Path(args.labels)
    if not labels_path.exists():
        raise ValidationFailure(f"labels file not found: {labels_path}")
    labels = [ln.strip() for ln in labels_path.read_text().splitlines() if ln.strip()]
    if not labels:
        raise ValidationFailure(f"labels file {labels_path} is empty")
    ps = PromptSet.from_file(args.templates) if args.templates else default_prompt_set()
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    doc = export_prompts_json(labels, out, ps)
    print(f"wrote {len(doc)} x {len(next(iter(doc.values())))} prompts to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# align
# ---------------------------------------------------------------------------

def cmd_align(args) -> int:
    cfg = load_run_config(args.config, {
        "train": {k: getattr(args, k) for k in
                  ("peak_lr", "batch", "epochs", "weight_decay")},
        "seed": args.seed,
    })
    if args.seed is not None:
        cfg.train = dataclasses.replace(cfg.train, seed=args.seed)
    manifest = Path(args.align_manifest)
    if not manifest.exists():
        raise ValidationFailure(f"alignment manifest not found: {manifest}")
    try:
        dataset = load_align_dataset(manifest)
    except AlignError as exc:
        raise ValidationFailure(str(exc)) from None
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    head, curve = train_align(dataset, cfg.train)
    save_checkpoint(head, out_dir / "head.ckpt")
    write_loss_curve(curve, out_dir / "loss.csv")
    write_run_stamp(out_dir, cfg, {"steps": len(curve)})
    final = curve[-1]["loss_total"] if curve else float("nan")
    print(f"trained {len(curve)} steps on {dataset.size} shapes "
          f"(d={dataset.dim}); final loss {final:.6f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# classification / retrieval / eval
# ---------------------------------------------------------------------------

def _load_label_dirs(fm) -> tuple[list[str], np.ndarray]:
    labels = sorted(fm.labels)
    if not labels:
        raise ValidationFailure("feature manifest lists no labels")
    dirs = []
    for label in labels:
        mat = read_embeddings(fm.labels[label])
        dirs.append(pool_text_features(mat, label).vector)
    return labels, np.stack(dirs)


def _validate_feature_files(fm, shape_ids) -> None:
    missing = []
    for sid in shape_ids:
        for tag in ("pretrained", "finetuned"):
            p = fm.shapes[sid][tag]
            if not p.exists():
                missing.append(str(p))
    for label, p in fm.labels.items():
        if not p.exists():
            missing.append(str(p))
    if missing:
        raise ValidationFailure("missing feature files: " + ", ".join(sorted(missing)))


def _write_predictions(rows: list[tuple[str, int, str, float]], path: Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["shape_id", "rank", "label", "logit"])
        for row in rows:
            writer.writerow([row[0], row[1], row[2], f"{row[3]:.10g}"])


def cmd_classify_zs(args) -> int:
    cfg = load_run_config(args.config, {"seed": args.seed})
    fm_path = Path(args.features)
    if not fm_path.exists():
        raise ValidationFailure(f"feature manifest not found: {fm_path}")
    try:
        fm = load_feature_manifest(fm_path)
    except (EmbeddingError, json.JSONDecodeError) as exc:
        raise ValidationFailure(str(exc)) from None
    if not fm.shapes:
        raise ValidationFailure("feature manifest lists no shapes")
    _validate_feature_files(fm, fm.shapes)
    labels, dirs = _load_label_dirs(fm)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for sid in sorted(fm.shapes):
        ranked = zeroshot_classify(fm.shapes[sid]["pretrained"],
                                   fm.shapes[sid]["finetuned"],
                                   dirs, labels, k=args.k)
        for rank, (label, logit) in enumerate(ranked, start=1):
            rows.append((sid, rank, label, logit))
    _write_predictions(rows, out_dir / "predictions.csv")
    write_run_stamp(out_dir, cfg, {"shapes": len(fm.shapes), "k": args.k})
    print(f"classified {len(fm.shapes)} shapes over {len(labels)} labels")
    return EXIT_OK


def cmd_classify_fs(args) -> int:
    cfg = load_run_config(args.config, {"seed": args.seed})
    fm_path = Path(args.features)
    support_path = Path(args.support)
    for p, what in ((fm_path, "feature manifest"), (support_path, "support file")):
        if not p.exists():
            raise ValidationFailure(f"{what} not found: {p}")
    try:
        fm = load_feature_manifest(fm_path)
    except (EmbeddingError, json.JSONDecodeError) as exc:
        raise ValidationFailure(str(exc)) from None
    support = json.loads(support_path.read_text())
    if not support:
        raise ValidationFailure("support set is empty")
    unknown = sorted(set(support) - set(fm.shapes))
    if unknown:
        raise ValidationFailure(f"support shape {unknown[0]!r} not in feature manifest")
    _validate_feature_files(fm, fm.shapes)

    class_names = sorted(set(support.values()))
    if len(class_names) < 2:
        raise ValidationFailure("support set needs at least 2 classes")
    class_idx = {c: i for i, c in enumerate(class_names)}

    def shape_rows(sid: str) -> np.ndarray:
        pre = normalize_rows(read_embeddings(fm.shapes[sid]["pretrained"]).data)
        ft = normalize_rows(read_embeddings(fm.shapes[sid]["finetuned"]).data)
        return np.vstack([pre, ft])

    xs, ys = [], []
    for sid in sorted(support):
        rows = shape_rows(sid)
        xs.append(rows)
        ys.extend([class_idx[support[sid]]] * rows.shape[0])
    probe_cfg = LogRegConfig(lr=args.lr, steps=args.steps,
                             l2_lambda=args.l2_lambda, seed=cfg.seed)
    try:
        model, _ = fit_logreg(np.vstack(xs), np.array(ys), probe_cfg)
    except InferenceError as exc:
        raise ValidationFailure(str(exc)) from None

    queries = sorted(set(fm.shapes) - set(support))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows_out = []
    for sid in queries:
        ranked = fewshot_classify(model, shape_rows(sid), class_names)[:args.k]
        for rank, (label, logit) in enumerate(ranked, start=1):
            rows_out.append((sid, rank, label, logit))
    _write_predictions(rows_out, out_dir / "predictions.csv")
    write_run_stamp(out_dir, cfg, {"support": len(support), "queries": len(queries)})
    print(f"probed {len(queries)} query shapes over {len(class_names)} classes")
    return EXIT_OK


def _pooled_unit_vector(path: Path) -> np.ndarray:
    rows = normalize_rows(read_embeddings(path).data)
    mean = rows.mean(axis=0)
    norm = np.linalg.norm(mean)
    if norm == 0.0:
        raise ValidationFailure(f"{path}: rows average to the zero vector")
    return mean / norm


def cmd_retrieve(args) -> int:
    cfg = load_run_config(args.config, {"seed": args.seed})
    index_path = Path(args.index)
    if not index_path.exists():
        raise ValidationFailure(f"index manifest not found: {index_path}")
    doc = json.loads(index_path.read_text())
    if not doc:
        raise ValidationFailure("index manifest is empty")
    base = index_path.parent
    missing = [p for p in doc.values() if not (base / p).exists()
               and not Path(p).is_absolute()]
    missing += [p for p in doc.values() if Path(p).is_absolute()
                and not Path(p).exists()]
    if missing:
        raise ValidationFailure("missing index files: " + ", ".join(sorted(missing)))
    if args.query_image is None and args.query_text is None:
        raise ValidationFailure("provide --query-image and/or --query-text")
    for q in (args.query_image, args.query_text):
        if q is not None and not Path(q).exists():
            raise ValidationFailure(f"query file not found: {q}")

    ids = sorted(doc)
    vectors = np.stack([
        _pooled_unit_vector(base / doc[i] if not Path(doc[i]).is_absolute()
                            else Path(doc[i])) for i in ids
    ])
    index = build_retrieval_index(ids, vectors)
    if args.query_image and args.query_text:
        query = (_pooled_unit_vector(Path(args.query_image)),
                 _pooled_unit_vector(Path(args.query_text)))
        qid = f"{Path(args.query_image).stem}+{Path(args.query_text).stem}"
    elif args.query_image:
        query = _pooled_unit_vector(Path(args.query_image))
        qid = Path(args.query_image).stem
    else:
        query = _pooled_unit_vector(Path(args.query_text))
        qid = Path(args.query_text).stem
    hits = knn_retrieve(index, query, k=min(args.k, index.size))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w") as fh:
        fh.write(json.dumps({"query_id": qid,
                             "hits": [{"id": i, "cosine": c} for i, c in hits]}) + "\n")
    print(f"retrieved top {len(hits)} of {index.size} for query {qid!r}")
    return EXIT_OK


def cmd_eval(args) -> int:
    pred_path = Path(args.predictions)
    truth_path = Path(args.truths)
    for p, what in ((pred_path, "predictions CSV"), (truth_path, "truths file")):
        if not p.exists():
            raise ValidationFailure(f"{what} not found: {p}")
    truths = json.loads(truth_path.read_text())
    ranked: dict[str, list[tuple[int, str]]] = {}
    with open(pred_path, newline="") as fh:
        for row in csv.DictReader(fh):
            sid = row["shape_id"]
            if sid not in truths:
                raise ValidationFailure(f"prediction for unknown shape_id {sid!r}")
            ranked.setdefault(sid, []).append((int(row["rank"]), row["label"]))
    missing = sorted(set(truths) - set(ranked))
    if missing:
        raise ValidationFailure(f"no predictions for shape_id {missing[0]!r}")
    shape_ids = sorted(truths)
    predictions = [[label for _, label in sorted(ranked[sid])] for sid in shape_ids]
    acc = topk_accuracy(predictions, [truths[sid] for sid in shape_ids], ks=(1, 3, 5))
    metrics = {"top1": acc[1], "top3": acc[3], "top5": acc[5],
               "n_shapes": len(shape_ids)}
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(metrics, indent=2) + "\n")
    print(json.dumps(metrics))
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="opendlign",
        description="Multi-view depth projection and zero-/few-shot 3D "
                    "classification over file-based encoder features.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("project", parents=[common],
                       help="render depth + control PNGs for every shape")
    p.add_argument("--dataset", required=True, help="dataset manifest JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=None,
                   help="view-level worker threads (or DLIGN_THREADS)")
    p.add_argument("--n-views", type=int, default=None, dest="n_views")
    p.add_argument("--elevation", type=float, default=None)
    p.add_argument("--max-points", type=int, default=None, dest="max_points")
    p.set_defaults(func=cmd_project)

    p = sub.add_parser("prompts", parents=[common],
                       help="render the 80 depth prompts per label to JSON")
    p.add_argument("--labels", required=True, help="text file, one label per line")
    p.add_argument("--out", required=True)
    p.add_argument("--templates", help="alternative template file")
    p.set_defaults(func=cmd_prompts)

    p = sub.add_parser("align", parents=[common], help="train the alignment head")
    p.add_argument("--align-manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--peak-lr", type=float, default=None, dest="peak_lr")
    p.add_argument("--weight-decay", type=float, default=None, dest="weight_decay")
    p.set_defaults(func=cmd_align)

    p = sub.add_parser("classify-zs", parents=[common],
                       help="zero-shot classification from a feature manifest")
    p.add_argument("--features", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=int, default=5)
    p.set_defaults(func=cmd_classify_zs)

    p = sub.add_parser("classify-fs", parents=[common],
                       help="few-shot linear probe classification")
    p.add_argument("--features", required=True)
    p.add_argument("--support", required=True,
                   help="JSON {shape_id: label} for the probe's training shapes")
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--l2-lambda", type=float, default=0.0, dest="l2_lambda")
    p.set_defaults(func=cmd_classify_fs)

    p = sub.add_parser("retrieve", parents=[common],
                       help="cosine k-NN retrieval over an embedding index")
    p.add_argument("--index", required=True, help="JSON {id: dlem path}")
    p.add_argument("--query-image", default=None, dest="query_image")
    p.add_argument("--query-text", default=None, dest="query_text")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--out", required=True, help="JSONL output path")
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("eval", parents=[common],
                       help="Top-1/3/5 accuracy from a predictions CSV")
    p.add_argument("--predictions", required=True)
    p.add_argument("--truths", required=True, help="JSON {shape_id: label}")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ValidationFailure as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
