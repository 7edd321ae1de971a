"""Zero-shot and few-shot classification plus cross-modal retrieval on
precomputed features.

Zero-shot scoring follows the dual-encoder recipe: the first half of a
shape's views is scored with pretrained-encoder features, the second half
with fine-tuned ones, and the per-view cosine logits are summed in view
order. Few-shot uses a multinomial logistic probe trained full-batch on
per-view features from both encoder states. All label/id ties break
lexicographically so outputs are deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .embedstore import read_embeddings, normalize_rows


class InferenceError(Exception):
    pass


@dataclass
class LogitMatrix:
    per_view: np.ndarray   # (N, M)
    aggregated: np.ndarray  # (M,)


@dataclass
class LogRegModel:
    weights: np.ndarray    # (M, d)
    bias: np.ndarray       # (M,)
    l2_lambda: float

    def __post_init__(self):
        if not (np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.bias))):
            raise InferenceError("probe parameters must be finite")
        if self.l2_lambda < 0:
            raise InferenceError("l2_lambda must be >= 0")

    @property
    def n_classes(self) -> int:
        return self.weights.shape[0]


@dataclass
class LogRegConfig:
    lr: float = 0.1
    steps: int = 500
    l2_lambda: float = 0.0
    seed: int = 0


@dataclass
class RetrievalIndex:
    ids: list[str]
    vectors: np.ndarray    # (n, d), unit rows

    def __post_init__(self):
        if len(self.ids) != self.vectors.shape[0]:
            raise InferenceError("one id per vector required")
        if len(set(self.ids)) != len(self.ids):
            raise InferenceError("index ids must be unique")
        norms = np.linalg.norm(self.vectors, axis=1)
        if np.abs(norms - 1.0).max() > 1e-5:
            raise InferenceError("index vectors must be unit norm")

    @property
    def size(self) -> int:
        return len(self.ids)


def build_retrieval_index(ids: list[str], vectors: np.ndarray) -> RetrievalIndex:
    return RetrievalIndex(ids=list(ids), vectors=normalize_rows(vectors))


# ---------------------------------------------------------------------------
# zero-shot
# ---------------------------------------------------------------------------

def aggregate_logits(views_pre: np.ndarray, views_ft: np.ndarray,
                     label_dirs: np.ndarray) -> LogitMatrix:
    """Per-view logit rows V_i . label_dirs^T, pretrained views first, then
    fine-tuned; the aggregate is the sum of the rows taken in view order.
    All inputs must be row-normalized (checked to 1e-4)."""
    views_pre = np.asarray(views_pre, dtype=np.float64)
    views_ft = np.asarray(views_ft, dtype=np.float64)
    label_dirs = np.asarray(label_dirs, dtype=np.float64)
    if views_pre.shape[0] == 0 and views_ft.shape[0] == 0:
        raise InferenceError("need at least one view")
    d = label_dirs.shape[1]
    for name, arr in (("views_pre", views_pre), ("views_ft", views_ft),
                      ("label_dirs", label_dirs)):
        if arr.shape[0] and arr.shape[1] != d:
            raise InferenceError(f"{name} has dim {arr.shape[1]}, expected {d}")
        if arr.shape[0]:
            norms = np.linalg.norm(arr, axis=1)
            if np.abs(norms - 1.0).max() > 1e-4:
                raise InferenceError(f"{name} rows are not unit-normalized")
    per_view = np.vstack([v @ label_dirs.T for v in (views_pre, views_ft)
                          if v.shape[0]])
    aggregated = np.zeros(label_dirs.shape[0])
    for row in per_view:  # fixed-order accumulation
        aggregated += row
    return LogitMatrix(per_view=per_view, aggregated=aggregated)


def rank_labels(scores: np.ndarray, labels: list[str]) -> list[tuple[str, float]]:
    """Sort labels by score, descending; equal scores order lexicographically."""
    if len(labels) != scores.shape[0]:
        raise InferenceError("one label per score required")
    order = sorted(range(len(labels)), key=lambda i: (-scores[i], labels[i]))
    return [(labels[i], float(scores[i])) for i in order]


def zeroshot_classify(pretrained_path: str | Path, finetuned_path: str | Path,
                      label_dirs: np.ndarray, labels: list[str],
                      k: int = 5) -> list[tuple[str, float]]:
    """Rank labels for one shape from its two encoder-state feature files.

    With N views per file, views 1..ceil(N/2) come from the pretrained file
    and the remainder from the fine-tuned file. Returns the top-k
    (label, aggregated logit) pairs.
    """
    feats = {}
    for tag, path in (("pretrained", pretrained_path), ("finetuned", finetuned_path)):
        path = Path(path)
        if not path.exists():
            raise InferenceError(f"missing {tag} feature file: {path}")
        feats[tag] = normalize_rows(read_embeddings(path).data)
    n = feats["pretrained"].shape[0]
    if feats["finetuned"].shape[0] != n:
        raise InferenceError("encoder files disagree on view count")
    half = (n + 1) // 2  # odd view counts give the pretrained encoder the extra view
    logits = aggregate_logits(feats["pretrained"][:half], feats["finetuned"][half:],
                              label_dirs)
    return rank_labels(logits.aggregated, labels)[:k]


# ---------------------------------------------------------------------------
# few-shot probe
# ---------------------------------------------------------------------------

def _softmax_rows(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def logreg_loss_grad(weights: np.ndarray, bias: np.ndarray, x: np.ndarray,
                     y: np.ndarray, l2_lambda: float):
    """Mean softmax cross-entropy plus (lambda/2)||W||^2, with gradients."""
    n = x.shape[0]
    probs = _softmax_rows(x @ weights.T + bias)
    loss = float(-np.log(probs[np.arange(n), y]).mean()
                 + 0.5 * l2_lambda * (weights * weights).sum())
    g = probs.copy()
    g[np.arange(n), y] -= 1.0
    g /= n
    return loss, g.T @ x + l2_lambda * weights, g.sum(axis=0)


def fit_logreg(features: np.ndarray, labels: np.ndarray,
               cfg: LogRegConfig) -> tuple[LogRegModel, list[float]]:
    """Full-batch gradient descent on the multinomial probe. Zero-initialized
    (the objective is convex), so the result is deterministic. Returns the
    model and the per-step loss curve."""
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if x.ndim != 2 or y.shape != (x.shape[0],):
        raise InferenceError("features must be (n, d) with one integer label per row")
    m = int(y.max()) + 1 if y.size else 0
    if m < 2:
        raise InferenceError("need at least 2 classes")
    if x.shape[0] < m:
        raise InferenceError("need at least one sample per class")
    present = np.unique(y)
    missing = sorted(set(range(m)) - set(present.tolist()))
    if missing:
        raise InferenceError(f"class {missing[0]} absent from the support set")
    w = np.zeros((m, x.shape[1]))
    b = np.zeros(m)
    losses = []
    for _ in range(cfg.steps):
        loss, dw, db = logreg_loss_grad(w, b, x, y, cfg.l2_lambda)
        losses.append(loss)
        w -= cfg.lr * dw
        b -= cfg.lr * db
    return LogRegModel(weights=w, bias=b, l2_lambda=cfg.l2_lambda), losses


def fewshot_classify(model: LogRegModel, view_features: np.ndarray,
                     class_names: list[str]) -> list[tuple[str, float]]:
    """Sum the probe logits W v + b over all of a shape's view rows (both
    encoder states stacked by the caller) and rank the classes."""
    x = np.asarray(view_features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.weights.shape[1]:
        raise InferenceError(
            f"view features must be (K, {model.weights.shape[1]})")
    if len(class_names) != model.n_classes:
        raise InferenceError("one class name per probe row required")
    total = np.zeros(model.n_classes)
    for v in x:
        total += model.weights @ v + model.bias
    return rank_labels(total, class_names)


# ---------------------------------------------------------------------------
# retrieval and metrics
# ---------------------------------------------------------------------------

def knn_retrieve(index: RetrievalIndex, query, k: int) -> list[tuple[str, float]]:
    """Top-k cosine neighbors. A (q1, q2) query pair is averaged and then
    L2-normalized before scoring, so an image and a text embedding can be
    blended into one query."""
    if not 1 <= k <= index.size:
        raise InferenceError(f"k must lie in [1, {index.size}]")
    if isinstance(query, (tuple, list)) and len(query) == 2:
        q = (np.asarray(query[0], dtype=np.float64)
             + np.asarray(query[1], dtype=np.float64)) / 2.0
    else:
        q = np.asarray(query, dtype=np.float64)
    if q.ndim != 1 or not np.all(np.isfinite(q)):
        raise InferenceError("query must be a finite vector")
    norm = np.linalg.norm(q)
    if norm == 0.0:
        raise InferenceError("query vector is zero")
    q = q / norm
    scores = index.vectors @ q
    order = sorted(range(index.size), key=lambda i: (-scores[i], index.ids[i]))
    return [(index.ids[i], float(scores[i])) for i in order[:k]]


def topk_accuracy(predictions: list[list[str]], truths: list[str],
                  ks: tuple[int, ...] = (1, 3, 5)) -> dict[int, float]:
    """Fraction of shapes whose true label appears in the first k ranked
    predictions, per k."""
    if len(predictions) != len(truths):
        raise InferenceError(
            f"{len(predictions)} prediction lists vs {len(truths)} truths")
    if not predictions:
        raise InferenceError("empty evaluation set")
    out = {}
    for k in ks:
        hits = sum(1 for ranked, truth in zip(predictions, truths)
                   if truth in ranked[:k])
        out[k] = hits / len(truths)
    return out
