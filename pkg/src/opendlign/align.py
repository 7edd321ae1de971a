"""Trainable residual attention head and its composite alignment loss.

The head runs single-head scaled dot-product self-attention over precomputed
token features, adds the mean attention output to the frozen pooled feature,
and L2-normalizes the sum. Training minimizes a symmetric InfoNCE term over
the similarity matrix between head outputs and pooled image features
(temperature-scaled, positives on the diagonal) plus the Euclidean distance
between each positive pair. Gradients are fully analytic and validated by a
central-finite-difference checker.
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .embedstore import read_embeddings

DIST_EPS = 1e-12            # under the square root of the distance term
LOG_INV_TAU_MIN = 0.0       # 1/tau in [1, 100] <=> tau in [0.01, 1]
LOG_INV_TAU_MAX = math.log(100.0)
INIT_INV_TAU = 14.3
CHECKPOINT_MAGIC = b"DLHD"
CHECKPOINT_VERSION = 1


class AlignError(Exception):
    pass


@dataclass
class AlignHead:
    """Attention projections plus the learnable temperature, parameterized as
    the (clamped) log of 1/tau."""

    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray
    log_inv_tau: float = math.log(INIT_INV_TAU)

    def __post_init__(self):
        d = self.w_q.shape[0]
        for name in ("w_q", "w_k", "w_v", "w_o"):
            m = np.asarray(getattr(self, name), dtype=np.float64)
            if m.shape != (d, d):
                raise AlignError(f"{name} must be ({d}, {d}), got {m.shape}")
            if not np.all(np.isfinite(m)):
                raise AlignError(f"{name} contains non-finite values")
            setattr(self, name, m)
        if not np.isfinite(self.log_inv_tau):
            raise AlignError("log_inv_tau must be finite")

    @property
    def dim(self) -> int:
        return self.w_q.shape[0]

    @property
    def tau(self) -> float:
        return 1.0 / math.exp(self.log_inv_tau)

    def clamp_temperature(self) -> None:
        self.log_inv_tau = min(max(self.log_inv_tau, LOG_INV_TAU_MIN), LOG_INV_TAU_MAX)

    @classmethod
    def zeros(cls, d: int) -> "AlignHead":
        z = np.zeros((d, d))
        return cls(w_q=z.copy(), w_k=z.copy(), w_v=z.copy(), w_o=z.copy())

    @classmethod
    def random_init(cls, d: int, seed: int, scale: float = 0.02) -> "AlignHead":
        rng = np.random.default_rng(seed)
        return cls(w_q=rng.normal(0.0, scale, (d, d)),
                   w_k=rng.normal(0.0, scale, (d, d)),
                   w_v=rng.normal(0.0, scale, (d, d)),
                   w_o=rng.normal(0.0, scale, (d, d)))

    def copy(self) -> "AlignHead":
        return AlignHead(w_q=self.w_q.copy(), w_k=self.w_k.copy(),
                         w_v=self.w_v.copy(), w_o=self.w_o.copy(),
                         log_inv_tau=self.log_inv_tau)


@dataclass
class HeadGrads:
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray
    log_inv_tau: float


@dataclass
class AlignBatch:
    """Row i of each field belongs to the same shape (positives pair by
    index): per-shape token features (b, T, d), frozen pooled depth features
    (b, d), and pooled image features (b, d)."""

    depth_tokens: np.ndarray
    depth_frozen: np.ndarray
    image_pooled: np.ndarray

    def __post_init__(self):
        self.depth_tokens = np.asarray(self.depth_tokens, dtype=np.float64)
        self.depth_frozen = np.asarray(self.depth_frozen, dtype=np.float64)
        self.image_pooled = np.asarray(self.image_pooled, dtype=np.float64)
        if self.depth_tokens.ndim != 3:
            raise AlignError("depth_tokens must be (b, T, d)")
        b, _, d = self.depth_tokens.shape
        if b < 2:
            raise AlignError("contrastive batch needs at least 2 rows")
        if self.depth_frozen.shape != (b, d) or self.image_pooled.shape != (b, d):
            raise AlignError("field shapes disagree")
        for name in ("depth_tokens", "depth_frozen", "image_pooled"):
            arr = getattr(self, name)
            if not np.all(np.isfinite(arr)):
                bad = np.nonzero(~np.isfinite(arr).reshape(b, -1).all(axis=1))[0]
                raise AlignError(f"{name} row {int(bad[0])} contains NaN/Inf")

    @property
    def size(self) -> int:
        return self.depth_tokens.shape[0]


@dataclass
class TrainConfig:
    peak_lr: float = 3e-4
    batch: int = 128
    epochs: int = 10
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    pct_start: float = 0.3
    div_factor: float = 25.0
    final_div_factor: float = 1e4
    seed: int = 0

    def __post_init__(self):
        if self.peak_lr <= 0:
            raise ValueError("peak_lr must be positive")
        if not 0.0 < self.pct_start < 1.0:
            raise ValueError("pct_start must lie in (0, 1)")
        if self.batch < 2:
            raise ValueError("batch must be >= 2")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


# ---------------------------------------------------------------------------
# forward / loss / gradients
# ---------------------------------------------------------------------------

def _softmax_rows(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _forward_sample(head: AlignHead, tokens: np.ndarray, frozen: np.ndarray):
    """Attention + residual + normalize for one sample; returns the unit
    output and the intermediates needed for the backward pass."""
    x = np.asarray(tokens, dtype=np.float64)
    f = np.asarray(frozen, dtype=np.float64)
    d = head.dim
    q = x @ head.w_q
    k = x @ head.w_k
    v = x @ head.w_v
    z = (q @ k.T) / math.sqrt(d)
    a = _softmax_rows(z)
    c = v @ head.w_o
    y = a @ c
    m = y.mean(axis=0)
    u = f + m
    nu = np.linalg.norm(u)
    if nu == 0.0:
        raise AlignError("residual output is the zero vector; cannot normalize")
    h = u / nu
    cache = (x, q, k, v, a, c, u, nu, h)
    return h, cache


def head_forward(head: AlignHead, tokens: np.ndarray, frozen: np.ndarray) -> np.ndarray:
    """h = normalize(frozen + mean(softmax(Q K^T / sqrt(d)) V W_O)).

    For a single token the softmax collapses to 1, leaving
    normalize(frozen + x W_V W_O), which is independent of W_Q and W_K but
    still trainable through W_V and W_O.
    """
    if tokens.ndim != 2 or tokens.shape[0] < 1:
        raise AlignError("tokens must be (T, d) with T >= 1")
    h, _ = _forward_sample(head, tokens, frozen)
    return h


def _backward_sample(head: AlignHead, cache, dh: np.ndarray, grads: HeadGrads) -> None:
    x, q, k, v, a, c, u, nu, h = cache
    t, d = x.shape
    du = (dh - (dh @ h) * h) / nu
    dy = np.tile(du / t, (t, 1))
    dc = a.T @ dy
    da = dy @ c.T
    grads.w_o += v.T @ dc
    dv = dc @ head.w_o.T
    # softmax backward, row-wise
    dz = a * (da - (da * a).sum(axis=1, keepdims=True))
    scale = 1.0 / math.sqrt(d)
    dq = dz @ k * scale
    dk = dz.T @ q * scale
    grads.w_q += x.T @ dq
    grads.w_k += x.T @ dk
    grads.w_v += x.T @ dv


@dataclass
class LossResult:
    total: float
    contrastive: float
    distance: float
    grads: HeadGrads


def composite_loss(head: AlignHead, batch: AlignBatch) -> LossResult:
    """Loss and analytic gradients over one batch.

    Contrastive part: with S[i, j] = (h_i . p_j) / tau, sum over i of
    -1/2 log row-softmax(S)[i, i] - 1/2 log column-softmax(S)[i, i]
    (softmaxes computed with max subtraction). Distance part: sum over i of
    sqrt(||h_i - p_i||^2 + 1e-12), taken as exactly 0 for bitwise-equal
    pairs; the epsilon removes the gradient singularity at zero distance.
    """
    b = batch.size
    d = batch.depth_frozen.shape[1]
    hs = np.empty((b, d))
    caches = []
    for i in range(b):
        try:
            h, cache = _forward_sample(head, batch.depth_tokens[i], batch.depth_frozen[i])
        except AlignError as exc:
            raise AlignError(f"row {i}: {exc}") from None
        if not np.all(np.isfinite(h)):
            raise AlignError(f"row {i}: non-finite head output")
        hs[i] = h
        caches.append(cache)

    p = batch.image_pooled
    inv_tau = math.exp(head.log_inv_tau)
    g = hs @ p.T
    s = g * inv_tau
    r = _softmax_rows(s)
    csm = _softmax_rows(s.T).T  # column softmax of s
    diag = np.arange(b)
    l_cont = float(-0.5 * (np.log(r[diag, diag]).sum() + np.log(csm[diag, diag]).sum()))

    delta = hs - p
    q2 = (delta * delta).sum(axis=1)
    dist = np.where(q2 > 0.0, np.sqrt(q2 + DIST_EPS), 0.0)
    l_dist = float(dist.sum())

    # backward
    eye = np.eye(b)
    ds = 0.5 * (r - eye) + 0.5 * (csm - eye)
    d_log_inv_tau = float((ds * s).sum())
    dhs = ds @ p * inv_tau
    dhs += delta / np.sqrt(q2 + DIST_EPS)[:, None]

    grads = HeadGrads(w_q=np.zeros((d, d)), w_k=np.zeros((d, d)),
                      w_v=np.zeros((d, d)), w_o=np.zeros((d, d)),
                      log_inv_tau=d_log_inv_tau)
    for i in range(b):
        _backward_sample(head, caches[i], dhs[i], grads)
    return LossResult(total=l_cont + l_dist, contrastive=l_cont,
                      distance=l_dist, grads=grads)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def _param_views(head: AlignHead) -> list[np.ndarray]:
    return [head.w_q, head.w_k, head.w_v, head.w_o]


def grad_check(head: AlignHead, batch: AlignBatch, h: float = 1e-5,
               max_coords: int = 200, seed: int = 0) -> float:
    """Max relative error between analytic gradients and central finite
    differences, |a - f| / max(|a|, |f|, 1e-8). All coordinates are checked
    for d <= 16; larger heads check a seeded random subset of at least
    `max_coords` coordinates (the temperature is always included)."""
    if h <= 0:
        raise ValueError("step must be positive")
    res = composite_loss(head, batch)
    analytic = np.concatenate([g.ravel() for g in
                               (res.grads.w_q, res.grads.w_k, res.grads.w_v, res.grads.w_o)]
                              + [[res.grads.log_inv_tau]])
    d = head.dim
    n_coords = 4 * d * d + 1
    if d <= 16 or n_coords <= max_coords:
        coords = np.arange(n_coords)
    else:
        rng = np.random.default_rng(seed)
        coords = rng.choice(n_coords - 1, size=max(max_coords, 200), replace=False)
        coords = np.append(coords, n_coords - 1)

    work = head.copy()
    views = _param_views(work)
    flat_sizes = [v.size for v in views]
    offsets = np.cumsum([0] + flat_sizes)

    def loss_at(coord: int, delta: float) -> float:
        if coord == n_coords - 1:
            old = work.log_inv_tau
            work.log_inv_tau = old + delta
            val = composite_loss(work, batch).total
            work.log_inv_tau = old
            return val
        for vi, v in enumerate(views):
            if offsets[vi] <= coord < offsets[vi + 1]:
                flat = v.ravel()
                local = coord - offsets[vi]
                old = flat[local]
                flat[local] = old + delta
                val = composite_loss(work, batch).total
                flat[local] = old
                return val
        raise IndexError(coord)

    max_rel = 0.0
    for coord in coords:
        fd = (loss_at(int(coord), h) - loss_at(int(coord), -h)) / (2.0 * h)
        a = analytic[int(coord)]
        rel = abs(a - fd) / max(abs(a), abs(fd), 1e-8)
        max_rel = max(max_rel, rel)
    return max_rel


# ---------------------------------------------------------------------------
# optimizer and schedule
# ---------------------------------------------------------------------------

@dataclass
class AdamWState:
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: list[np.ndarray]) -> "AdamWState":
        return cls(step=0, m=[np.zeros_like(p) for p in params],
                   v=[np.zeros_like(p) for p in params])


def adamw_step(params: list[np.ndarray], grads: list[np.ndarray],
               state: AdamWState, lr: float, cfg: TrainConfig) -> None:
    """One decoupled-weight-decay Adam update, in place: parameters first
    shrink by (1 - lr*wd), then move by the bias-corrected moment ratio."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params/grads/state length mismatch")
    state.step += 1
    t = state.step
    bc1 = 1.0 - cfg.beta1 ** t
    bc2 = 1.0 - cfg.beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ValueError("parameter/gradient shape mismatch")
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * (g * g)
        p *= 1.0 - lr * cfg.weight_decay
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)


def onecycle_lr(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Cosine one-cycle schedule.

    Closed form: knee = clamp(round(pct_start * total_steps), 1, total-1);
    for step <= knee, lr anneals from peak/div_factor up to peak with
    lr = end + (start-end) * (1 + cos(pi * step/knee)) / 2; past the knee it
    anneals from peak down to peak/final_div_factor with the same cosine over
    (step-knee)/(total-1-knee).
    """
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps})")
    initial = cfg.peak_lr / cfg.div_factor
    final = cfg.peak_lr / cfg.final_div_factor
    if total_steps == 1:
        return cfg.peak_lr
    knee = min(max(1, round(cfg.pct_start * total_steps)), total_steps - 1)
    if step <= knee:
        pct = step / knee
        start, end = initial, cfg.peak_lr
    else:
        pct = (step - knee) / (total_steps - 1 - knee)
        start, end = cfg.peak_lr, final
    return end + (start - end) * (1.0 + math.cos(math.pi * pct)) / 2.0


# ---------------------------------------------------------------------------
# checkpoint and loss-curve formats
# ---------------------------------------------------------------------------

def save_checkpoint(head: AlignHead, path: str | Path) -> None:
    """Binary head checkpoint: magic, u32 version, u32 d, the four projection
    matrices row-major float64 little-endian, then log_inv_tau."""
    d = head.dim
    blob = bytearray()
    blob += CHECKPOINT_MAGIC
    blob += struct.pack("<II", CHECKPOINT_VERSION, d)
    for m in (head.w_q, head.w_k, head.w_v, head.w_o):
        blob += m.astype("<f8").tobytes(order="C")
    blob += struct.pack("<d", head.log_inv_tau)
    Path(path).write_bytes(bytes(blob))


def load_checkpoint(path: str | Path) -> AlignHead:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise AlignError(f"{path}: bad checkpoint magic {raw[:4]!r}")
    version, d = struct.unpack_from("<II", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise AlignError(f"{path}: checkpoint version {version}")
    need = 12 + 4 * d * d * 8 + 8
    if len(raw) != need:
        raise AlignError(f"{path}: checkpoint is {len(raw)} bytes, expected {need}")
    mats = []
    off = 12
    for _ in range(4):
        mats.append(np.frombuffer(raw, dtype="<f8", count=d * d, offset=off)
                    .reshape(d, d).copy())
        off += d * d * 8
    (log_inv_tau,) = struct.unpack_from("<d", raw, off)
    return AlignHead(w_q=mats[0], w_k=mats[1], w_v=mats[2], w_o=mats[3],
                     log_inv_tau=log_inv_tau)


def write_loss_curve(rows: list[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["step", "lr", "loss_cont",
                                                "loss_dist", "loss_total"])
        writer.writeheader()
        writer.writerows(rows)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class AlignDataset:
    """Precached training triples, row-aligned across fields."""

    shape_ids: list[str]
    depth_tokens: np.ndarray   # (n, T, d)
    depth_frozen: np.ndarray   # (n, d)
    image_pooled: np.ndarray   # (n, d)

    @property
    def size(self) -> int:
        return len(self.shape_ids)

    @property
    def dim(self) -> int:
        return self.depth_frozen.shape[1]


def load_align_dataset(manifest_path: str | Path) -> AlignDataset:
    """Load an alignment manifest: JSON {"shapes": {id: {"depth_tokens": p,
    "depth_frozen": p, "image_pooled": p}}} with paths relative to the
    manifest file. All referenced files are validated before any are read."""
    import json

    manifest_path = Path(manifest_path)
    doc = json.loads(manifest_path.read_text())
    shapes = doc.get("shapes")
    if not shapes:
        raise AlignError(f"{manifest_path}: no shapes in alignment manifest")
    base = manifest_path.parent

    def resolve(p: str) -> Path:
        q = Path(p)
        return q if q.is_absolute() else base / q

    records = []
    missing = []
    for sid in sorted(shapes):
        rec = shapes[sid]
        paths = {}
        for key in ("depth_tokens", "depth_frozen", "image_pooled"):
            if key not in rec:
                raise AlignError(f"{manifest_path}: shape {sid!r} lacks {key!r}")
            paths[key] = resolve(rec[key])
            if not paths[key].exists():
                missing.append(str(paths[key]))
        records.append((sid, paths))
    if missing:
        raise AlignError("missing embedding files: " + ", ".join(missing))

    ids, tokens, frozen, pooled = [], [], [], []
    for sid, paths in records:
        tok = read_embeddings(paths["depth_tokens"]).data
        fro = read_embeddings(paths["depth_frozen"]).data
        img = read_embeddings(paths["image_pooled"]).data
        if fro.shape[0] != 1 or img.shape[0] != 1:
            raise AlignError(f"shape {sid!r}: frozen/pooled files must hold one row")
        if tok.shape[1] != fro.shape[1] or fro.shape[1] != img.shape[1]:
            raise AlignError(f"shape {sid!r}: dimension mismatch across files")
        ids.append(sid)
        tokens.append(tok)
        frozen.append(fro[0])
        pooled.append(img[0])
    t0 = tokens[0].shape
    for sid, tok in zip(ids, tokens):
        if tok.shape != t0:
            raise AlignError(f"shape {sid!r}: token shape {tok.shape} != {t0}")
    return AlignDataset(shape_ids=ids, depth_tokens=np.stack(tokens),
                        depth_frozen=np.stack(frozen), image_pooled=np.stack(pooled))


def train_align(dataset: AlignDataset, cfg: TrainConfig):
    """Deterministic AdamW + one-cycle training of the head on precached
    features. Returns (head, loss-curve rows); epochs=0 returns the seeded
    initialization untouched."""
    head = AlignHead.random_init(dataset.dim, cfg.seed)
    curve: list[dict] = []
    if cfg.epochs == 0:
        return head, curve

    n = dataset.size
    if n < 2:
        raise AlignError("training needs at least 2 shapes")
    rng = np.random.default_rng(cfg.seed)
    batch_starts = list(range(0, n, cfg.batch))

    def batch_count() -> int:
        count = 0
        for s in batch_starts:
            if min(n, s + cfg.batch) - s >= 2:
                count += 1
        return count

    steps_per_epoch = batch_count()
    if steps_per_epoch == 0:
        raise AlignError("no usable batches (every batch has fewer than 2 rows)")
    total_steps = cfg.epochs * steps_per_epoch

    lit = np.array([head.log_inv_tau])
    params = [head.w_q, head.w_k, head.w_v, head.w_o, lit]
    state = AdamWState.for_params(params)
    step = 0
    for _ in range(cfg.epochs):
        perm = rng.permutation(n)
        for s in batch_starts:
            idx = perm[s:s + cfg.batch]
            if idx.size < 2:
                continue  # a 1-row tail cannot form a contrastive batch
            batch = AlignBatch(depth_tokens=dataset.depth_tokens[idx],
                               depth_frozen=dataset.depth_frozen[idx],
                               image_pooled=dataset.image_pooled[idx])
            head.log_inv_tau = float(lit[0])
            res = composite_loss(head, batch)
            lr = onecycle_lr(step, total_steps, cfg)
            grads = [res.grads.w_q, res.grads.w_k, res.grads.w_v, res.grads.w_o,
                     np.array([res.grads.log_inv_tau])]
            adamw_step(params, grads, state, lr, cfg)
            lit[0] = min(max(lit[0], LOG_INV_TAU_MIN), LOG_INV_TAU_MAX)
            curve.append({"step": step, "lr": lr, "loss_cont": res.contrastive,
                          "loss_dist": res.distance, "loss_total": res.total})
            step += 1
    head.log_inv_tau = float(lit[0])
    return head, curve
