import csv
import math

import numpy as np
import pytest

from opendlign import align
from opendlign.align import (AdamWState, AlignBatch, AlignDataset, AlignError,
                             AlignHead, TrainConfig, adamw_step,
                             composite_loss, grad_check, head_forward,
                             load_align_dataset, load_checkpoint, onecycle_lr,
                             save_checkpoint, train_align, write_loss_curve)
from opendlign.embedstore import EmbeddingMatrix, normalize_rows, write_embeddings


def unit(d, axis):
    e = np.zeros(d)
    e[axis] = 1.0
    return e


def random_batch(rng, b, t, d):
    return AlignBatch(depth_tokens=rng.normal(size=(b, t, d)),
                      depth_frozen=normalize_rows(rng.normal(size=(b, d))),
                      image_pooled=normalize_rows(rng.normal(size=(b, d))))


def forward_oracle(head, tokens, frozen):
    """Scalar re-implementation of the head forward pass."""
    t, d = tokens.shape
    q = tokens @ head.w_q
    k = tokens @ head.w_k
    v = tokens @ head.w_v
    scores = np.zeros((t, t))
    for i in range(t):
        for j in range(t):
            scores[i, j] = sum(q[i, a] * k[j, a] for a in range(d)) / math.sqrt(d)
    attn = np.zeros((t, t))
    for i in range(t):
        exps = [math.exp(s - max(scores[i])) for s in scores[i]]
        attn[i] = [e / sum(exps) for e in exps]
    y = attn @ (v @ head.w_o)
    u = frozen + y.mean(axis=0)
    return u / math.sqrt(sum(x * x for x in u))


class TestHeadForward:
    def test_zero_weights_residual_identity(self):
        d = 6
        head = AlignHead.zeros(d)
        frozen = np.arange(1.0, d + 1)
        out = head_forward(head, np.ones((3, d)), frozen)
        assert np.allclose(out, frozen / np.linalg.norm(frozen), atol=1e-15)

    def test_single_token_ignores_query_key(self):
        rng = np.random.default_rng(0)
        d = 5
        base = AlignHead.random_init(d, 1)
        x = rng.normal(size=(1, d))
        frozen = rng.normal(size=d)
        out1 = head_forward(base, x, frozen)
        base.w_q = rng.normal(size=(d, d))
        base.w_k = rng.normal(size=(d, d))
        out2 = head_forward(base, x, frozen)
        assert np.array_equal(out1, out2)
        expected = frozen + (x[0] @ base.w_v @ base.w_o)
        expected /= np.linalg.norm(expected)
        assert np.allclose(out2, expected, atol=1e-12)

    def test_matches_scalar_oracle(self):
        rng = np.random.default_rng(2)
        head = AlignHead.random_init(8, 3, scale=0.5)
        tokens = rng.normal(size=(4, 8))
        frozen = rng.normal(size=8)
        out = head_forward(head, tokens, frozen)
        assert np.abs(out - forward_oracle(head, tokens, frozen)).max() < 1e-9

    def test_output_unit_norm(self):
        rng = np.random.default_rng(4)
        head = AlignHead.random_init(8, 5)
        for _ in range(10):
            out = head_forward(head, rng.normal(size=(3, 8)), rng.normal(size=8))
            assert abs(np.linalg.norm(out) - 1.0) < 1e-7

    def test_zero_residual_is_error(self):
        head = AlignHead.zeros(4)
        with pytest.raises(AlignError, match="zero vector"):
            head_forward(head, np.zeros((2, 4)), np.zeros(4))


class TestCompositeLoss:
    def test_orthogonal_identical_pairs_closed_form(self):
        d = 4
        head = AlignHead.zeros(d)
        head.log_inv_tau = 0.0  # tau = 1
        batch = AlignBatch(depth_tokens=np.zeros((2, 1, d)),
                           depth_frozen=np.stack([unit(d, 0), unit(d, 1)]),
                           image_pooled=np.stack([unit(d, 0), unit(d, 1)]))
        res = composite_loss(head, batch)
        expected = 2.0 * (-math.log(math.e / (math.e + 1.0)))
        assert abs(res.contrastive - expected) < 1e-9
        assert res.distance == 0.0

    def test_uniform_similarities_give_b_log_b(self):
        # identical positives and negatives: softmax is uniform at any tau
        d, b = 6, 4
        head = AlignHead.zeros(d)
        head.log_inv_tau = math.log(14.3)
        batch = AlignBatch(depth_tokens=np.zeros((b, 1, d)),
                           depth_frozen=np.tile(unit(d, 2), (b, 1)),
                           image_pooled=np.tile(unit(d, 2), (b, 1)))
        res = composite_loss(head, batch)
        assert abs(res.contrastive - b * math.log(b)) < 1e-9

    def test_distance_zero_for_matching_pairs(self):
        # exact zero needs bitwise-equal pairs: basis vectors renormalize to
        # themselves because their norm is exactly 1.0
        d = 8
        head = AlignHead.zeros(d)
        frozen = np.stack([unit(d, 0), unit(d, 3), unit(d, 5)])
        batch = AlignBatch(depth_tokens=np.zeros((3, 2, d)),
                           depth_frozen=frozen, image_pooled=frozen.copy())
        assert composite_loss(head, batch).distance == 0.0

    def test_contrastive_nonnegative(self):
        rng = np.random.default_rng(6)
        head = AlignHead.random_init(8, 7)
        res = composite_loss(head, random_batch(rng, 5, 2, 8))
        assert res.contrastive >= 0.0

    def test_invariant_under_row_permutation(self):
        rng = np.random.default_rng(8)
        head = AlignHead.random_init(8, 9)
        batch = random_batch(rng, 6, 3, 8)
        perm = rng.permutation(6)
        permuted = AlignBatch(depth_tokens=batch.depth_tokens[perm],
                              depth_frozen=batch.depth_frozen[perm],
                              image_pooled=batch.image_pooled[perm])
        a = composite_loss(head, batch)
        b = composite_loss(head, permuted)
        assert abs(a.total - b.total) < 1e-9

    def test_batch_of_one_rejected(self):
        with pytest.raises(AlignError, match="at least 2"):
            AlignBatch(depth_tokens=np.zeros((1, 1, 4)),
                       depth_frozen=np.ones((1, 4)), image_pooled=np.ones((1, 4)))

    def test_nan_row_named(self):
        tokens = np.zeros((2, 1, 4))
        frozen = np.ones((2, 4))
        frozen[1, 2] = np.nan
        with pytest.raises(AlignError, match="row 1"):
            AlignBatch(depth_tokens=tokens, depth_frozen=frozen,
                       image_pooled=np.ones((2, 4)))


class TestGradCheck:
    def test_grid_of_shapes(self):
        for t in (1, 4):
            for b in (2, 8):
                rng = np.random.default_rng(100 + t * 10 + b)
                head = AlignHead.random_init(8, t + b, scale=0.3)
                err = grad_check(head, random_batch(rng, b, t, 8), h=1e-5)
                assert err < 1e-4, f"T={t} b={b}: {err}"

    def test_zero_gradient_coordinate_under_single_token(self):
        # with one token the attention softmax is constant, so W_Q gets no
        # gradient; finite differences must agree
        rng = np.random.default_rng(11)
        head = AlignHead.random_init(6, 12)
        batch = random_batch(rng, 3, 1, 6)
        res = composite_loss(head, batch)
        assert np.abs(res.grads.w_q).max() < 1e-12
        assert np.abs(res.grads.w_k).max() < 1e-12
        work = head.copy()
        h = 1e-5
        flat = work.w_q.ravel()
        old = flat[0]
        flat[0] = old + h
        up = composite_loss(work, batch).total
        flat[0] = old - h
        down = composite_loss(work, batch).total
        assert abs((up - down) / (2 * h)) < 1e-8

    def test_step_size_robustness(self):
        rng = np.random.default_rng(12)
        head = AlignHead.random_init(8, 13, scale=0.3)
        batch = random_batch(rng, 4, 2, 8)
        for h in (1e-6, 1e-5):
            assert grad_check(head, batch, h=h) < 1e-4

    def test_subset_mode_for_large_heads(self):
        rng = np.random.default_rng(13)
        head = AlignHead.random_init(20, 14, scale=0.2)
        batch = random_batch(rng, 2, 1, 20)
        assert grad_check(head, batch, h=1e-5, max_coords=200) < 1e-4


class TestOneCycle:
    CFG = TrainConfig(peak_lr=3e-4, pct_start=0.3, div_factor=25.0,
                      final_div_factor=1e4)

    def test_start_at_initial(self):
        assert abs(onecycle_lr(0, 100, self.CFG) - 3e-4 / 25) < 1e-9 * 3e-4

    def test_peak_at_knee(self):
        knee = round(0.3 * 100)
        assert onecycle_lr(knee, 100, self.CFG) == pytest.approx(3e-4, abs=1e-18)

    def test_final_at_last_step(self):
        assert abs(onecycle_lr(99, 100, self.CFG) - 3e-4 / 1e4) < 1e-9

    def test_rises_then_falls(self):
        lrs = [onecycle_lr(s, 50, self.CFG) for s in range(50)]
        knee = round(0.3 * 50)
        assert all(b > a for a, b in zip(lrs[:knee], lrs[1:knee + 1]))
        assert all(b < a for a, b in zip(lrs[knee:], lrs[knee + 1:]))

    def test_bounds_checked(self):
        with pytest.raises(ValueError):
            onecycle_lr(100, 100, self.CFG)


class TestAdamW:
    def test_zero_grads_zero_decay_is_noop(self):
        cfg = TrainConfig(weight_decay=0.0)
        p = [np.array([1.0, -2.0])]
        state = AdamWState.for_params(p)
        adamw_step(p, [np.zeros(2)], state, lr=0.1, cfg=cfg)
        assert np.array_equal(p[0], [1.0, -2.0])

    def test_single_step_hand_value(self):
        # m_hat = v_hat = 1 after one unit-gradient step, so the update is
        # lr/(1+eps) on top of the decoupled decay
        cfg = TrainConfig(weight_decay=0.01)
        p = [np.array([1.0])]
        state = AdamWState.for_params(p)
        adamw_step(p, [np.array([1.0])], state, lr=0.1, cfg=cfg)
        expected = 1.0 * (1 - 0.1 * 0.01) - 0.1 * (1.0 / (1.0 + cfg.eps))
        assert p[0][0] == pytest.approx(expected, abs=1e-12)
        assert p[0][0] == pytest.approx(0.9 - 0.1 * 0.01, abs=1e-8)

    def test_pure_decay_with_zero_grads(self):
        cfg = TrainConfig(weight_decay=0.5)
        p = [np.array([2.0])]
        state = AdamWState.for_params(p)
        for _ in range(3):
            adamw_step(p, [np.zeros(1)], state, lr=0.1, cfg=cfg)
        assert p[0][0] == pytest.approx(2.0 * (1 - 0.1 * 0.5) ** 3, abs=1e-12)


def make_identity_dataset(n=64, d=16, t=4, seed=0):
    rng = np.random.default_rng(seed)
    frozen = normalize_rows(rng.normal(size=(n, d)))
    return AlignDataset(shape_ids=[f"s{i}" for i in range(n)],
                        depth_tokens=0.1 * rng.normal(size=(n, t, d)),
                        depth_frozen=frozen, image_pooled=frozen.copy())


class TestTrainer:
    def test_fullbatch_loss_decreases_monotonically(self):
        # targets are reachable by the residual identity, so full-batch
        # steps at lr 1e-3 must strictly shrink the loss
        ds = make_identity_dataset(n=64)
        cfg = TrainConfig(peak_lr=1e-3, batch=64, epochs=8, seed=0)
        _, curve = train_align(ds, cfg)
        losses = [r["loss_total"] for r in curve]
        assert len(losses) == 8
        assert all(b < a for a, b in zip(losses, losses[1:]))

    def test_same_seed_identical_runs(self):
        ds = make_identity_dataset(n=32)
        cfg = TrainConfig(peak_lr=1e-3, batch=8, epochs=2, seed=5)
        h1, c1 = train_align(ds, cfg)
        h2, c2 = train_align(ds, cfg)
        assert [r["loss_total"] for r in c1] == [r["loss_total"] for r in c2]
        for name in ("w_q", "w_k", "w_v", "w_o"):
            assert np.array_equal(getattr(h1, name), getattr(h2, name))
        assert h1.log_inv_tau == h2.log_inv_tau

    def test_zero_epochs_returns_initialization(self):
        ds = make_identity_dataset(n=8)
        cfg = TrainConfig(epochs=0, seed=3)
        head, curve = train_align(ds, cfg)
        init = AlignHead.random_init(ds.dim, 3)
        assert curve == []
        assert np.array_equal(head.w_q, init.w_q)
        assert head.log_inv_tau == init.log_inv_tau

    def test_temperature_clamped_every_step(self):
        ds = make_identity_dataset(n=16)
        cfg = TrainConfig(peak_lr=0.5, batch=4, epochs=3, seed=1)
        head, _ = train_align(ds, cfg)
        assert 1.0 - 1e-12 <= math.exp(head.log_inv_tau) <= 100.0 + 1e-12
        assert 0.01 <= head.tau <= 1.0


class TestCheckpointAndCurve:
    def test_checkpoint_roundtrip(self, tmp_path):
        head = AlignHead.random_init(6, 2)
        head.log_inv_tau = 1.234
        save_checkpoint(head, tmp_path / "h.ckpt")
        back = load_checkpoint(tmp_path / "h.ckpt")
        for name in ("w_q", "w_k", "w_v", "w_o"):
            assert np.array_equal(getattr(back, name), getattr(head, name))
        assert back.log_inv_tau == head.log_inv_tau

    def test_checkpoint_bad_magic(self, tmp_path):
        (tmp_path / "h.ckpt").write_bytes(b"XXXX" + b"\x00" * 32)
        with pytest.raises(AlignError, match="magic"):
            load_checkpoint(tmp_path / "h.ckpt")

    def test_loss_curve_columns(self, tmp_path):
        rows = [{"step": 0, "lr": 1e-4, "loss_cont": 0.5, "loss_dist": 0.1,
                 "loss_total": 0.6}]
        write_loss_curve(rows, tmp_path / "loss.csv")
        with open(tmp_path / "loss.csv", newline="") as fh:
            got = list(csv.DictReader(fh))
        assert got[0]["step"] == "0"
        assert set(got[0]) == {"step", "lr", "loss_cont", "loss_dist", "loss_total"}


class TestAlignDatasetLoading:
    def _write(self, tmp_path, sid, t_shape=(2, 4), d=4, frozen_rows=1):
        rng = np.random.default_rng(hash(sid) % 2**31)
        paths = {}
        for key, shape, tag in (("depth_tokens", t_shape, "finetuned"),
                                ("depth_frozen", (frozen_rows, d), "finetuned"),
                                ("image_pooled", (1, d), "pretrained")):
            p = tmp_path / f"{sid}_{key}.dlem"
            write_embeddings(EmbeddingMatrix(data=rng.normal(size=shape),
                                             encoder_tag=tag), p)
            paths[key] = p.name
        return paths

    def test_load_and_fail_fast_on_missing(self, tmp_path):
        import json
        doc = {"shapes": {"a": self._write(tmp_path, "a"),
                          "b": self._write(tmp_path, "b")}}
        (tmp_path / "align.json").write_text(json.dumps(doc))
        ds = load_align_dataset(tmp_path / "align.json")
        assert ds.size == 2 and ds.dim == 4
        doc["shapes"]["c"] = {k: f"c_{k}.dlem" for k in doc["shapes"]["a"]}
        (tmp_path / "align.json").write_text(json.dumps(doc))
        with pytest.raises(AlignError, match="missing"):
            load_align_dataset(tmp_path / "align.json")

    def test_dimension_mismatch(self, tmp_path):
        import json
        doc = {"shapes": {"a": self._write(tmp_path, "a", t_shape=(2, 4), d=4),
                          "b": self._write(tmp_path, "b", t_shape=(2, 6), d=6)}}
        (tmp_path / "align.json").write_text(json.dumps(doc))
        with pytest.raises(AlignError, match="token shape"):
            load_align_dataset(tmp_path / "align.json")
