import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from opendlign.embedstore import (BadMagicError, EmbeddingError,
                                  EmbeddingMatrix, NonFiniteDataError,
                                  PayloadLengthError, VersionMismatchError,
                                  ViewFeatureSet, l2_normalize,
                                  load_feature_manifest, mean_pool_normalized,
                                  normalize_rows, read_embeddings,
                                  write_embeddings)


def matrix(data, tag="pretrained", normalized=False):
    return EmbeddingMatrix(data=np.asarray(data, dtype=np.float64),
                           encoder_tag=tag, normalized=normalized)


class TestCodec:
    def test_roundtrip_bitwise(self, tmp_path):
        rng = np.random.default_rng(0)
        data = rng.normal(size=(3, 5)).astype(np.float32)
        m = matrix(data.astype(np.float64), tag="finetuned")
        write_embeddings(m, tmp_path / "m.dlem")
        back = read_embeddings(tmp_path / "m.dlem")
        assert np.array_equal(back.data.astype(np.float32), data)
        assert back.encoder_tag == "finetuned"
        assert back.normalized is False

    def test_roundtrip_preserves_flags(self, tmp_path):
        m = l2_normalize(matrix([[3.0, 4.0]], tag="text"))
        write_embeddings(m, tmp_path / "m.dlem")
        back = read_embeddings(tmp_path / "m.dlem")
        assert back.normalized is True and back.encoder_tag == "text"

    def test_bytes_identical_across_writes(self, tmp_path):
        m = matrix(np.arange(12, dtype=np.float64).reshape(3, 4))
        write_embeddings(m, tmp_path / "a.dlem")
        write_embeddings(m, tmp_path / "b.dlem")
        assert (tmp_path / "a.dlem").read_bytes() == (tmp_path / "b.dlem").read_bytes()

    def test_truncated_payload(self, tmp_path):
        write_embeddings(matrix(np.ones((4, 4))), tmp_path / "m.dlem")
        raw = (tmp_path / "m.dlem").read_bytes()
        (tmp_path / "m.dlem").write_bytes(raw[:-8])
        with pytest.raises(PayloadLengthError):
            read_embeddings(tmp_path / "m.dlem")

    def test_bad_magic(self, tmp_path):
        write_embeddings(matrix(np.ones((2, 2))), tmp_path / "m.dlem")
        raw = bytearray((tmp_path / "m.dlem").read_bytes())
        raw[:4] = b"NOPE"
        (tmp_path / "m.dlem").write_bytes(bytes(raw))
        with pytest.raises(BadMagicError):
            read_embeddings(tmp_path / "m.dlem")

    def test_version_mismatch(self, tmp_path):
        write_embeddings(matrix(np.ones((2, 2))), tmp_path / "m.dlem")
        raw = bytearray((tmp_path / "m.dlem").read_bytes())
        raw[4] = 99
        (tmp_path / "m.dlem").write_bytes(bytes(raw))
        with pytest.raises(VersionMismatchError):
            read_embeddings(tmp_path / "m.dlem")

    def test_nan_payload_rejected(self, tmp_path):
        write_embeddings(matrix(np.ones((1, 2))), tmp_path / "m.dlem")
        raw = bytearray((tmp_path / "m.dlem").read_bytes())
        raw[-4:] = np.array([np.nan], dtype="<f4").tobytes()
        (tmp_path / "m.dlem").write_bytes(bytes(raw))
        with pytest.raises(NonFiniteDataError):
            read_embeddings(tmp_path / "m.dlem")

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float32, st.tuples(st.integers(1, 8), st.integers(1, 8)),
                  elements=st.floats(-1e6, 1e6, allow_nan=False, width=32)),
           st.sampled_from(["pretrained", "finetuned", "text"]))
    def test_roundtrip_property(self, data, tag):
        import tempfile
        from pathlib import Path
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "p.dlem"
            write_embeddings(matrix(data.astype(np.float64), tag=tag), path)
            back = read_embeddings(path)
        assert np.array_equal(back.data.astype(np.float32), data)


class TestNormalize:
    def test_three_four_five(self):
        out = l2_normalize(matrix([[3.0, 4.0]]))
        assert np.allclose(out.data, [[0.6, 0.8]], atol=1e-15)
        assert out.normalized

    def test_idempotent(self):
        rng = np.random.default_rng(1)
        m = l2_normalize(matrix(rng.normal(size=(5, 7))))
        again = l2_normalize(m)
        assert np.abs(again.data - m.data).max() < 1e-7

    def test_zero_row_names_index(self):
        with pytest.raises(EmbeddingError, match="row 1"):
            l2_normalize(matrix([[1.0, 0.0], [0.0, 0.0]]))


class TestMeanPool:
    def test_single_view(self):
        v = ViewFeatureSet(shape_id="s", features=np.array([[3.0, 4.0]]),
                           encoder_tag="pretrained")
        assert np.allclose(mean_pool_normalized(v), [0.6, 0.8], atol=1e-15)

    def test_opposite_vectors_cancel(self):
        v = ViewFeatureSet(shape_id="s",
                           features=np.array([[1.0, 0.0], [-1.0, 0.0]]),
                           encoder_tag="pretrained")
        assert np.allclose(mean_pool_normalized(v), [0.0, 0.0])

    def test_matches_scalar_oracle(self):
        rng = np.random.default_rng(2)
        feats = rng.normal(size=(4, 8))
        v = ViewFeatureSet(shape_id="s", features=feats, encoder_tag="finetuned")
        expected = np.zeros(8)
        for row in feats:
            expected += row / np.sqrt(sum(x * x for x in row))
        expected /= 4
        assert np.abs(mean_pool_normalized(v) - expected).max() < 1e-7

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)),
                  elements=st.floats(-10, 10, allow_nan=False, width=64)))
    def test_pooled_norm_at_most_one(self, feats):
        norms = np.linalg.norm(feats, axis=1)
        if (norms == 0).any():
            feats = feats + 1e-3  # avoid un-normalizable rows
            if (np.linalg.norm(feats, axis=1) == 0).any():
                return
        v = ViewFeatureSet(shape_id="s", features=feats, encoder_tag="text")
        assert np.linalg.norm(mean_pool_normalized(v)) <= 1.0 + 1e-12

    def test_zero_row_is_error(self):
        v = ViewFeatureSet(shape_id="s",
                           features=np.array([[0.0, 0.0], [1.0, 0.0]]),
                           encoder_tag="pretrained")
        with pytest.raises(EmbeddingError):
            mean_pool_normalized(v)


class TestInvariantsAndManifest:
    def test_nan_rejected_on_construction(self):
        with pytest.raises(NonFiniteDataError):
            matrix([[np.nan, 1.0]])

    def test_normalized_flag_checked(self):
        with pytest.raises(EmbeddingError):
            matrix([[2.0, 0.0]], normalized=True)

    def test_bad_tag_rejected(self):
        with pytest.raises(EmbeddingError):
            matrix([[1.0]], tag="mystery")

    def test_feature_manifest(self, tmp_path):
        (tmp_path / "f.json").write_text(
            '{"shapes": {"s1": {"pretrained": "p.dlem", "finetuned": "f.dlem"}},'
            ' "labels": {"chair": {"text": "t.dlem"}}}')
        fm = load_feature_manifest(tmp_path / "f.json")
        assert fm.shapes["s1"]["pretrained"] == tmp_path / "p.dlem"
        assert fm.labels["chair"] == tmp_path / "t.dlem"

    def test_feature_manifest_missing_tag(self, tmp_path):
        (tmp_path / "f.json").write_text('{"shapes": {"s1": {"pretrained": "p.dlem"}}}')
        with pytest.raises(EmbeddingError):
            load_feature_manifest(tmp_path / "f.json")

    def test_normalize_rows_helper(self):
        rows = normalize_rows(np.array([[0.0, 5.0], [2.0, 0.0]]))
        assert np.allclose(rows, [[0.0, 1.0], [1.0, 0.0]])
