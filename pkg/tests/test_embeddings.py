import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from zsreid.embeddings import (
    EmbeddingError,
    EmbeddingMatrix,
    fuse,
    l2_normalize_rows,
    load_embeddings,
    read_embeddings,
    write_embeddings,
)


def _emb(data, name="m"):
    return EmbeddingMatrix(name, np.asarray(data, dtype=np.float32))


def _bytes(tmp_path, m):
    path = tmp_path / "x.emb"
    write_embeddings(path, m)
    return path.read_bytes()


class TestEmb1Format:
    def test_round_trip_bit_exact(self, tmp_path):
        data = np.random.default_rng(0).standard_normal((3, 4)).astype(np.float32)
        path = tmp_path / "a.emb"
        write_embeddings(path, _emb(data, "dinov2+zeroed"))
        m = load_embeddings(path)
        assert m.model_name == "dinov2+zeroed"
        assert (m.rows, m.dim) == (3, 4)
        assert m.data.tobytes() == data.tobytes()
        assert m.background_zeroed and m.base_model == "dinov2"

    def test_header_layout(self, tmp_path):
        buf = _bytes(tmp_path, _emb(np.ones((2, 3)), "clip"))
        magic, version, n, d, name_len = struct.unpack_from("<4sIQQH", buf)
        assert (magic, version, n, d, name_len) == (b"EMB1", 1, 2, 3, 4)
        assert buf[26:30] == b"clip"
        assert len(buf) == 26 + 4 + 2 * 3 * 4
        assert struct.unpack_from("<f", buf, 30)[0] == 1.0

    def test_bad_magic(self, tmp_path):
        buf = _bytes(tmp_path, _emb(np.ones((3, 4))))
        with pytest.raises(EmbeddingError, match="bad magic"):
            read_embeddings(b"XXXX" + buf[4:])

    def test_truncated_by_one_value(self, tmp_path):
        buf = _bytes(tmp_path, _emb(np.ones((3, 4))))
        with pytest.raises(EmbeddingError, match="truncated"):
            read_embeddings(buf[:-4])

    def test_truncated_header(self):
        with pytest.raises(EmbeddingError, match="truncated"):
            read_embeddings(b"EMB1\x01")

    def test_payload_longer_than_header(self, tmp_path):
        buf = _bytes(tmp_path, _emb(np.ones((3, 4))))
        with pytest.raises(EmbeddingError, match="mismatch"):
            read_embeddings(buf + b"\x00" * 4)

    def test_nan_payload_names_offset(self, tmp_path):
        buf = bytearray(_bytes(tmp_path, _emb(np.ones((2, 2)), "m")))
        header = 26 + 1
        struct.pack_into("<f", buf, header + 3 * 4, float("nan"))
        with pytest.raises(EmbeddingError, match=f"offset {header + 12}.*row 1, col 1"):
            read_embeddings(bytes(buf))

    def test_writer_refuses_inf(self, tmp_path):
        with pytest.raises(EmbeddingError):
            write_embeddings(tmp_path / "x", _emb([[1.0, np.inf]]))

    def test_load_error_names_file(self, tmp_path):
        path = tmp_path / "broken.emb"
        path.write_bytes(b"nope")
        with pytest.raises(EmbeddingError, match="broken.emb"):
            load_embeddings(path)


class TestNormalize:
    def test_three_four_five(self):
        out = l2_normalize_rows(_emb([[3.0, 4.0]]))
        np.testing.assert_allclose(out.data, [[0.6, 0.8]], atol=1e-7)

    def test_unit_row_unchanged(self):
        row = np.array([[0.6, 0.8, 0.0]], dtype=np.float32)
        np.testing.assert_allclose(l2_normalize_rows(_emb(row)).data, row, atol=1e-7)

    def test_zero_row_names_crop(self):
        with pytest.raises(EmbeddingError, match="crop_id 1"):
            l2_normalize_rows(_emb([[1.0, 0.0], [0.0, 0.0]]))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 20), st.integers(1, 300), st.integers(0, 2**32 - 1))
    def test_idempotent_and_unit(self, n, d, seed):
        data = np.random.default_rng(seed).standard_normal((n, d)) * 10
        once = l2_normalize_rows(_emb(data))
        twice = l2_normalize_rows(once)
        np.testing.assert_allclose(twice.data, once.data, atol=1e-6)
        np.testing.assert_allclose(np.linalg.norm(once.data.astype(np.float64), axis=1), 1.0, atol=1e-6)


def _per_model_cosines(parts):
    out = []
    for p in parts:
        x = np.asarray(p.data, dtype=np.float64)
        x = x / np.linalg.norm(x, axis=1, keepdims=True)
        out.append(x @ x.T)
    return np.mean(out, axis=0)


class TestFuse:
    def test_single_model_is_normalisation(self):
        data = np.random.default_rng(1).standard_normal((5, 7))
        fused = fuse([_emb(data)])
        np.testing.assert_allclose(fused.data, l2_normalize_rows(_emb(data)).data, atol=1e-7)
        assert fused.source_models == ("m",)

    def test_two_scalars(self):
        fused = fuse([_emb([[1.0]], "a"), _emb([[1.0]], "b")])
        np.testing.assert_allclose(fused.data, [[2**-0.5, 2**-0.5]], atol=1e-7)

    def test_unnormalised_parts_weighted_equally(self):
        # part a has norm 10, part b norm 1; both contribute 1/sqrt(2)
        fused = fuse([_emb([[10.0, 0.0]], "a"), _emb([[0.0, 1.0]], "b")])
        np.testing.assert_allclose(fused.data, [[2**-0.5, 0.0, 0.0, 2**-0.5]], atol=1e-7)

    def test_row_mismatch(self):
        with pytest.raises(EmbeddingError, match="mismatch"):
            fuse([_emb(np.ones((5, 2)), "a"), _emb(np.ones((6, 2)), "b")])

    def test_empty(self):
        with pytest.raises(EmbeddingError):
            fuse([])

    def test_zero_row_propagates(self):
        with pytest.raises(EmbeddingError, match="zero-norm"):
            fuse([_emb([[1.0], [1.0]], "a"), _emb([[1.0], [0.0]], "b")])

    def test_column_blocks_in_order(self):
        a, b = _emb([[1.0, 0.0]], "a"), _emb([[0.0, 0.0, 1.0]], "b")
        fused = fuse([a, b])
        assert fused.dim == 5 and fused.source_models == ("a", "b")
        assert fused.data[0, 4] > 0 and fused.data[0, 0] > 0

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(1, 3))
    def test_cosine_decomposition(self, seed, m):
        rng = np.random.default_rng(seed)
        parts = [_emb(rng.standard_normal((6, int(rng.integers(8, 400)))), f"m{i}") for i in range(m)]
        fused = fuse(parts).data.astype(np.float64)
        np.testing.assert_allclose(fused @ fused.T, _per_model_cosines(parts), atol=1e-5)

    def test_permutation_invariant_cosines(self):
        rng = np.random.default_rng(3)
        parts = [_emb(rng.standard_normal((8, d)), n) for n, d in (("a", 16), ("b", 64), ("c", 32))]
        f1 = fuse(parts).data.astype(np.float64)
        f2 = fuse(parts[::-1]).data.astype(np.float64)
        np.testing.assert_allclose(f1 @ f1.T, f2 @ f2.T, atol=1e-6)
        np.testing.assert_allclose(np.linalg.norm(f1, axis=1), 1.0, atol=1e-6)
