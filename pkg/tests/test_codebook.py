import math

import numpy as np
import pytest

from conftest import random_rotation
from latentpose.codebook import (
    Codebook,
    build_codebook,
    cosine_similarity,
    knn_query,
    load_codebook,
    save_codebook,
)
from latentpose.errors import CodebookFormatError, DegenerateCodeError


def random_codebook(rng, count, dim):
    codes = rng.normal(size=(count, dim)).astype(np.float32)
    rotations = np.stack([random_rotation(rng) for _ in range(count)]).astype(np.float32)
    diags = rng.uniform(5.0, 60.0, size=count).astype(np.float32)
    centers = rng.uniform(0.0, 128.0, size=(count, 2)).astype(np.float32)
    return Codebook(codes, rotations, diags, centers)


def knn_oracle(codebook, query, k):
    """Full sort over exact similarities; ties broken by index via stable sort."""
    q = np.asarray(query, dtype=np.float64)
    sims = codebook.codes.astype(np.float64) @ q
    sims /= np.linalg.norm(codebook.codes.astype(np.float64), axis=1) * np.linalg.norm(q)
    order = np.argsort(-sims, kind="stable")[:k]
    return [(int(i), sims[i]) for i in order]


class TestCosineSimilarity:
    def test_self_similarity_is_one(self):
        v = np.array([1.0, 2.0, -3.0])
        assert cosine_similarity(v, v) == pytest.approx(1.0, abs=1e-12)

    def test_orthogonal_vectors(self):
        assert cosine_similarity([1.0, 0.0], [0.0, 1.0]) == 0.0

    def test_analytic_45_degrees(self):
        assert cosine_similarity([1.0, 0.0], [1.0, 1.0]) == pytest.approx(1.0 / math.sqrt(2.0))

    def test_zero_vector_rejected(self):
        with pytest.raises(DegenerateCodeError):
            cosine_similarity([0.0, 0.0], [1.0, 0.0])

    def test_dimension_mismatch_rejected(self):
        with pytest.raises(ValueError):
            cosine_similarity([1.0, 0.0], [1.0, 0.0, 0.0])


class TestBuildCodebook:
    def test_single_view_self_query(self):
        image = np.arange(16.0, dtype=np.float32).reshape(4, 4) + 1.0
        codebook = build_codebook(lambda img: img.ravel(), [(image, np.eye(3), (0, 0, 4, 4))])
        assert len(codebook) == 1
        (index, similarity), = knn_query(codebook, image.ravel(), 1)
        assert index == 0
        assert similarity == pytest.approx(1.0, abs=1e-6)

    def test_norms_match_recomputation(self):
        rng = np.random.default_rng(11)
        views = [
            (rng.random((8, 8)).astype(np.float32), random_rotation(rng), (1, 2, 5, 6))
            for _ in range(100)
        ]
        codebook = build_codebook(lambda img: img.ravel(), views)
        oracle = np.linalg.norm(codebook.codes.astype(np.float64), axis=1)
        np.testing.assert_allclose(codebook.norms, oracle, atol=1e-6)

    def test_entries_keep_input_order_and_bbox_geometry(self):
        rng = np.random.default_rng(12)
        rotations = [random_rotation(rng) for _ in range(3)]
        views = [(np.full((2, 2), i + 1.0), rotations[i], (i, 2 * i, 3 + i, 4)) for i in range(3)]
        codebook = build_codebook(lambda img: img.ravel(), views)
        for i in range(3):
            entry = codebook.entry(i)
            np.testing.assert_allclose(entry.rotation, rotations[i], atol=1e-6)
            assert entry.bbox_diag == pytest.approx(math.hypot(3 + i, 4), rel=1e-6)
            assert entry.bbox_center == pytest.approx((i + (3 + i) / 2.0, 2 * i + 2.0))

    def test_mismatched_encoder_dim_rejected(self):
        views = [(np.ones((2, 2)), np.eye(3), (0, 0, 2, 2)), (np.ones((2, 2)), np.eye(3), (0, 0, 2, 2))]
        dims = iter([4, 5])

        def encoder(img):
            return np.ones(next(dims), dtype=np.float32)

        with pytest.raises(ValueError, match="dim"):
            build_codebook(encoder, views)

    def test_empty_silhouette_view_rejected(self):
        with pytest.raises(ValueError, match="silhouette"):
            build_codebook(lambda img: img.ravel(), [(np.ones((2, 2)), np.eye(3), None)])

    def test_no_views_rejected(self):
        with pytest.raises(ValueError):
            build_codebook(lambda img: img.ravel(), [])


class TestKnnQuery:
    def test_exact_match_on_own_entries(self):
        rng = np.random.default_rng(1)
        codebook = random_codebook(rng, 200, 16)
        for i in (0, 57, 199):
            (index, similarity), *_ = knn_query(codebook, codebook.codes[i], 3)
            assert index == i
            assert similarity == pytest.approx(1.0, abs=1e-6)

    @pytest.mark.parametrize("k", [1, 5, 10, 100])
    def test_matches_full_sort_oracle(self, k):
        rng = np.random.default_rng(2)
        codebook = random_codebook(rng, 10_000, 128)
        for _ in range(20):
            query = rng.normal(size=128)
            result = knn_query(codebook, query, k)
            oracle = knn_oracle(codebook, query, k)
            assert [i for i, _ in result] == [i for i, _ in oracle]
            np.testing.assert_allclose([s for _, s in result], [s for _, s in oracle], atol=1e-12)

    def test_exhaustive_small_instance_all_k(self):
        rng = np.random.default_rng(3)
        codebook = random_codebook(rng, 50, 8)
        query = rng.normal(size=8)
        for k in range(1, 51):
            assert [i for i, _ in knn_query(codebook, query, k)] == [i for i, _ in knn_oracle(codebook, query, k)]

    def test_ties_break_toward_lower_index(self):
        codes = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [2.0, 0.0]], dtype=np.float32)
        codebook = Codebook(codes, np.stack([np.eye(3)] * 4), np.ones(4), np.zeros((4, 2)))
        result = knn_query(codebook, [1.0, 0.0], 3)
        assert [i for i, _ in result] == [0, 2, 3]

    def test_scale_invariance_of_ranking(self):
        rng = np.random.default_rng(4)
        codebook = random_codebook(rng, 5000, 64)
        for _ in range(10):
            query = rng.normal(size=64)
            reference = [i for i, _ in knn_query(codebook, query, 20)]
            for scale in (0.1, 2.5):
                scaled = [i for i, _ in knn_query(codebook, query * scale, 20)]
                assert scaled == reference

    def test_k_bounds(self):
        rng = np.random.default_rng(5)
        codebook = random_codebook(rng, 10, 4)
        with pytest.raises(ValueError):
            knn_query(codebook, np.ones(4), 0)
        with pytest.raises(ValueError):
            knn_query(codebook, np.ones(4), 11)

    def test_zero_query_rejected(self):
        rng = np.random.default_rng(6)
        codebook = random_codebook(rng, 10, 4)
        with pytest.raises(DegenerateCodeError):
            knn_query(codebook, np.zeros(4), 1)


class TestSerialization:
    def test_roundtrip_bit_identical(self, tmp_path):
        rng = np.random.default_rng(7)
        codebook = random_codebook(rng, 321, 24)
        path = tmp_path / "book.aaec"
        save_codebook(codebook, path)
        loaded = load_codebook(path)
        assert loaded == codebook

    def test_file_layout_is_pinned(self, tmp_path):
        codes = np.array([[0.5, -1.5]], dtype=np.float32)
        codebook = Codebook(codes, np.eye(3)[None], np.array([5.0]), np.array([[3.0, 4.0]]))
        path = tmp_path / "one.aaec"
        save_codebook(codebook, path)
        blob = path.read_bytes()
        assert blob[:4] == b"AAEC"
        assert int.from_bytes(blob[4:8], "little") == 1
        assert int.from_bytes(blob[8:12], "little") == 1  # count
        assert int.from_bytes(blob[12:16], "little") == 2  # dim
        assert len(blob) == 16 + 4 * (2 + 9 + 1 + 2)
        row = np.frombuffer(blob, dtype="<f4", offset=16)
        np.testing.assert_array_equal(row[:2], codes[0])
        np.testing.assert_array_equal(row[2:11], np.eye(3).reshape(-1).astype(np.float32))
        assert row[11] == 5.0

    def test_empty_file_rejected(self, tmp_path):
        path = tmp_path / "empty.aaec"
        path.write_bytes(b"")
        with pytest.raises(CodebookFormatError):
            load_codebook(path)

    def test_bad_magic_rejected_at_offset_zero(self, tmp_path):
        path = tmp_path / "junk.aaec"
        path.write_bytes(b"NOPE" + b"\x00" * 12)
        with pytest.raises(CodebookFormatError) as info:
            load_codebook(path)
        assert info.value.offset == 0

    def test_future_version_rejected(self, tmp_path):
        rng = np.random.default_rng(8)
        codebook = random_codebook(rng, 2, 4)
        path = tmp_path / "versioned.aaec"
        save_codebook(codebook, path)
        blob = bytearray(path.read_bytes())
        blob[4:8] = (999).to_bytes(4, "little")
        path.write_bytes(bytes(blob))
        with pytest.raises(CodebookFormatError) as info:
            load_codebook(path)
        assert info.value.offset == 4
        assert "999" in str(info.value)

    def test_truncated_file_rejected_with_offset(self, tmp_path):
        rng = np.random.default_rng(9)
        codebook = random_codebook(rng, 4, 8)
        path = tmp_path / "cut.aaec"
        save_codebook(codebook, path)
        blob = path.read_bytes()[:-7]
        path.write_bytes(blob)
        with pytest.raises(CodebookFormatError) as info:
            load_codebook(path)
        assert info.value.offset == len(blob)
