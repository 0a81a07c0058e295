"""Embedding init, cosine, vector file format."""

from __future__ import annotations

import numpy as np
import pytest

from search2vec.embeddings import (
    VectorSpace,
    ZeroVectorError,
    cosine,
    init_embeddings,
    load_vectors,
    save_vectors,
)
from search2vec.vocab import build_vocabulary
from conftest import make_session


@pytest.fixture
def small_vocab():
    sessions = [
        make_session("u", [("q", f"tok{i}"), ("a", f"ad{i}", 5)]) for i in range(6)
    ]
    return build_vocabulary(sessions, min_count=1)


class TestInit:
    def test_inputs_bounded_by_half_over_d(self, small_vocab):
        table = init_embeddings(small_vocab, d=300, seed=1)
        assert np.abs(table.input_vectors).max() <= 1.0 / 600

    def test_outputs_all_zero(self, small_vocab):
        table = init_embeddings(small_vocab, d=8, seed=1)
        assert not table.output_vectors.any()

    def test_same_seed_identical(self, small_vocab):
        a = init_embeddings(small_vocab, d=16, seed=9)
        b = init_embeddings(small_vocab, d=16, seed=9)
        assert np.array_equal(a.input_vectors, b.input_vectors)

    def test_different_seed_differs(self, small_vocab):
        a = init_embeddings(small_vocab, d=16, seed=9)
        b = init_embeddings(small_vocab, d=16, seed=10)
        assert not np.array_equal(a.input_vectors, b.input_vectors)

    def test_zero_dimension_rejected(self, small_vocab):
        with pytest.raises(ValueError):
            init_embeddings(small_vocab, d=0)

    def test_everything_finite_and_norm_bounded(self, small_vocab):
        d = 32
        table = init_embeddings(small_vocab, d=d, seed=3)
        assert np.isfinite(table.input_vectors).all()
        norms = np.linalg.norm(table.input_vectors, axis=1)
        assert (norms <= np.sqrt(d) * 0.5 / d + 1e-12).all()


class TestCosine:
    def test_identical_vectors(self):
        v = np.array([0.3, -0.7, 2.0])
        assert cosine(v, v) == pytest.approx(1.0)

    def test_orthogonal(self):
        assert cosine([1.0, 0.0], [0.0, 1.0]) == 0.0

    def test_worked_example(self):
        assert cosine([1.0, 2.0], [2.0, 1.0]) == pytest.approx(0.8)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            cosine([1.0, 2.0], [1.0, 2.0, 3.0])

    def test_zero_vector(self):
        with pytest.raises(ZeroVectorError):
            cosine([0.0, 0.0], [1.0, 2.0])

    def test_bounded(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            u, v = rng.normal(size=(2, 5))
            assert -1.0 <= cosine(u, v) <= 1.0


class TestVectorFiles:
    def test_round_trip_with_spaces_in_tokens(self, tmp_path):
        tokens = ["q:red shoes", "q:boots", "a:ad1"]
        matrix = np.array([[0.5, -1.25], [1e-9, 3.0], [2.0, 2.0]])
        path = tmp_path / "vectors.vec"
        save_vectors(str(path), tokens, matrix)
        space = load_vectors(str(path))
        assert space.tokens == tokens
        np.testing.assert_allclose(space.matrix, matrix, rtol=1e-8)

    def test_header(self, tmp_path):
        path = tmp_path / "v.vec"
        save_vectors(str(path), ["q:a"], np.zeros((1, 4)))
        assert path.read_text().splitlines()[0] == "1 4"

    def test_subspace_strips_prefix(self):
        space = VectorSpace(
            ["q:coffee", "a:ad1", "q:tea"], np.arange(9.0).reshape(3, 3)
        )
        queries = space.subspace("q:")
        assert queries.tokens == ["coffee", "tea"]
        np.testing.assert_array_equal(queries.get("tea"), [6.0, 7.0, 8.0])
        assert queries.get("ad1") is None
