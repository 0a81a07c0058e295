"""Broad-match ad retrieval: cosine K-nn with thresholding.

The exact scan ranks every ad by cosine to the query vector, keeps the
top K, and drops scores at or below tau. The LSH path hashes vectors
with random hyperplanes (sign bits per table), unions the matching
buckets into a candidate set, and re-ranks those candidates exactly
under the same K/tau contract.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .embeddings import VectorSpace
from .validation import check_matrix, check_vector

DEFAULT_K = 30
DEFAULT_TAU = 0.65
DEFAULT_LSH_BITS = 16
DEFAULT_LSH_TABLES = 32


@dataclass
class MatchResult:
    query: str
    matches: list[tuple[str, float]]  # (ad token, cosine), scores non-increasing
    k: int = DEFAULT_K
    tau: float = DEFAULT_TAU

    def tokens(self) -> list[str]:
        return [token for token, _ in self.matches]


def _cosine_scores(query_vector: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    """Cosine of the query against every row; zero rows score 0."""
    query_norm = float(np.linalg.norm(query_vector))
    if query_norm == 0.0:
        raise ValueError("zero query vector")
    norms = np.linalg.norm(matrix, axis=1)
    safe = np.where(norms == 0.0, np.inf, norms)
    return (matrix @ query_vector) / (safe * query_norm)


def _top_k_filtered(
    tokens: Sequence[str],
    scores: np.ndarray,
    k: int,
    tau: float,
    query: str,
) -> MatchResult:
    # Rank by score descending, ties by ad token; top K first, then tau.
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], tokens[i]))[:k]
    matches = [
        (tokens[i], float(scores[i])) for i in order if float(scores[i]) > tau
    ]
    return MatchResult(query, matches, k, tau)


def knn_exact(
    query_vector: np.ndarray,
    ads: VectorSpace,
    k: int = DEFAULT_K,
    tau: float = DEFAULT_TAU,
    query: str = "",
) -> MatchResult:
    """Exact top-K cosine retrieval over all ad vectors."""
    query_vector = check_vector(query_vector, "query_vector")
    if len(ads) == 0:
        raise ValueError("empty ad set")
    if ads.matrix.shape[1] != query_vector.shape[0]:
        raise ValueError(
            f"dimension mismatch: query {query_vector.shape[0]}, "
            f"ads {ads.matrix.shape[1]}"
        )
    scores = _cosine_scores(query_vector, ads.matrix)
    return _top_k_filtered(ads.tokens, scores, k, tau, query)


def score_pair(query_vector: np.ndarray, ad_vector: np.ndarray) -> float:
    """Cosine between one query vector and one ad vector."""
    from .embeddings import cosine

    return cosine(query_vector, ad_vector)


class LshIndex:
    """Random-hyperplane signatures over several hash tables.

    Each table hashes a vector to the sign pattern of ``n_bits`` random
    projections; a query's candidates are the union of its buckets.
    ``n_bits=0`` degenerates to a single bucket (all candidates).
    """

    def __init__(
        self,
        n_bits: int = DEFAULT_LSH_BITS,
        n_tables: int = DEFAULT_LSH_TABLES,
        seed: int = 42,
    ):
        if n_bits < 0 or n_tables < 1:
            raise ValueError(f"bad LSH shape: {n_bits} bits, {n_tables} tables")
        self.n_bits = n_bits
        self.n_tables = n_tables
        self.seed = seed
        self.planes: np.ndarray | None = None
        self.buckets: list[dict[int, list[int]]] | None = None
        self.ads: VectorSpace | None = None

    def _signatures(self, matrix: np.ndarray) -> np.ndarray:
        """(n_rows, n_tables) integer bucket keys."""
        if self.n_bits == 0:
            return np.zeros((matrix.shape[0], self.n_tables), dtype=np.int64)
        bits = (matrix @ self.planes.reshape(-1, matrix.shape[1]).T) >= 0
        bits = bits.reshape(matrix.shape[0], self.n_tables, self.n_bits)
        powers = 1 << np.arange(self.n_bits, dtype=np.int64)
        return bits @ powers

    def build(self, ads: VectorSpace) -> "LshIndex":
        matrix = check_matrix(ads.matrix, "ad matrix")
        rng = np.random.default_rng(self.seed)
        self.planes = rng.standard_normal((self.n_tables, self.n_bits, matrix.shape[1]))
        self.ads = ads
        keys = self._signatures(matrix)
        self.buckets = [dict() for _ in range(self.n_tables)]
        for table in range(self.n_tables):
            bucket = self.buckets[table]
            for row, key in enumerate(keys[:, table]):
                bucket.setdefault(int(key), []).append(row)
        return self

    def candidates(self, query_vector: np.ndarray) -> list[int]:
        if self.buckets is None:
            raise ValueError("LSH index not built")
        keys = self._signatures(query_vector[None, :])[0]
        seen: set[int] = set()
        for table in range(self.n_tables):
            seen.update(self.buckets[table].get(int(keys[table]), ()))
        return sorted(seen)


def knn_lsh(
    query_vector: np.ndarray,
    index: LshIndex,
    k: int = DEFAULT_K,
    tau: float = DEFAULT_TAU,
    query: str = "",
) -> MatchResult:
    """Approximate retrieval: exact re-rank of the LSH candidate union."""
    query_vector = check_vector(query_vector, "query_vector")
    if index.ads is None:
        raise ValueError("LSH index not built")
    rows = index.candidates(query_vector)
    if not rows:
        return MatchResult(query, [], k, tau)
    scores = _cosine_scores(query_vector, index.ads.matrix[rows])
    tokens = [index.ads.tokens[r] for r in rows]
    return _top_k_filtered(tokens, scores, k, tau, query)


class BroadMatchRetriever(BaseEstimator):
    """K-nn ad retriever with an exact scan or LSH acceleration."""

    def __init__(
        self,
        k: int = DEFAULT_K,
        tau: float = DEFAULT_TAU,
        algorithm: str = "exact",
        n_bits: int = DEFAULT_LSH_BITS,
        n_tables: int = DEFAULT_LSH_TABLES,
        seed: int = 42,
    ):
        self.k = k
        self.tau = tau
        self.algorithm = algorithm
        self.n_bits = n_bits
        self.n_tables = n_tables
        self.seed = seed

    def fit(self, X, tokens: Sequence[str] | None = None) -> "BroadMatchRetriever":
        if self.algorithm not in ("exact", "lsh"):
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        if isinstance(X, VectorSpace):
            space = X
        else:
            matrix = check_matrix(X)
            if tokens is None:
                tokens = [str(i) for i in range(matrix.shape[0])]
            space = VectorSpace(list(tokens), matrix)
        self.ads_ = space
        self.index_ = (
            LshIndex(self.n_bits, self.n_tables, self.seed).build(space)
            if self.algorithm == "lsh"
            else None
        )
        return self

    def match(self, query_vector: np.ndarray, query: str = "") -> MatchResult:
        check_is_fitted(self, "ads_")
        if self.index_ is not None:
            return knn_lsh(query_vector, self.index_, self.k, self.tau, query)
        return knn_exact(query_vector, self.ads_, self.k, self.tau, query)
