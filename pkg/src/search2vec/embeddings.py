"""Paired input/output embedding matrices and their text file format.

The file format doubles as the interchange format: a header line
``|V| d`` followed by ``token <SP> d space-separated decimals``. Input
and output vectors live in separate files with identical layout.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .vocab import Vocabulary

_INIT_STREAM = 0xE1


class ZeroVectorError(ValueError):
    """Cosine similarity is undefined for the zero vector."""


@dataclass
class EmbeddingTable:
    input_vectors: np.ndarray  # |V| x d, float64
    output_vectors: np.ndarray

    def __post_init__(self) -> None:
        if self.input_vectors.shape != self.output_vectors.shape:
            raise ValueError(
                f"input/output shape mismatch: {self.input_vectors.shape} vs "
                f"{self.output_vectors.shape}"
            )

    @property
    def dim(self) -> int:
        return self.input_vectors.shape[1]

    def copy(self) -> "EmbeddingTable":
        return EmbeddingTable(self.input_vectors.copy(), self.output_vectors.copy())


def init_embeddings(vocab: Vocabulary, d: int = 300, seed: int = 42) -> EmbeddingTable:
    """Uniform input vectors in [-0.5/d, 0.5/d], zero output vectors."""
    if d < 1:
        raise ValueError(f"dimension must be >= 1, got {d}")
    rng = np.random.default_rng([seed, _INIT_STREAM])
    bound = 0.5 / d
    inputs = rng.uniform(-bound, bound, size=(len(vocab), d))
    return EmbeddingTable(inputs, np.zeros((len(vocab), d), dtype=np.float64))


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape or u.ndim != 1:
        raise ValueError(f"dimension mismatch: {u.shape} vs {v.shape}")
    nu = float(np.linalg.norm(u))
    nv = float(np.linalg.norm(v))
    if nu == 0.0 or nv == 0.0:
        raise ZeroVectorError("cosine undefined for zero vector")
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


class VectorSpace:
    """Token -> row lookup over an embedding matrix.

    ``subspace(prefix)`` strips a namespace prefix (``q:``, ``a:``, ...)
    so callers can work with plain query text or ad ids.
    """

    def __init__(self, tokens: Sequence[str], matrix: np.ndarray):
        if len(tokens) != matrix.shape[0]:
            raise ValueError(
                f"{len(tokens)} tokens for {matrix.shape[0]} matrix rows"
            )
        self.tokens = list(tokens)
        self.matrix = np.asarray(matrix, dtype=np.float64)
        self.index = {token: i for i, token in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def get(self, token: str) -> np.ndarray | None:
        row = self.index.get(token)
        return None if row is None else self.matrix[row]

    def subspace(self, prefix: str) -> "VectorSpace":
        rows = [i for i, t in enumerate(self.tokens) if t.startswith(prefix)]
        return VectorSpace(
            [self.tokens[i][len(prefix):] for i in rows], self.matrix[rows]
        )

    @classmethod
    def from_table(cls, vocab: Vocabulary, table: EmbeddingTable) -> "VectorSpace":
        return cls(vocab.tokens, table.input_vectors)


def save_vectors(path: str, tokens: Sequence[str], matrix: np.ndarray) -> None:
    matrix = np.asarray(matrix)
    if len(tokens) != matrix.shape[0]:
        raise ValueError("token/row count mismatch")
    with open(path, "w", encoding="utf-8") as handle:
        handle.write(f"{matrix.shape[0]} {matrix.shape[1]}\n")
        for token, row in zip(tokens, matrix):
            handle.write(token + " " + " ".join(format(x, ".9g") for x in row) + "\n")


def load_vectors(path: str) -> VectorSpace:
    with open(path, encoding="utf-8") as handle:
        header = handle.readline().split()
        if len(header) != 2:
            raise ValueError(f"bad vector file header in {path}")
        n, d = int(header[0]), int(header[1])
        tokens: list[str] = []
        rows = np.empty((n, d), dtype=np.float64)
        for i in range(n):
            parts = handle.readline().rstrip("\n").split(" ")
            if len(parts) < d + 1:
                raise ValueError(f"truncated vector line {i + 1} in {path}")
            tokens.append(" ".join(parts[:-d]))
            rows[i] = [float(x) for x in parts[-d:]]
    return VectorSpace(tokens, rows)


def save_table(prefix: str, vocab: Vocabulary, table: EmbeddingTable) -> tuple[str, str]:
    """Write input vectors to ``<prefix>.vec`` and outputs to ``<prefix>.out.vec``."""
    input_path = prefix + ".vec"
    output_path = prefix + ".out.vec"
    save_vectors(input_path, vocab.tokens, table.input_vectors)
    save_vectors(output_path, vocab.tokens, table.output_vectors)
    return input_path, output_path
