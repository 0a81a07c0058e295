"""Action vocabulary: token ids, frequency filtering, downsampling.

Tokens are namespaced by action kind (``q:``, ``a:``, ``l:``) so a query
and an ad that happen to share text never collide. Ids are dense and
ordered by descending count (ties broken lexicographically), which keeps
the negative-sampling table cache-friendly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .sessions import KIND_AD, KIND_LINK, KIND_QUERY, Action, Session

KIND_PREFIX = {KIND_QUERY: "q:", KIND_AD: "a:", KIND_LINK: "l:"}
_PREFIX_KIND = {v: k for k, v in KIND_PREFIX.items()}

DEFAULT_MIN_COUNT = 10
DEFAULT_SUBSAMPLE_THRESHOLD = 1e-5


def token_key(action: Action) -> str:
    """Namespaced vocabulary key for an action."""
    return KIND_PREFIX[action.kind] + action.token


@dataclass
class Vocabulary:
    tokens: list[str]  # namespaced, indexed by id
    kinds: list[str]
    counts: np.ndarray  # pre-filter occurrence counts, by id
    total_action_count: int
    index: dict[str, int] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.index:
            self.index = {token: i for i, token in enumerate(self.tokens)}
        self.counts = np.asarray(self.counts, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def id_of(self, token: str) -> int | None:
        return self.index.get(token)

    def frequency(self, token_id: int) -> float:
        """Relative frequency over retained tokens (drives downsampling)."""
        return float(self.counts[token_id]) / float(self.counts.sum())


def build_vocabulary(
    sessions: Iterable[Session], min_count: int = DEFAULT_MIN_COUNT
) -> Vocabulary:
    """Count actions across sessions and keep tokens seen >= min_count times."""
    counts: dict[str, int] = {}
    kinds: dict[str, str] = {}
    total = 0
    for session in sessions:
        for action in session.actions:
            key = token_key(action)
            counts[key] = counts.get(key, 0) + 1
            kinds[key] = action.kind
            total += 1
    kept = [(token, n) for token, n in counts.items() if n >= min_count]
    kept.sort(key=lambda item: (-item[1], item[0]))
    tokens = [token for token, _ in kept]
    return Vocabulary(
        tokens=tokens,
        kinds=[kinds[token] for token in tokens],
        counts=np.array([n for _, n in kept], dtype=np.int64),
        total_action_count=total,
    )


def keep_probability(
    token_frequency: float, threshold: float = DEFAULT_SUBSAMPLE_THRESHOLD
) -> float:
    """Downsampling keep probability: min(1, sqrt(threshold / f))."""
    if token_frequency <= 0:
        raise ValueError(f"token frequency must be positive, got {token_frequency}")
    return min(1.0, math.sqrt(threshold / token_frequency))


def save_vocabulary(vocab: Vocabulary, path: str) -> None:
    """Text format, one token per id: ``token <TAB> kind <TAB> count``."""
    with open(path, "w", encoding="utf-8") as handle:
        for token, kind, count in zip(vocab.tokens, vocab.kinds, vocab.counts):
            handle.write(f"{token}\t{kind}\t{int(count)}\n")


def load_vocabulary(path: str) -> Vocabulary:
    tokens: list[str] = []
    kinds: list[str] = []
    counts: list[int] = []
    with open(path, encoding="utf-8") as handle:
        for line in handle:
            if not line.strip():
                continue
            token, kind, count = line.rstrip("\n").split("\t")
            tokens.append(token)
            kinds.append(kind)
            counts.append(int(count))
    return Vocabulary(
        tokens=tokens,
        kinds=kinds,
        counts=np.array(counts, dtype=np.int64),
        total_action_count=int(sum(counts)),
    )
