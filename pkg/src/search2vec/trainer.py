"""Single-process skip-gram trainer with dwell weights and implicit negatives.

This trainer is the equivalence oracle for the distributed one, so its
schedule is fully deterministic given the seed: session order is a
seeded shuffle per epoch, pair generation draws from a per-session
generator, and negative sampling re-seeds per minibatch with the
protocol's SplitMix64. Coefficients for a whole minibatch are computed
from the vectors as they stood at batch start, then updates are applied
sequentially pair by pair; this mirrors the parameter-server round trip
(dot products travel before coefficients come back), and makes a
single-shard distributed run reproduce this trainer bit for bit.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .embeddings import EmbeddingTable, init_embeddings
from .prng import SplitMix64, derive_seed
from .sessions import (
    KIND_AD,
    KIND_QUERY,
    Session,
    dwell_weight,
    extract_implicit_negatives,
)
from .vocab import KIND_PREFIX, Vocabulary, build_vocabulary, keep_probability

logger = logging.getLogger(__name__)

LABEL_NEGATIVE = 0
LABEL_POSITIVE = 1
LABEL_IMPLICIT_NEGATIVE = 2

_SHUFFLE_STREAM = 0x5F
_PAIR_STREAM = 0x9A
_NEG_STREAM = 0xC3

NEGATIVE_EXPONENT = 0.75


class TrainingError(RuntimeError):
    """Non-finite arithmetic encountered during an update."""


@dataclass(frozen=True)
class WeightedPair:
    center: int
    context: int
    label: int = LABEL_POSITIVE
    weight: float = 1.0


@dataclass
class TrainingConfig:
    dim: int = 300
    window: int = 5
    negatives: int = 5
    epochs: int = 10
    alpha: float = 0.025
    min_alpha: float = 1e-4
    subsample: float = 1e-5
    min_count: int = 10
    batch_sessions: int = 200
    negative_sampling: str = "unigram"  # unigram^0.75 | "uniform"
    use_implicit_negatives: bool = True
    shuffle: bool = True
    seed: int = 42

    def __post_init__(self) -> None:
        if self.dim < 1:
            raise ValueError(f"dim must be >= 1, got {self.dim}")
        if self.window < 1:
            raise ValueError(f"window must be >= 1, got {self.window}")
        if self.negatives < 0:
            raise ValueError(f"negatives must be >= 0, got {self.negatives}")
        if not 0 < self.min_alpha <= self.alpha:
            raise ValueError(
                f"need 0 < min_alpha <= alpha, got {self.min_alpha}, {self.alpha}"
            )
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.subsample < 0:
            raise ValueError(f"subsample must be >= 0, got {self.subsample}")
        if self.batch_sessions < 1:
            raise ValueError(f"batch_sessions must be >= 1, got {self.batch_sessions}")
        if self.negative_sampling not in ("unigram", "uniform"):
            raise ValueError(f"unknown negative_sampling {self.negative_sampling!r}")
        if self.seed < 0:
            raise ValueError(f"seed must be >= 0, got {self.seed}")


class PairBatch:
    """Column arrays for a batch of weighted training pairs."""

    __slots__ = ("centers", "contexts", "labels", "weights")

    def __init__(self, centers, contexts, labels, weights):
        self.centers = np.asarray(centers, dtype=np.int64)
        self.contexts = np.asarray(contexts, dtype=np.int64)
        self.labels = np.asarray(labels, dtype=np.uint8)
        self.weights = np.asarray(weights, dtype=np.float64)

    def __len__(self) -> int:
        return len(self.centers)

    @property
    def n_positive(self) -> int:
        return int((self.labels == LABEL_POSITIVE).sum())

    def label_values(self) -> np.ndarray:
        return (self.labels == LABEL_POSITIVE).astype(np.float64)

    @classmethod
    def empty(cls) -> "PairBatch":
        return cls([], [], [], [])

    @classmethod
    def from_pairs(cls, pairs: Iterable[WeightedPair]) -> "PairBatch":
        pairs = list(pairs)
        return cls(
            [p.center for p in pairs],
            [p.context for p in pairs],
            [p.label for p in pairs],
            [p.weight for p in pairs],
        )

    def to_pairs(self) -> list[WeightedPair]:
        return [
            WeightedPair(int(c), int(x), int(l), float(w))
            for c, x, l, w in zip(self.centers, self.contexts, self.labels, self.weights)
        ]

    @classmethod
    def concat(cls, first: "PairBatch", second: "PairBatch") -> "PairBatch":
        return cls(
            np.concatenate([first.centers, second.centers]),
            np.concatenate([first.contexts, second.contexts]),
            np.concatenate([first.labels, second.labels]),
            np.concatenate([first.weights, second.weights]),
        )


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def log_sigmoid(x: np.ndarray) -> np.ndarray:
    return -np.logaddexp(0.0, -np.asarray(x, dtype=np.float64))


class NegativeSampler:
    """Draws context ids from the unigram^0.75 (or uniform) distribution.

    Sampling walks a cumulative table with SplitMix64 draws so that
    every consumer of the same seed reproduces the identical sequence.
    """

    def __init__(self, counts: np.ndarray, uniform: bool = False):
        counts = np.asarray(counts, dtype=np.float64)
        if counts.size == 0:
            raise ValueError("cannot sample from an empty vocabulary")
        weights = np.ones_like(counts) if uniform else counts**NEGATIVE_EXPONENT
        self.cumulative = np.cumsum(weights)
        self.total = float(self.cumulative[-1])

    def sample(self, gen: SplitMix64, avoid: int) -> int:
        """One draw; a hit on ``avoid`` is redrawn up to 8 times, then kept."""
        idx = avoid
        for _ in range(8):
            u = gen.next_float() * self.total
            idx = int(np.searchsorted(self.cumulative, u, side="right"))
            if idx != avoid:
                return idx
        return idx


def generate_pairs(
    session: Session,
    window: int,
    vocab: Vocabulary,
    rng: np.random.Generator,
    subsample: float = 0.0,
) -> list[WeightedPair]:
    """Positive (center, context) pairs from one session.

    Out-of-vocabulary actions are removed first, then each surviving
    occurrence is kept with probability min(1, sqrt(threshold/f)), then
    the +-window enumeration runs over the survivors. A pair between a
    query and the ad clicked immediately after it (in the original
    action order) carries the dwell weight, in both directions.
    """
    survivors: list[tuple[int, int]] = []  # (original index, vocab id)
    for orig_idx, action in enumerate(session.actions):
        token_id = vocab.id_of(KIND_PREFIX[action.kind] + action.token)
        if token_id is None:
            continue
        if subsample > 0:
            keep = keep_probability(vocab.frequency(token_id), subsample)
            if rng.random() >= keep:
                continue
        survivors.append((orig_idx, token_id))

    def pair_weight(center_pos: int, context_pos: int) -> float:
        center = session.actions[survivors[center_pos][0]]
        context = session.actions[survivors[context_pos][0]]
        gap = survivors[context_pos][0] - survivors[center_pos][0]
        if (
            center.kind == KIND_QUERY
            and context.kind == KIND_AD
            and gap == 1
            and context.dwell_seconds is not None
        ):
            return dwell_weight(context.dwell_seconds / 60.0)
        if (
            center.kind == KIND_AD
            and context.kind == KIND_QUERY
            and gap == -1
            and center.dwell_seconds is not None
        ):
            return dwell_weight(center.dwell_seconds / 60.0)
        return 1.0

    pairs: list[WeightedPair] = []
    for m in range(len(survivors)):
        for offset in range(-window, window + 1):
            j = m + offset
            if offset == 0 or j < 0 or j >= len(survivors):
                continue
            pairs.append(
                WeightedPair(
                    survivors[m][1],
                    survivors[j][1],
                    LABEL_POSITIVE,
                    pair_weight(m, j),
                )
            )
    return pairs


def sample_negatives(
    context_id: int, n: int, sampler: NegativeSampler, gen: SplitMix64
) -> list[int]:
    """n negative context ids for one positive pair (avoiding its context)."""
    return [sampler.sample(gen, context_id) for _ in range(n)]


def expand_negatives(
    request: PairBatch, n: int, sampler: NegativeSampler, seed: int
) -> PairBatch:
    """Sampled-negative pairs for a request batch, in canonical order.

    Negatives are drawn per positive-label pair, in request order; pairs
    with other labels get none. All shards and the reference trainer
    run this same expansion from the same seed.
    """
    gen = SplitMix64(seed)
    centers: list[int] = []
    contexts: list[int] = []
    for i in range(len(request)):
        if request.labels[i] != LABEL_POSITIVE:
            continue
        center = int(request.centers[i])
        for neg in sample_negatives(int(request.contexts[i]), n, sampler, gen):
            centers.append(center)
            contexts.append(neg)
    count = len(centers)
    return PairBatch(
        centers,
        contexts,
        np.full(count, LABEL_NEGATIVE, dtype=np.uint8),
        np.ones(count, dtype=np.float64),
    )


def batch_dots(table: EmbeddingTable, batch: PairBatch) -> np.ndarray:
    """v_center . v'_context per pair (the full-width counterpart of a
    shard's slice-local partial dots)."""
    return np.einsum(
        "ij,ij->i",
        table.input_vectors[batch.centers],
        table.output_vectors[batch.contexts],
    )


def coefficients(
    dots: np.ndarray,
    label_values: np.ndarray,
    weights: np.ndarray,
    alphas: np.ndarray,
) -> np.ndarray:
    """Global update coefficients g = alpha * eta * (label - sigma(dot))."""
    if not np.isfinite(dots).all():
        bad = int(np.flatnonzero(~np.isfinite(dots))[0])
        raise TrainingError(f"non-finite dot product at pair {bad}")
    return alphas * weights * (label_values - sigmoid(dots))


def apply_batch_updates(
    table: EmbeddingTable, batch: PairBatch, gs: np.ndarray
) -> None:
    """Apply per-pair updates sequentially (later pairs see earlier ones)."""
    inputs = table.input_vectors
    outputs = table.output_vectors
    for i in range(len(batch)):
        g = gs[i]
        if g == 0.0:
            continue
        center = batch.centers[i]
        context = batch.contexts[i]
        previous_output = outputs[context].copy()
        outputs[context] += g * inputs[center]
        inputs[center] += g * previous_output


def sgd_step(table: EmbeddingTable, pair: WeightedPair, alpha: float) -> float:
    """Single-pair gradient-ascent step; returns the coefficient g.

    Unlike the batched trainer, this computes the coefficient from the
    current vectors and applies it immediately.
    """
    if alpha <= 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    center_vec = table.input_vectors[pair.center]
    context_vec = table.output_vectors[pair.context]
    dot = float(np.dot(center_vec, context_vec))
    if not math.isfinite(dot):
        raise TrainingError(
            f"non-finite dot product for pair ({pair.center}, {pair.context})"
        )
    label_value = 1.0 if pair.label == LABEL_POSITIVE else 0.0
    g = alpha * pair.weight * (label_value - float(sigmoid(np.float64(dot))))
    previous_context = context_vec.copy()
    table.output_vectors[pair.context] += g * center_vec
    table.input_vectors[pair.center] += g * previous_context
    return g


def objective_value(
    table: EmbeddingTable, pairs: "PairBatch | Iterable[WeightedPair]"
) -> float:
    """Weighted log-sigmoid objective over a pair set (higher is better)."""
    batch = pairs if isinstance(pairs, PairBatch) else PairBatch.from_pairs(pairs)
    if len(batch) == 0:
        return 0.0
    dots = batch_dots(table, batch)
    signs = np.where(batch.labels == LABEL_POSITIVE, 1.0, -1.0)
    return float(np.sum(batch.weights * log_sigmoid(signs * dots)))


# ---------------------------------------------------------------------------
# Deterministic schedule shared with the distributed trainer


def epoch_order(n_sessions: int, config: TrainingConfig, epoch: int) -> np.ndarray:
    order = np.arange(n_sessions)
    if config.shuffle:
        rng = np.random.default_rng([config.seed, _SHUFFLE_STREAM, epoch])
        rng.shuffle(order)
    return order


def pair_rng(config: TrainingConfig, epoch: int, position: int) -> np.random.Generator:
    return np.random.default_rng([config.seed, _PAIR_STREAM, epoch, position])


def negative_seed(config: TrainingConfig, epoch: int, batch_index: int) -> int:
    return derive_seed(config.seed, _NEG_STREAM, epoch, batch_index)


def session_request_pairs(
    session: Session,
    vocab: Vocabulary,
    config: TrainingConfig,
    rng: np.random.Generator,
) -> list[WeightedPair]:
    """One session's positives followed by its implicit negatives."""
    pairs = generate_pairs(session, config.window, vocab, rng, config.subsample)
    if config.use_implicit_negatives:
        for skip in extract_implicit_negatives(session):
            query_id = vocab.id_of("q:" + skip.query_token)
            ad_id = vocab.id_of("a:" + skip.skipped_ad_token)
            if query_id is not None and ad_id is not None:
                pairs.append(
                    WeightedPair(query_id, ad_id, LABEL_IMPLICIT_NEGATIVE, 1.0)
                )
    return pairs


def request_batch(
    sessions: Sequence[Session],
    order: np.ndarray,
    positions: range,
    vocab: Vocabulary,
    config: TrainingConfig,
    epoch: int,
) -> PairBatch:
    """Request pairs for the sessions at ``positions`` of the epoch order."""
    pairs: list[WeightedPair] = []
    for pos in positions:
        rng = pair_rng(config, epoch, pos)
        pairs.extend(session_request_pairs(sessions[order[pos]], vocab, config, rng))
    return PairBatch.from_pairs(pairs)


def count_scheduled_pairs(
    sessions: Sequence[Session], vocab: Vocabulary, config: TrainingConfig
) -> int:
    """Total pairs (request + sampled negatives) over all epochs.

    Drives the linear learning-rate decay; regenerates the pair streams,
    which is cheap at the corpus sizes this implementation targets.
    """
    total = 0
    for epoch in range(config.epochs):
        order = epoch_order(len(sessions), config, epoch)
        for pos in range(len(order)):
            rng = pair_rng(config, epoch, pos)
            pairs = session_request_pairs(sessions[order[pos]], vocab, config, rng)
            positives = sum(1 for p in pairs if p.label == LABEL_POSITIVE)
            total += len(pairs) + config.negatives * positives
    return total


def alpha_schedule(
    start_index: int, count: int, total_pairs: int, config: TrainingConfig
) -> np.ndarray:
    """Per-pair learning rates, linear from alpha to min_alpha over the run."""
    indices = np.arange(start_index, start_index + count, dtype=np.float64)
    span = config.alpha - config.min_alpha
    return np.maximum(
        config.min_alpha, config.alpha - span * indices / max(total_pairs, 1)
    )


def probe_pairs(batch: PairBatch, limit: int = 1000) -> PairBatch:
    """Fixed objective probe: the first request pairs of an epoch."""
    n = min(len(batch), limit)
    return PairBatch(
        batch.centers[:n], batch.contexts[:n], batch.labels[:n], batch.weights[:n]
    )


def train_embeddings(
    sessions: Sequence[Session],
    config: TrainingConfig,
    vocab: Vocabulary | None = None,
) -> tuple[EmbeddingTable, Vocabulary, list[dict]]:
    """Full reference training run; returns (table, vocab, epoch history)."""
    sessions = list(sessions)
    if vocab is None:
        vocab = build_vocabulary(sessions, config.min_count)
    if len(vocab) == 0:
        raise ValueError("empty vocabulary: nothing to train")
    table = init_embeddings(vocab, config.dim, config.seed)
    history: list[dict] = []
    if config.epochs == 0:
        return table, vocab, history

    sampler = NegativeSampler(
        vocab.counts, uniform=config.negative_sampling == "uniform"
    )
    total_pairs = count_scheduled_pairs(sessions, vocab, config)
    batch_count = math.ceil(len(sessions) / config.batch_sessions)
    next_index = 0
    for epoch in range(config.epochs):
        order = epoch_order(len(sessions), config, epoch)
        probe: PairBatch | None = None
        epoch_pairs = 0
        for batch_index in range(batch_count):
            positions = range(
                batch_index * config.batch_sessions,
                min((batch_index + 1) * config.batch_sessions, len(order)),
            )
            request = request_batch(sessions, order, positions, vocab, config, epoch)
            if probe is None and len(request):
                probe = probe_pairs(request)
            negatives = expand_negatives(
                request, config.negatives, sampler,
                negative_seed(config, epoch, batch_index),
            )
            batch = PairBatch.concat(request, negatives)
            if len(batch) == 0:
                continue
            dots = batch_dots(table, batch)
            alphas = alpha_schedule(next_index, len(batch), total_pairs, config)
            try:
                gs = coefficients(dots, batch.label_values(), batch.weights, alphas)
            except TrainingError as exc:
                raise TrainingError(f"epoch {epoch}: {exc}") from None
            apply_batch_updates(table, batch, gs)
            next_index += len(batch)
            epoch_pairs += len(batch)
        record = {
            "epoch": epoch,
            "pairs": epoch_pairs,
            "objective_sample": objective_value(table, probe) if probe else 0.0,
            "alpha": float(alpha_schedule(next_index, 1, total_pairs, config)[0]),
        }
        history.append(record)
        logger.info(
            "epoch=%d pairs=%d objective_sample=%.6f alpha=%.6f",
            record["epoch"], record["pairs"],
            record["objective_sample"], record["alpha"],
        )
    return table, vocab, history


def train(
    sessions: Sequence[Session],
    config: TrainingConfig,
    vocab: Vocabulary | None = None,
) -> EmbeddingTable:
    table, _, _ = train_embeddings(sessions, config, vocab)
    return table


class SkipGramEmbedder(BaseEstimator):
    """Estimator wrapper around the reference trainer.

    fit(sessions) builds the vocabulary and trains the paired embedding
    matrices; transform(tokens) returns input vectors for namespaced
    tokens (``q:coffee``, ``a:ad17``, ...).
    """

    def __init__(
        self,
        dim: int = 300,
        window: int = 5,
        negatives: int = 5,
        epochs: int = 10,
        alpha: float = 0.025,
        min_alpha: float = 1e-4,
        subsample: float = 1e-5,
        min_count: int = 10,
        batch_sessions: int = 200,
        negative_sampling: str = "unigram",
        use_implicit_negatives: bool = True,
        shuffle: bool = True,
        seed: int = 42,
    ):
        self.dim = dim
        self.window = window
        self.negatives = negatives
        self.epochs = epochs
        self.alpha = alpha
        self.min_alpha = min_alpha
        self.subsample = subsample
        self.min_count = min_count
        self.batch_sessions = batch_sessions
        self.negative_sampling = negative_sampling
        self.use_implicit_negatives = use_implicit_negatives
        self.shuffle = shuffle
        self.seed = seed

    def _make_config(self) -> TrainingConfig:
        return TrainingConfig(
            dim=self.dim,
            window=self.window,
            negatives=self.negatives,
            epochs=self.epochs,
            alpha=self.alpha,
            min_alpha=self.min_alpha,
            subsample=self.subsample,
            min_count=self.min_count,
            batch_sessions=self.batch_sessions,
            negative_sampling=self.negative_sampling,
            use_implicit_negatives=self.use_implicit_negatives,
            shuffle=self.shuffle,
            seed=self.seed,
        )

    def fit(self, X: Sequence[Session], y=None) -> "SkipGramEmbedder":
        config = self._make_config()
        table, vocab, history = train_embeddings(list(X), config)
        self.vocabulary_ = vocab
        self.table_ = table
        self.history_ = history
        return self

    def transform(self, tokens: Sequence[str]) -> np.ndarray:
        check_is_fitted(self, "table_")
        rows = []
        for token in tokens:
            token_id = self.vocabulary_.id_of(token)
            if token_id is None:
                raise ValueError(f"unknown token {token!r}")
            rows.append(token_id)
        return self.table_.input_vectors[rows]
