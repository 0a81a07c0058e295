"""Content-based vectors for ads never seen in sessions.

A new ad has no click history, so its vector is built from its text: the
bid term's learned query vector anchors the construction, and every
title/description/URL n-gram whose own query vector sits close enough to
that anchor (cosine above tau_c) is added in. The anchor filter is what
keeps boilerplate ("free shipping", "best prices") out of the sum
without any curated stopword list.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .embeddings import VectorSpace, cosine
from .sessions import normalize_query

logger = logging.getLogger(__name__)

DEFAULT_TAU_C = 0.45
MAX_NGRAM = 10

_URL_SEPARATORS = re.compile(r"[/\-_.?]+")


class ColdStartError(ValueError):
    """The anchor (bid term) vector cannot be resolved for an ad."""


@dataclass(frozen=True)
class AdCreative:
    ad_id: str
    title: str
    description: str
    display_url: str
    bid_term: str

    def __post_init__(self) -> None:
        if not self.bid_term.strip():
            raise ValueError(f"ad {self.ad_id!r} has an empty bid term")


@dataclass
class ContentVector:
    ad_id: str
    vector: np.ndarray
    contributing_phrases: list[tuple[str, float]] = field(default_factory=list)


def _field_tokens(text: str) -> list[str]:
    return normalize_query(text).split()


def extract_ngrams(creative: AdCreative) -> list[str]:
    """Candidate phrases: all n-grams (n = 1..10) of title, description,
    and URL, each field independently, deduplicated in first-seen order."""
    fields = [
        _field_tokens(creative.title),
        _field_tokens(creative.description),
        _field_tokens(_URL_SEPARATORS.sub(" ", creative.display_url)),
    ]
    seen: dict[str, None] = {}
    for tokens in fields:
        for n in range(1, MAX_NGRAM + 1):
            for start in range(len(tokens) - n + 1):
                seen.setdefault(" ".join(tokens[start : start + n]))
    return list(seen)


def resolve_anchor(
    bid_term: str,
    queries: VectorSpace,
    elastic_index=None,
) -> np.ndarray:
    """Bid-term vector: exact vocabulary lookup, else the top elastic match."""
    normalized = normalize_query(bid_term)
    vector = queries.get(normalized)
    if vector is not None:
        return vector
    if elastic_index is not None:
        matches = elastic_index.match(normalized)
        if matches:
            head = matches[0][0]
            vector = queries.get(head)
            if vector is not None:
                return vector
    raise ColdStartError(f"no vector resolvable for bid term {bid_term!r}")


def anchor_phrases_vector(
    creative: AdCreative,
    queries: VectorSpace,
    tau_c: float = DEFAULT_TAU_C,
    elastic_index=None,
) -> ContentVector:
    """Anchor-filtered sum of phrase vectors, seeded with the anchor itself.

    Result is intentionally unnormalized; retrieval scores by cosine.
    """
    anchor = resolve_anchor(creative.bid_term, queries, elastic_index)
    if not np.linalg.norm(anchor):
        raise ColdStartError(f"zero anchor vector for bid term {creative.bid_term!r}")
    vector = anchor.astype(np.float64).copy()
    contributing: list[tuple[str, float]] = []
    for phrase in extract_ngrams(creative):
        phrase_vector = queries.get(phrase)
        if phrase_vector is None or not np.linalg.norm(phrase_vector):
            continue
        similarity = cosine(anchor, phrase_vector)
        if similarity > tau_c:
            vector += phrase_vector
            contributing.append((phrase, similarity))
    return ContentVector(creative.ad_id, vector, contributing)


class AnchorPhraseVectorizer(BaseEstimator):
    """fit on the learned query space, transform ad creatives to vectors.

    Ads whose anchor cannot be resolved are skipped with a warning and
    reported in ``failures_`` after transform.
    """

    def __init__(self, tau_c: float = DEFAULT_TAU_C):
        self.tau_c = tau_c

    def fit(self, queries: VectorSpace, elastic_index=None) -> "AnchorPhraseVectorizer":
        self.queries_ = queries
        self.elastic_index_ = elastic_index
        return self

    def transform(self, creatives: Iterable[AdCreative]) -> list[ContentVector]:
        check_is_fitted(self, "queries_")
        results = []
        self.failures_: list[tuple[str, str]] = []
        for creative in creatives:
            try:
                results.append(
                    anchor_phrases_vector(
                        creative, self.queries_, self.tau_c, self.elastic_index_
                    )
                )
            except ColdStartError as exc:
                logger.warning("cold start failed for ad %s: %s", creative.ad_id, exc)
                self.failures_.append((creative.ad_id, str(exc)))
        return results


def read_catalog(path: str) -> tuple[list[AdCreative], list[tuple[int, str]]]:
    """Ad catalog file: ``ad_id TAB title TAB description TAB url TAB bid_term``.

    Returns (creatives, record errors as (line number, reason)).
    """
    creatives: list[AdCreative] = []
    errors: list[tuple[int, str]] = []
    with open(path, encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 5:
                errors.append((line_no, f"expected 5 fields, got {len(parts)}"))
                continue
            try:
                creatives.append(AdCreative(*parts))
            except ValueError as exc:
                errors.append((line_no, str(exc)))
    return creatives, errors


def write_provenance(vectors: Sequence[ContentVector], path: str) -> None:
    """JSON-lines sidecar: contributing phrases and similarities per ad."""
    with open(path, "w", encoding="utf-8") as handle:
        for content in vectors:
            record = {
                "ad_id": content.ad_id,
                "phrases": [
                    {"phrase": phrase, "similarity": round(sim, 6)}
                    for phrase, sim in content.contributing_phrases
                ],
            }
            handle.write(json.dumps(record, sort_keys=True) + "\n")
