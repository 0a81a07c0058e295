"""Elastic matching: tail queries against an index of expanded head queries.

Head queries (those with learned vectors) are expanded with the words of
their K nearest-neighbor queries in the embedding space, and the
expanded documents go into an inverted index. An unseen tail query is
then matched lexically against those documents with BM25; it inherits
the vector (and any cached broad-match ads) of the top-ranked head.

BM25 here uses k1 = 1.2, b = 0.75 and the non-negative idf variant
ln(1 + (N - df + 0.5)/(df + 0.5)), so scores are zero exactly when
query and document share no term.
"""

from __future__ import annotations

import logging
import math
import struct
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .embeddings import VectorSpace
from .sessions import normalize_query

logger = logging.getLogger(__name__)

DEFAULT_NEIGHBORS = 10
BM25_K1 = 1.2
BM25_B = 0.75

_MAGIC = b"S2VX"
_VERSION = 1


class ColdStartMiss(LookupError):
    """No head query could be matched for a tail query."""


@dataclass
class QueryDocument:
    head_query: str
    terms: Counter  # word -> occurrence count across head + neighbors

    @property
    def length(self) -> int:
        return int(sum(self.terms.values()))


def nearest_queries(
    query: str, queries: VectorSpace, k: int
) -> list[tuple[str, float]]:
    """Exact K-nn by cosine among all other queries (ties: token order)."""
    vector = queries.get(query)
    if vector is None:
        raise KeyError(f"no vector for query {query!r}")
    norms = np.linalg.norm(queries.matrix, axis=1)
    query_norm = float(np.linalg.norm(vector))
    if query_norm == 0.0:
        raise ValueError(f"zero vector for query {query!r}")
    safe = np.where(norms == 0.0, np.inf, norms)
    scores = (queries.matrix @ vector) / (safe * query_norm)
    ranked = sorted(
        (
            (queries.tokens[i], float(scores[i]))
            for i in range(len(queries))
            if queries.tokens[i] != query
        ),
        key=lambda item: (-item[1], item[0]),
    )
    return ranked[:k]


def build_query_documents(
    head_queries: Sequence[str],
    queries: VectorSpace,
    k: int = DEFAULT_NEIGHBORS,
) -> list[QueryDocument]:
    """One document per head query: its own words plus the words of its
    K nearest neighbors (weighted by occurrence count across neighbors).

    Head queries without vectors are skipped with a warning.
    """
    documents = []
    for head in head_queries:
        normalized = normalize_query(head)
        if normalized not in queries:
            logger.warning("head query %r has no vector; skipped", head)
            continue
        terms = Counter(normalized.split())
        if k > 0:
            for neighbor, _ in nearest_queries(normalized, queries, k):
                terms.update(neighbor.split())
        documents.append(QueryDocument(normalized, terms))
    return documents


@dataclass
class InvertedIndex:
    heads: list[str]  # head query per document id
    postings: dict[str, list[tuple[int, int]]]  # term -> [(doc id, tf)]
    doc_lengths: list[int]
    ads_by_head: dict[str, list[str]] = field(default_factory=dict)
    k: int = DEFAULT_NEIGHBORS

    @property
    def n_docs(self) -> int:
        return len(self.heads)

    @property
    def average_length(self) -> float:
        return sum(self.doc_lengths) / len(self.doc_lengths) if self.doc_lengths else 0.0

    def document_frequency(self, term: str) -> int:
        return len(self.postings.get(term, ()))


def build_index(
    documents: Sequence[QueryDocument],
    ads_by_head: dict[str, list[str]] | None = None,
    k: int = DEFAULT_NEIGHBORS,
) -> InvertedIndex:
    postings: dict[str, list[tuple[int, int]]] = {}
    for doc_id, document in enumerate(documents):
        for term, tf in sorted(document.terms.items()):
            postings.setdefault(term, []).append((doc_id, int(tf)))
    return InvertedIndex(
        heads=[d.head_query for d in documents],
        postings=postings,
        doc_lengths=[d.length for d in documents],
        ads_by_head=dict(ads_by_head or {}),
        k=k,
    )


def match_tail_query(index: InvertedIndex, tail_text: str) -> list[tuple[str, float]]:
    """BM25-ranked (head query, score) candidates for an unseen query.

    Ties break by document id; queries sharing no term with any
    document return an empty list.
    """
    tokens = normalize_query(tail_text).split()
    if not tokens:
        raise ValueError("empty tail query")
    if index.n_docs == 0:
        return []
    scores: dict[int, float] = {}
    avgdl = index.average_length
    for term in tokens:
        entries = index.postings.get(term)
        if not entries:
            continue
        df = len(entries)
        idf = math.log(1.0 + (index.n_docs - df + 0.5) / (df + 0.5))
        for doc_id, tf in entries:
            norm = BM25_K1 * (
                1.0 - BM25_B + BM25_B * index.doc_lengths[doc_id] / avgdl
            )
            scores[doc_id] = scores.get(doc_id, 0.0) + idf * (
                tf * (BM25_K1 + 1.0) / (tf + norm)
            )
    ranked = sorted(scores.items(), key=lambda item: (-item[1], item[0]))
    return [(index.heads[doc_id], score) for doc_id, score in ranked]


def inherit(
    matches: Sequence[tuple[str, float]],
    queries: VectorSpace,
    ads_by_head: dict[str, list[str]] | None = None,
    exclude: str | None = None,
) -> tuple[str, np.ndarray, list[str]]:
    """Adopt the top match's vector and cached ads.

    ``exclude`` skips a head query (the evaluation protocol excludes the
    searched query itself). Raises ColdStartMiss when nothing remains.
    """
    for head, _ in matches:
        if exclude is not None and head == exclude:
            continue
        vector = queries.get(head)
        if vector is None:
            continue
        ads = list((ads_by_head or {}).get(head, ()))
        return head, vector, ads
    raise ColdStartMiss("no matched head query to inherit from")


# ---------------------------------------------------------------------------
# Serialization: versioned binary index with delta-encoded postings


def _write_varint(out: bytearray, value: int) -> None:
    while True:
        byte = value & 0x7F
        value >>= 7
        if value:
            out.append(byte | 0x80)
        else:
            out.append(byte)
            return


def _read_varint(data: bytes, offset: int) -> tuple[int, int]:
    result = 0
    shift = 0
    while True:
        byte = data[offset]
        offset += 1
        result |= (byte & 0x7F) << shift
        if not byte & 0x80:
            return result, offset
        shift += 7


def _write_string(out: bytearray, text: str) -> None:
    encoded = text.encode("utf-8")
    _write_varint(out, len(encoded))
    out.extend(encoded)


def _read_string(data: bytes, offset: int) -> tuple[str, int]:
    length, offset = _read_varint(data, offset)
    return data[offset : offset + length].decode("utf-8"), offset + length


def save_index(index: InvertedIndex, path: str) -> None:
    out = bytearray()
    out.extend(_MAGIC)
    out.extend(struct.pack("<HI", _VERSION, index.n_docs))
    _write_varint(out, index.k)
    for doc_id, head in enumerate(index.heads):
        _write_string(out, head)
        _write_varint(out, index.doc_lengths[doc_id])
        ads = index.ads_by_head.get(head, [])
        _write_varint(out, len(ads))
        for ad in ads:
            _write_string(out, ad)
    _write_varint(out, len(index.postings))
    for term in sorted(index.postings):
        entries = index.postings[term]
        _write_string(out, term)
        _write_varint(out, len(entries))
        previous = 0
        for doc_id, tf in entries:  # doc ids ascending: delta-encode
            _write_varint(out, doc_id - previous)
            _write_varint(out, tf)
            previous = doc_id
    with open(path, "wb") as handle:
        handle.write(bytes(out))


def load_index(path: str) -> InvertedIndex:
    with open(path, "rb") as handle:
        data = handle.read()
    if data[:4] != _MAGIC:
        raise ValueError(f"{path} is not an elastic index file")
    version, n_docs = struct.unpack_from("<HI", data, 4)
    if version != _VERSION:
        raise ValueError(f"unsupported index version {version}")
    offset = 10
    k, offset = _read_varint(data, offset)
    heads: list[str] = []
    doc_lengths: list[int] = []
    ads_by_head: dict[str, list[str]] = {}
    for _ in range(n_docs):
        head, offset = _read_string(data, offset)
        length, offset = _read_varint(data, offset)
        n_ads, offset = _read_varint(data, offset)
        ads = []
        for _ in range(n_ads):
            ad, offset = _read_string(data, offset)
            ads.append(ad)
        heads.append(head)
        doc_lengths.append(length)
        if ads:
            ads_by_head[head] = ads
    n_terms, offset = _read_varint(data, offset)
    postings: dict[str, list[tuple[int, int]]] = {}
    for _ in range(n_terms):
        term, offset = _read_string(data, offset)
        n_entries, offset = _read_varint(data, offset)
        entries = []
        doc_id = 0
        for _ in range(n_entries):
            delta, offset = _read_varint(data, offset)
            tf, offset = _read_varint(data, offset)
            doc_id += delta
            entries.append((doc_id, tf))
        postings[term] = entries
    return InvertedIndex(heads, postings, doc_lengths, ads_by_head, k)


def dump_index_text(index: InvertedIndex, path: str) -> None:
    """Debug dump: ``term <TAB> head_query:tf,...`` one term per line."""
    with open(path, "w", encoding="utf-8") as handle:
        for term in sorted(index.postings):
            entries = ",".join(
                f"{index.heads[doc_id]}:{tf}" for doc_id, tf in index.postings[term]
            )
            handle.write(f"{term}\t{entries}\n")


@dataclass
class IndexMatcher:
    """Match/inherit over an index (possibly deserialized) and a query space."""

    index: InvertedIndex
    queries: VectorSpace

    def match(self, tail_text: str) -> list[tuple[str, float]]:
        return match_tail_query(self.index, tail_text)

    def inherit(
        self, tail_text: str, exclude: str | None = None
    ) -> tuple[str, np.ndarray, list[str]]:
        return inherit(
            self.match(tail_text), self.queries, self.index.ads_by_head, exclude
        )


class ElasticQueryMatcher(BaseEstimator):
    """fit builds the expanded inverted index; match ranks head queries."""

    def __init__(self, k: int = DEFAULT_NEIGHBORS):
        self.k = k

    def fit(
        self,
        head_queries: Sequence[str],
        queries: VectorSpace,
        ads_by_head: dict[str, list[str]] | None = None,
    ) -> "ElasticQueryMatcher":
        documents = build_query_documents(head_queries, queries, self.k)
        self.index_ = build_index(documents, ads_by_head, self.k)
        self.queries_ = queries
        return self

    def match(self, tail_text: str) -> list[tuple[str, float]]:
        check_is_fitted(self, "index_")
        return IndexMatcher(self.index_, self.queries_).match(tail_text)

    def inherit(
        self, tail_text: str, exclude: str | None = None
    ) -> tuple[str, np.ndarray, list[str]]:
        check_is_fitted(self, "index_")
        return IndexMatcher(self.index_, self.queries_).inherit(tail_text, exclude)
