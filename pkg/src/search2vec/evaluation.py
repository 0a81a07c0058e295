"""Relevance evaluation over editorially graded (query, ad) pairs.

Two headline metrics: ordinal AUC (mean AUC of the four grade-threshold
classifiers, ties credited 0.5) and macro NDCG (labels 2^grade - 1,
discount log2(rank + 1), averaged across queries). Grades run 1 (Bad)
through 5 (Perfect).
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterable, Sequence

import numpy as np

from .elastic import ColdStartMiss
from .embeddings import VectorSpace, ZeroVectorError, cosine
from .sessions import normalize_query

GRADE_NAMES = {1: "Bad", 2: "Fair", 3: "Good", 4: "Excellent", 5: "Perfect"}
GRADE_THRESHOLDS = (5, 4, 3, 2)
NDCG_CURVE_RANKS = range(2, 10)


class EvaluationError(ValueError):
    """Metric undefined for the given pair set."""


@dataclass(frozen=True)
class GradedPair:
    query: str
    ad: str
    grade: int
    score: float | None = None

    def __post_init__(self) -> None:
        if self.grade not in GRADE_NAMES:
            raise ValueError(f"grade must be 1..5, got {self.grade}")


def read_judgments(path: str) -> list[GradedPair]:
    """Judgment file: ``query <TAB> ad_id <TAB> grade``."""
    pairs = []
    with open(path, encoding="utf-8") as handle:
        for line in handle:
            if not line.strip():
                continue
            query, ad, grade = line.rstrip("\n").split("\t")
            pairs.append(GradedPair(normalize_query(query), ad, int(grade)))
    return pairs


def _scores_and_grades(pairs: Sequence[GradedPair]) -> tuple[np.ndarray, np.ndarray]:
    if not pairs:
        raise EvaluationError("no scored pairs")
    if any(p.score is None for p in pairs):
        raise EvaluationError("pairs must be scored before computing metrics")
    scores = np.array([p.score for p in pairs], dtype=np.float64)
    grades = np.array([p.grade for p in pairs], dtype=np.int64)
    return scores, grades


def _average_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with ties averaged (midrank convention)."""
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values), dtype=np.float64)
    sorted_values = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_values[j + 1] == sorted_values[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def binary_auc(scores: np.ndarray, positive: np.ndarray) -> float:
    """Rank-statistic AUC; tied scores count half."""
    n_pos = int(positive.sum())
    n_neg = len(scores) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise EvaluationError("AUC needs both classes present")
    ranks = _average_ranks(scores)
    u = float(ranks[positive].sum()) - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def oauc(pairs: Sequence[GradedPair]) -> float:
    """Mean AUC of the grade >= t classifiers for t in {5, 4, 3, 2}.

    Thresholds where one side is empty are skipped; with no computable
    threshold (all pairs share a grade) the metric is undefined.
    """
    scores, grades = _scores_and_grades(pairs)
    values = []
    for threshold in GRADE_THRESHOLDS:
        positive = grades >= threshold
        if 0 < positive.sum() < len(pairs):
            values.append(binary_auc(scores, positive))
    if not values:
        raise EvaluationError("all pairs share one grade; oAUC undefined")
    return float(np.mean(values))


def _dcg(grades_in_rank_order: Sequence[int], k: int | None) -> float:
    take = grades_in_rank_order if k is None else grades_in_rank_order[:k]
    return sum(
        (2.0**grade - 1.0) / np.log2(position + 2.0)
        for position, grade in enumerate(take)
    )


def _group_by_query(pairs: Sequence[GradedPair]) -> dict[str, list[GradedPair]]:
    groups: dict[str, list[GradedPair]] = {}
    for pair in pairs:
        groups.setdefault(pair.query, []).append(pair)
    return groups


def macro_ndcg(pairs: Sequence[GradedPair], k: int | None = None) -> float:
    """Per-query NDCG (optionally truncated at rank k), averaged."""
    _scores_and_grades(pairs)  # validates
    values = []
    for query_pairs in _group_by_query(pairs).values():
        ranked = sorted(query_pairs, key=lambda p: (-p.score, p.ad))
        grades = [p.grade for p in ranked]
        ideal = sorted(grades, reverse=True)
        idcg = _dcg(ideal, k)
        values.append(_dcg(grades, k) / idcg)
    return float(np.mean(values))


def ndcg_curve(
    pairs: Sequence[GradedPair], ranks: Iterable[int] = NDCG_CURVE_RANKS
) -> list[tuple[int, float]]:
    return [(k, macro_ndcg(pairs, k)) for k in ranks]


@dataclass
class CoverageReport:
    total: int = 0
    scored: int = 0
    missing_query: int = 0
    missing_ad: int = 0
    zero_vector: int = 0

    def as_dict(self) -> dict[str, int]:
        return {
            "total": self.total,
            "scored": self.scored,
            "missing_query": self.missing_query,
            "missing_ad": self.missing_ad,
            "zero_vector": self.zero_vector,
        }


def score_dataset(
    pairs: Sequence[GradedPair],
    mode: str,
    queries: VectorSpace,
    ads: VectorSpace,
    content: VectorSpace | None = None,
    matcher=None,
) -> tuple[list[GradedPair], CoverageReport]:
    """Annotate pairs with model cosine scores.

    Modes: ``context`` scores learned query vs learned ad vectors;
    ``content`` scores learned query vs Algorithm-built content ad
    vectors; ``elastic`` resolves the query through the inverted index
    with self-exclusion, then scores against the learned ad vector.
    Unresolvable pairs are excluded and accounted in the coverage report.
    """
    if mode not in ("context", "content", "elastic"):
        raise ValueError(f"unknown scoring mode {mode!r}")
    if mode == "content" and content is None:
        raise ValueError("content mode needs content ad vectors")
    if mode == "elastic" and matcher is None:
        raise ValueError("elastic mode needs an elastic matcher")

    report = CoverageReport()
    scored: list[GradedPair] = []
    for pair in pairs:
        report.total += 1
        query_text = normalize_query(pair.query)
        if mode == "elastic":
            try:
                _, query_vector, _ = matcher.inherit(query_text, exclude=query_text)
            except (ColdStartMiss, ValueError):
                report.missing_query += 1
                continue
        else:
            query_vector = queries.get(query_text)
            if query_vector is None:
                report.missing_query += 1
                continue
        ad_space = content if mode == "content" else ads
        ad_vector = ad_space.get(pair.ad)
        if ad_vector is None:
            report.missing_ad += 1
            continue
        try:
            score = cosine(query_vector, ad_vector)
        except ZeroVectorError:
            report.zero_vector += 1
            continue
        scored.append(replace(pair, score=score))
        report.scored += 1
    return scored, report


def _nearest_rank(sorted_values: Sequence[float], fraction: float) -> float:
    """Nearest-rank quantile: the ceil(fraction * n)-th smallest value."""
    n = len(sorted_values)
    rank = max(1, int(np.ceil(fraction * n)))
    return float(sorted_values[rank - 1])


@dataclass
class GradeScoreRow:
    grade: int
    minimum: float
    q1: float
    median: float
    q3: float
    maximum: float
    mean: float
    count: int


def grade_score_distribution(pairs: Sequence[GradedPair]) -> list[GradeScoreRow]:
    """Box-plot quartiles of model scores per editorial grade.

    Grades with no pairs are omitted; quartiles use the nearest-rank
    method for bit-stable export.
    """
    _scores_and_grades(pairs)
    rows = []
    for grade in sorted(GRADE_NAMES):
        scores = sorted(p.score for p in pairs if p.grade == grade)
        if not scores:
            continue
        rows.append(
            GradeScoreRow(
                grade=grade,
                minimum=scores[0],
                q1=_nearest_rank(scores, 0.25),
                median=_nearest_rank(scores, 0.50),
                q3=_nearest_rank(scores, 0.75),
                maximum=scores[-1],
                mean=float(np.mean(scores)),
                count=len(scores),
            )
        )
    return rows


def format_distribution_table(rows: Sequence[GradeScoreRow]) -> str:
    lines = ["grade\tname\tmin\tq1\tmedian\tq3\tmax\tmean\tcount"]
    for row in rows:
        lines.append(
            f"{row.grade}\t{GRADE_NAMES[row.grade]}\t"
            f"{row.minimum:.6f}\t{row.q1:.6f}\t{row.median:.6f}\t"
            f"{row.q3:.6f}\t{row.maximum:.6f}\t{row.mean:.6f}\t{row.count}"
        )
    return "\n".join(lines) + "\n"


def format_scored_pairs(pairs: Sequence[GradedPair]) -> str:
    lines = [f"{p.query}\t{p.ad}\t{p.grade}\t{p.score:.6f}" for p in pairs]
    return "\n".join(lines) + ("\n" if lines else "")


def parse_scored_pairs(text: str) -> list[GradedPair]:
    pairs = []
    for line in text.splitlines():
        if not line.strip():
            continue
        query, ad, grade, score = line.split("\t")
        pairs.append(GradedPair(query, ad, int(grade), float(score)))
    return pairs
