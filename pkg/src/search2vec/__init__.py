"""Joint query/ad/link embeddings from search sessions.

Training (single-process and parameter-server), cold-start vectors for
new ads and tail queries, broad-match retrieval, and relevance metrics.
"""

from .coldstart import (
    AdCreative,
    AnchorPhraseVectorizer,
    ContentVector,
    anchor_phrases_vector,
    extract_ngrams,
    resolve_anchor,
)
from .elastic import (
    ElasticQueryMatcher,
    InvertedIndex,
    QueryDocument,
    build_query_documents,
    match_tail_query,
)
from .embeddings import EmbeddingTable, VectorSpace, cosine, init_embeddings
from .evaluation import (
    GradedPair,
    grade_score_distribution,
    macro_ndcg,
    ndcg_curve,
    oauc,
    score_dataset,
)
from .ps import (
    DimSlice,
    ParameterServerEmbedder,
    TrainingAborted,
    partition_dims,
    run_distributed,
)
from .retrieval import BroadMatchRetriever, LshIndex, MatchResult, knn_exact, knn_lsh
from .sessions import (
    Action,
    AdImpression,
    ImplicitNegativePair,
    RawEvent,
    Session,
    dwell_weight,
    extract_implicit_negatives,
    segment_sessions,
)
from .trainer import SkipGramEmbedder, TrainingConfig, WeightedPair, train
from .vocab import Vocabulary, build_vocabulary, keep_probability

__all__ = [
    "Action",
    "AdCreative",
    "AdImpression",
    "AnchorPhraseVectorizer",
    "BroadMatchRetriever",
    "ContentVector",
    "DimSlice",
    "ElasticQueryMatcher",
    "EmbeddingTable",
    "GradedPair",
    "ImplicitNegativePair",
    "InvertedIndex",
    "LshIndex",
    "MatchResult",
    "ParameterServerEmbedder",
    "QueryDocument",
    "RawEvent",
    "Session",
    "SkipGramEmbedder",
    "TrainingAborted",
    "TrainingConfig",
    "VectorSpace",
    "Vocabulary",
    "WeightedPair",
    "anchor_phrases_vector",
    "build_query_documents",
    "build_vocabulary",
    "cosine",
    "dwell_weight",
    "extract_implicit_negatives",
    "extract_ngrams",
    "grade_score_distribution",
    "init_embeddings",
    "keep_probability",
    "knn_exact",
    "knn_lsh",
    "macro_ndcg",
    "match_tail_query",
    "ndcg_curve",
    "oauc",
    "partition_dims",
    "resolve_anchor",
    "run_distributed",
    "score_dataset",
    "segment_sessions",
    "train",
]
