"""Acceptance gate: one test per acceptance criterion, stated tolerances.

Run with ``pytest tests/test_acceptance.py -v -s`` to see one
``ACCEPTANCE <name>: PASS`` line per criterion (failures surface as
ordinary pytest failures).
"""

from __future__ import annotations

import math
import time
from pathlib import Path

import numpy as np
import pytest

from search2vec.coldstart import AdCreative, anchor_phrases_vector, extract_ngrams
from search2vec.elastic import build_index, build_query_documents, match_tail_query
from search2vec.embeddings import EmbeddingTable, VectorSpace, cosine
from search2vec.evaluation import GradedPair, macro_ndcg, oauc
from search2vec.ps import InProcessTransport, partition_dims, run_distributed
from search2vec.retrieval import LshIndex, knn_exact, knn_lsh
from search2vec.sessions import dwell_weight
from search2vec.trainer import (
    LABEL_IMPLICIT_NEGATIVE,
    LABEL_NEGATIVE,
    LABEL_POSITIVE,
    TrainingConfig,
    WeightedPair,
    sgd_step,
    train_embeddings,
)
from search2vec.vocab import build_vocabulary

from conftest import make_cluster_corpus, make_skip_corpus
from test_coldstart import oracle_content_vector
from test_elastic import HEADS, clustered_query_space
from test_evaluation import ndcg_oracle, oauc_oracle
from test_retrieval import brute_force_oracle
from test_trainer import finite_difference, term_value
from pipeline_helpers import GOLDEN_DIR, PIPELINE_OUTPUTS, run_fixture_pipeline


def report(name: str) -> None:
    print(f"ACCEPTANCE {name}: PASS")


def equivalence_corpus(seed=5):
    """200 synthetic sessions over a ~50-token vocabulary."""
    sessions, _ = make_cluster_corpus(
        n_clusters=5, queries_per=7, ads_per=3, n_sessions=200,
        session_len=5, seed=seed,
    )
    return sessions


def equivalence_config(**overrides):
    defaults = dict(
        dim=8, window=5, negatives=5, epochs=1, alpha=0.025, min_alpha=1e-4,
        subsample=0.0, min_count=1, batch_sessions=200, seed=17,
    )
    defaults.update(overrides)
    return TrainingConfig(**defaults)


class TestGradientCheck:
    def test_gradient_check(self):
        """100 random instances per label type, d <= 16, rel err < 1e-5."""
        start = time.monotonic()
        rng = np.random.default_rng(99)
        for label in (LABEL_POSITIVE, LABEL_NEGATIVE, LABEL_IMPLICIT_NEGATIVE):
            for _ in range(100):
                d = int(rng.integers(2, 17))
                table = EmbeddingTable(
                    rng.normal(scale=0.6, size=(4, d)),
                    rng.normal(scale=0.6, size=(4, d)),
                )
                weight = (
                    float(rng.uniform(0.2, 2.4)) if label == LABEL_POSITIVE else 1.0
                )
                pair = WeightedPair(0, 2, label, weight)
                alpha = 0.05
                center = table.input_vectors[0].copy()
                context = table.output_vectors[2].copy()
                sgd_step(table, pair, alpha)
                got_center = table.input_vectors[0] - center
                got_context = table.output_vectors[2] - context
                want_center = alpha * finite_difference(
                    lambda x: term_value(x, context, label, weight), center
                )
                want_context = alpha * finite_difference(
                    lambda x: term_value(center, x, label, weight), context
                )
                for got, want in ((got_center, want_center), (got_context, want_context)):
                    rel = np.linalg.norm(got - want) / max(np.linalg.norm(want), 1e-30)
                    assert rel < 1e-5
        elapsed = time.monotonic() - start
        assert elapsed < 10.0, f"gradient check took {elapsed:.1f}s"
        report("gradient-check")


class TestDistributedEquivalence:
    def test_distributed_equivalence(self):
        """shards=4 within 1e-6 of the reference after 1 epoch; shards=1
        bit-exact; 200-session corpus, |V| ~ 50, d = 8; < 60 s."""
        start = time.monotonic()
        sessions = equivalence_corpus()
        config = equivalence_config()
        vocab = build_vocabulary(sessions, config.min_count)
        assert 45 <= len(vocab) <= 55

        reference, _, _ = train_embeddings(sessions, config, vocab)

        sharded, _, _ = run_distributed(
            sessions, config, n_shards=4, n_clients=1, vocab=vocab
        )
        np.testing.assert_allclose(
            sharded.input_vectors, reference.input_vectors, atol=1e-6
        )
        np.testing.assert_allclose(
            sharded.output_vectors, reference.output_vectors, atol=1e-6
        )

        single, _, _ = run_distributed(
            sessions, config, n_shards=1, n_clients=1, vocab=vocab
        )
        assert np.array_equal(single.input_vectors, reference.input_vectors)
        assert np.array_equal(single.output_vectors, reference.output_vectors)

        elapsed = time.monotonic() - start
        assert elapsed < 60.0, f"equivalence run took {elapsed:.1f}s"
        report("distributed-equivalence")


class TestDotDecomposition:
    def test_dot_decomposition(self):
        """Sum of shard partials equals the direct dot within 1e-12 on
        1000 random pairs for S in {1, 2, 3, 7, 10}."""
        rng = np.random.default_rng(4)
        d = 30
        vectors = rng.normal(size=(1000, 2, d))
        for n_shards in (1, 2, 3, 7, 10):
            slices = partition_dims(d, n_shards)
            for u, v in vectors:
                partial_sum = sum(
                    float(np.dot(u[s.lo : s.hi], v[s.lo : s.hi])) for s in slices
                )
                assert abs(partial_sum - float(np.dot(u, v))) <= 1e-12
        report("dot-decomposition")

    def test_worked_partition_example(self):
        """d = 300 over 10 shards gives slices [30s, 30s + 30) exactly."""
        slices = partition_dims(300, 10)
        for s, dim_slice in enumerate(slices):
            assert (dim_slice.lo, dim_slice.hi) == (30 * s, 30 * s + 30)
        report("dot-decomposition-worked-example")


class TestWireFrugality:
    def test_wire_frugality(self):
        """Per-batch training traffic is identical for d = 8 and d = 128."""
        sessions = equivalence_corpus(seed=6)[:60]
        counters = {}

        def capture(name):
            def factory(shards):
                transport = InProcessTransport(shards)
                counters[name] = transport.counter
                return transport

            return factory

        for name, dim in (("d8", 8), ("d128", 128)):
            config = equivalence_config(dim=dim, batch_sessions=20)
            run_distributed(sessions, config, n_shards=2, transport=capture(name))
        small = counters["d8"].training_traffic()
        large = counters["d128"].training_traffic()
        assert small == large
        assert sum(small.values()) > 0
        report("wire-frugality")


class TestSemanticRecovery:
    def test_semantic_recovery(self):
        """5 clusters of 20 queries + 10 ads, within-cluster p = 0.9,
        10 epochs: nearest-ad precision@1 >= 0.9 in >= 9 of 10 seeds,
        < 2 minutes."""
        start = time.monotonic()
        passes = 0
        for seed in range(10):
            sessions, cluster_of = make_cluster_corpus(
                n_clusters=5, queries_per=20, ads_per=10, n_sessions=400,
                session_len=6, p_within=0.9, seed=100 + seed,
            )
            config = TrainingConfig(
                dim=16, window=3, negatives=3, epochs=10, alpha=0.05,
                min_alpha=1e-3, subsample=0.0, min_count=1,
                batch_sessions=200, seed=seed,
            )
            table, vocab, _ = train_embeddings(sessions, config)
            ad_rows = [i for i, t in enumerate(vocab.tokens) if t.startswith("a:")]
            ad_matrix = table.input_vectors[ad_rows]
            ad_norms = np.linalg.norm(ad_matrix, axis=1)
            ad_labels = [cluster_of[vocab.tokens[i][2:]] for i in ad_rows]
            correct = total = 0
            for i, token in enumerate(vocab.tokens):
                if not token.startswith("q:"):
                    continue
                query_vec = table.input_vectors[i]
                sims = ad_matrix @ query_vec / (ad_norms * np.linalg.norm(query_vec))
                correct += ad_labels[int(np.argmax(sims))] == cluster_of[token[2:]]
                total += 1
            passes += (correct / total) >= 0.9
        elapsed = time.monotonic() - start
        assert passes >= 9, f"only {passes}/10 seeds reached precision@1 >= 0.9"
        assert elapsed < 120.0, f"semantic recovery took {elapsed:.1f}s"
        report("semantic-recovery")


class TestImplicitNegativeEffect:
    def test_implicit_negative_effect(self):
        """Planted skip pairs score strictly lower with the implicit
        channel enabled in >= 9 of 10 seeds."""
        wins = 0
        for seed in range(10):
            sessions, planted = make_skip_corpus(seed=300 + seed)
            vocab = build_vocabulary(sessions, 1)
            base = dict(
                dim=16, window=2, negatives=2, epochs=12, alpha=0.04,
                min_alpha=1e-4, subsample=0.0, min_count=1,
                batch_sessions=50, seed=seed,
            )
            with_skips, _, _ = train_embeddings(
                sessions, TrainingConfig(**base, use_implicit_negatives=True), vocab
            )
            without, _, _ = train_embeddings(
                sessions, TrainingConfig(**base, use_implicit_negatives=False), vocab
            )

            def planted_cosine(table):
                return float(np.mean([
                    cosine(
                        table.input_vectors[vocab.id_of("q:" + q)],
                        table.input_vectors[vocab.id_of("a:" + ad)],
                    )
                    for q, ad in planted
                ]))

            wins += planted_cosine(with_skips) < planted_cosine(without)
        assert wins >= 9, f"implicit negatives lowered planted cosine in {wins}/10"
        report("implicit-negative-effect")


class TestDwellWeightValues:
    def test_dwell_weight_values(self):
        assert dwell_weight(0) == 0.0
        assert abs(dwell_weight(math.e - 1) - 1.0) < 1e-9
        for t in (10.0001, 11, 12, 60, 1e6):
            assert dwell_weight(t) == 1.0
        report("dwell-weight-values")


class TestColdStartAds:
    def test_cold_start_ads(self):
        """Algorithm output equals the brute-force filtered sum exactly;
        empty texts give the bare anchor; default threshold is 0.45."""
        rng = np.random.default_rng(12)
        tokens = ["anchor term"] + [f"w{i}" for i in range(10)] + [
            f"w{i} w{i + 1}" for i in range(9)
        ]
        queries = VectorSpace(tokens, rng.normal(size=(len(tokens), 6)))
        ad = AdCreative(
            "ad1", "w0 w1 w2 w3", "w5 w6 great and unknown", "shop.example.com/w7-w8",
            "anchor term",
        )
        made = anchor_phrases_vector(ad, queries, tau_c=0.2)
        want_vector, want_phrases = oracle_content_vector(ad, queries, 0.2)
        assert np.array_equal(made.vector, want_vector)
        assert [p for p, _ in made.contributing_phrases] == want_phrases

        bare = AdCreative("ad2", "", "", "", "anchor term")
        np.testing.assert_array_equal(
            anchor_phrases_vector(bare, queries).vector, queries.get("anchor term")
        )

        import inspect

        assert inspect.signature(anchor_phrases_vector).parameters["tau_c"].default == 0.45
        report("cold-start-ads")


class TestElasticMatching:
    def test_elastic_matching(self):
        """The demonstration tail query ranks its head first, and every
        head query retrieves itself when issued verbatim."""
        space, _ = clustered_query_space()
        documents = build_query_documents(HEADS, space, k=5)
        index = build_index(documents, k=5)
        matches = match_tail_query(
            index, "metropolitan opera house that is in new york city"
        )
        assert matches[0][0] == "metropolitan opera house"
        for head in HEADS:
            assert match_tail_query(index, head)[0][0] == head
        report("elastic-matching")


class TestMetrics:
    def test_metrics(self):
        """oAUC and macro NDCG match brute-force oracles exhaustively on
        instances of <= 8 judged ads; perfect ordering gives 1.0; the
        hand-computed NDCG example reproduces within 1e-4."""
        rng = np.random.default_rng(23)
        for _ in range(300):
            n = int(rng.integers(2, 9))
            pairs = [
                GradedPair(
                    "q", f"ad{i}", int(rng.integers(1, 6)),
                    float(rng.choice([0.1, 0.3, 0.3, 0.7, 0.9])),
                )
                for i in range(n)
            ]
            assert macro_ndcg(pairs) == pytest.approx(ndcg_oracle(pairs), rel=1e-12)
            if len({p.grade for p in pairs}) > 1:
                assert oauc(pairs) == pytest.approx(oauc_oracle(pairs), rel=1e-12)

        ordered = [
            GradedPair("q", f"ad{i}", g, s)
            for i, (g, s) in enumerate(
                [(5, 0.9), (4, 0.7), (3, 0.5), (2, 0.3), (1, 0.1)]
            )
        ]
        assert oauc(ordered) == 1.0
        assert macro_ndcg(ordered) == pytest.approx(1.0)

        flipped = [GradedPair("q", "a", 5, 0.1), GradedPair("q", "b", 1, 0.9)]
        assert macro_ndcg(flipped) == pytest.approx(0.6499, abs=1e-4)
        report("metrics")


class TestRetrieval:
    def test_retrieval_exact(self):
        """knn_exact equals the full-sort oracle on 100 random instances;
        defaults are K = 30, tau = 0.65."""
        rng = np.random.default_rng(31)
        for trial in range(100):
            n = int(rng.integers(5, 60))
            d = int(rng.integers(3, 10))
            space = VectorSpace(
                [f"ad{i:03d}" for i in range(n)], rng.normal(size=(n, d))
            )
            query = rng.normal(size=d)
            k = int(rng.integers(1, 12))
            tau = float(rng.uniform(-0.2, 0.6))
            got = knn_exact(query, space, k=k, tau=tau)
            want = brute_force_oracle(query, space, k=k, tau=tau)
            assert got.tokens() == [t for t, _ in want]
            for (_, a), (_, b) in zip(got.matches, want):
                assert a == pytest.approx(b, rel=1e-12)
        import inspect

        signature = inspect.signature(knn_exact)
        assert signature.parameters["k"].default == 30
        assert signature.parameters["tau"].default == 0.65
        report("retrieval-exact")

    def test_retrieval_lsh_recall(self):
        """LSH recall@10 vs exact on 10k random vectors (d = 8), default
        16 bits x 32 tables, pooled over 10 seeds, >= 0.9."""
        hits = total = 0
        for seed in range(10):
            data_rng = np.random.default_rng(1000 + seed)
            space = VectorSpace(
                [f"ad{i}" for i in range(10000)], data_rng.normal(size=(10000, 8))
            )
            index = LshIndex(seed=seed).build(space)
            assert (index.n_bits, index.n_tables) == (16, 32)
            query_rng = np.random.default_rng(2000 + seed)
            for _ in range(20):
                query = query_rng.normal(size=8)
                exact = set(knn_exact(query, space, k=10, tau=-1.0).tokens())
                approx = set(knn_lsh(query, index, k=10, tau=-1.0).tokens())
                hits += len(exact & approx)
                total += len(exact)
        recall = hits / total
        assert recall >= 0.9, f"pooled LSH recall@10 = {recall:.3f}"
        report("retrieval-lsh-recall")


class TestEndToEnd:
    def test_end_to_end_pipeline(self, tmp_path):
        """ingest -> train -> coldstart -> match -> eval on the bundled
        fixture reproduces the golden outputs byte for byte (seed 42),
        in under 5 minutes."""
        start = time.monotonic()
        produced = run_fixture_pipeline(tmp_path / "run")
        elapsed = time.monotonic() - start
        for name in PIPELINE_OUTPUTS:
            got = (produced / name).read_bytes()
            want = (GOLDEN_DIR / name).read_bytes()
            assert got == want, f"{name} differs from golden output"
        assert elapsed < 300.0, f"pipeline took {elapsed:.1f}s"
        report("end-to-end")
