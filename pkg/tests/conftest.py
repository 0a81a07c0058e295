"""Shared corpus builders for the test suite."""

from __future__ import annotations

import numpy as np
import pytest

from search2vec.sessions import Action, AdImpression, Session


def make_session(user, specs, impressions=()):
    """Session from compact specs: ("q", text) | ("a", ad_id, dwell) | ("l", id)."""
    actions = []
    for spec in specs:
        if spec[0] == "q":
            actions.append(Action("query", spec[1]))
        elif spec[0] == "a":
            actions.append(Action("ad", spec[1], spec[2] if len(spec) > 2 else 30))
        elif spec[0] == "l":
            actions.append(Action("link", spec[1]))
        else:
            raise ValueError(f"unknown action spec {spec!r}")
    return Session(user, actions, list(impressions))


def make_cluster_corpus(
    n_clusters=5,
    queries_per=20,
    ads_per=10,
    n_sessions=250,
    session_len=5,
    p_within=0.9,
    seed=7,
):
    """Sessions whose tokens come from latent topic clusters.

    Returns (sessions, cluster_of_token) where cluster_of_token maps the
    raw token (query text or ad id) to its cluster index.
    """
    rng = np.random.default_rng(seed)
    queries = [
        [f"q{c}x{i}" for i in range(queries_per)] for c in range(n_clusters)
    ]
    ads = [[f"ad{c}x{i}" for i in range(ads_per)] for c in range(n_clusters)]
    cluster_of = {}
    for c in range(n_clusters):
        for q in queries[c]:
            cluster_of[q] = c
        for a in ads[c]:
            cluster_of[a] = c

    sessions = []
    for s in range(n_sessions):
        home = int(rng.integers(n_clusters))
        specs = []
        for _ in range(session_len):
            c = home if rng.random() < p_within else int(rng.integers(n_clusters))
            if rng.random() < 1 / 3:
                specs.append(("a", ads[c][int(rng.integers(ads_per))], 60))
            else:
                specs.append(("q", queries[c][int(rng.integers(queries_per))]))
        sessions.append(make_session(f"u{s}", specs))
    return sessions, cluster_of


def make_skip_corpus(n_sessions=100, n_skip_sessions=120, seed=11):
    """Cluster corpus plus sessions planting (q_skip, ad_skip) only in the
    implicit-negative channel: ad_skip is shown above the clicked ad but
    never co-occurs with the query as a positive context. Two ads per
    cluster keep the skipped ads' output vectors densely trained.
    """
    sessions, cluster_of = make_cluster_corpus(
        n_clusters=2, queries_per=6, ads_per=2, n_sessions=n_sessions,
        session_len=4, seed=seed,
    )
    planted = []
    # one cluster-0 query repeatedly skips the same two cluster-1 ads:
    # those pairs interact only through the impression blocks
    query = "q0x0"
    for i in range(n_skip_sessions):
        first, second = "ad1x0", "ad1x1"
        clicked = f"ad0x{i % 2}"
        planted.extend([(query, first), (query, second)])
        sessions.append(
            make_session(
                f"skip{i}",
                [("q", query), ("a", clicked, 25)],
                impressions=[(0, AdImpression((first, second, clicked), 3))],
            )
        )
    return sessions, sorted(set(planted))


@pytest.fixture
def cluster_corpus():
    return make_cluster_corpus()
