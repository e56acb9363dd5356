"""Profiling: projection, density clustering, c-TF-IDF, MMR, persona."""

import math

import numpy as np
import pytest

from conftest import embed_chunks, make_chunk, make_gateway
from qaforge.errors import DegenerateInput, EmptyInput, ProfileError, ProtocolError
from qaforge.templates import GENERIC_DOMAIN, GENERIC_PERSONA
from qaforge.topics import (
    OUTLIER_CLUSTER_ID,
    TopicCluster,
    build_profile,
    cluster_density,
    ctfidf,
    format_topic_list,
    mmr_select,
    parse_domain_persona,
    project,
    synthesize_profile,
    tokenize,
)

DOMAIN_RESPONSE = (
    "<|#|>START<|#|>\n"
    "<|#|>Domain: nuclear power plant operations\n"
    "<|#|>Expert Role: reactor systems engineer\n"
    "<|#|>END<|#|>"
)


def test_tokenize_lowercases_and_drops_stopwords():
    assert tokenize("The Coolant and the PUMP-2 are critical") == [
        "coolant",
        "pump-2",
        "critical",
    ]


# ---------------------------------------------------------------------------
# projection


def test_project_requires_enough_vectors():
    with pytest.raises(DegenerateInput):
        project(np.eye(3), dimensions=3)  # needs dims + 1 vectors


def test_project_identical_vectors_flags_zero_variance():
    result = project(np.ones((5, 4)), dimensions=2)
    assert result.zero_variance is True
    assert np.all(result.points == 0.0)


def test_project_pads_rank_deficient_data_with_zeros():
    # Four collinear points have rank 1; the second axis must be zero.
    line = np.outer([0.0, 1.0, 2.0, 3.0], [1.0, 1.0, 0.0])
    result = project(line, dimensions=2)
    assert result.zero_variance is False
    assert np.allclose(result.points[:, 1], 0.0)
    assert not np.allclose(result.points[:, 0], 0.0)


def test_project_preserves_distances_on_exact_subspace():
    rng = np.random.default_rng(7)
    base = rng.normal(size=(6, 3))
    lift = np.hstack([base, np.zeros((6, 5))])  # exact 3-d subspace of R^8
    points = project(lift, dimensions=3).points
    for i in range(6):
        for j in range(i + 1, 6):
            original = np.linalg.norm(lift[i] - lift[j])
            projected = np.linalg.norm(points[i] - points[j])
            assert abs(original - projected) < 1e-6


def test_project_is_deterministic():
    rng = np.random.default_rng(3)
    data = rng.normal(size=(10, 6))
    a = project(data, 4).points
    b = project(data.copy(), 4).points
    assert np.array_equal(a, b)


# ---------------------------------------------------------------------------
# density clustering


def test_cluster_two_blobs_and_outlier():
    points = np.array(
        [
            [1.0, 0.0],
            [0.99, 0.05],
            [0.98, 0.08],
            [-1.0, 0.1],
            [-0.99, 0.12],
            [-0.98, 0.05],
            [0.0, -1.0],  # alone: outlier
        ]
    )
    clusters = cluster_density(points, eps=0.1, min_pts=3,
                               ids=[f"c{i}" for i in range(7)])
    by_id = {c.id: c.member_chunk_ids for c in clusters}
    assert by_id[0] == ["c0", "c1", "c2"]
    assert by_id[1] == ["c3", "c4", "c5"]
    assert by_id[OUTLIER_CLUSTER_ID] == ["c6"]


def test_clusters_partition_all_ids():
    rng = np.random.default_rng(0)
    points = rng.normal(size=(20, 3))
    ids = [f"c{i}" for i in range(20)]
    clusters = cluster_density(points, eps=0.3, min_pts=3, ids=ids)
    seen = [cid for c in clusters for cid in c.member_chunk_ids]
    assert sorted(seen) == sorted(ids)
    assert len(seen) == len(set(seen))


def test_identical_points_form_one_cluster():
    points = np.tile([0.5, 0.5], (4, 1))
    clusters = cluster_density(points, eps=0.1, min_pts=4)
    assert len(clusters) == 1
    assert clusters[0].id == 0
    assert clusters[0].mass == 4


def test_min_pts_above_population_gives_all_outliers():
    clusters = cluster_density(np.eye(3), eps=0.05, min_pts=4)
    assert len(clusters) == 1
    assert clusters[0].is_outlier_bucket


def test_euclidean_metric_supported():
    points = np.array([[0.0, 0.0], [0.1, 0.0], [5.0, 5.0]])
    clusters = cluster_density(points, eps=0.2, min_pts=2, metric="euclidean")
    by_id = {c.id: c.member_chunk_ids for c in clusters}
    assert by_id[0] == ["0", "1"]
    assert by_id[OUTLIER_CLUSTER_ID] == ["2"]


# ---------------------------------------------------------------------------
# c-TF-IDF


def test_ctfidf_hand_arithmetic():
    # tf(pump, c0) = 3, total frequency f(pump) = 4, mean tokens A = 10
    # => score = 3 * ln(1 + 10/4)
    c0 = TopicCluster(id=0, member_chunk_ids=["a"])
    c1 = TopicCluster(id=1, member_chunk_ids=["b"])
    tokens = {
        "a": ["pump"] * 3 + ["seal"] * 7,
        "b": ["pump"] * 1 + ["valve"] * 9,
    }
    scores = dict(ctfidf([c0, c1], tokens)[0])
    assert scores["pump"] == pytest.approx(3 * math.log(1 + 2.5), abs=1e-12)


def test_ctfidf_exclusive_term_scores_zero_elsewhere():
    c0 = TopicCluster(id=0, member_chunk_ids=["a"])
    c1 = TopicCluster(id=1, member_chunk_ids=["b"])
    tokens = {"a": ["unique", "shared"], "b": ["shared", "shared"]}
    scores = ctfidf([c0, c1], tokens)
    assert "unique" not in dict(scores[1])  # tf = 0 -> absent
    assert dict(scores[0])["unique"] > 0


def test_ctfidf_uniform_term_scores_equally():
    c0 = TopicCluster(id=0, member_chunk_ids=["a"])
    c1 = TopicCluster(id=1, member_chunk_ids=["b"])
    tokens = {"a": ["same"] * 5, "b": ["same"] * 5}
    scores = ctfidf([c0, c1], tokens)
    assert dict(scores[0])["same"] == dict(scores[1])["same"]


def test_ctfidf_sorted_descending_with_alpha_ties():
    c0 = TopicCluster(id=0, member_chunk_ids=["a"])
    tokens = {"a": ["beta", "alpha", "gamma", "gamma"]}
    ranked = ctfidf([c0], tokens)[0]
    assert ranked[0][0] == "gamma"
    assert [t for t, _ in ranked[1:]] == ["alpha", "beta"]  # tie -> alphabetical


# ---------------------------------------------------------------------------
# MMR


def test_mmr_lambda_one_is_relevance_topk():
    candidates = [("a", 0.2), ("b", 0.9), ("c", 0.5), ("d", 0.7)]
    out = mmr_select(candidates, k=3, lam=1.0, embeddings={})
    assert out == ["b", "d", "c"]


def test_mmr_k_one_takes_best_relevance():
    embeddings = {t: np.array([1.0, 0.0]) for t in "ab"}
    assert mmr_select([("a", 0.3), ("b", 0.8)], 1, 0.5, embeddings) == ["b"]


def test_mmr_excludes_near_duplicate():
    candidates = [("alpha", 1.0), ("alpha-copy", 0.95), ("gamma", 0.5)]
    embeddings = {
        "alpha": np.array([1.0, 0.0]),
        "alpha-copy": np.array([1.0, 0.0]),
        "gamma": np.array([0.0, 1.0]),
    }
    out = mmr_select(candidates, k=2, lam=0.5, embeddings=embeddings)
    assert out == ["alpha", "gamma"]

    # brute force over size-2 subsets of the same objective agrees
    def subset_score(pair):
        rel = dict(candidates)
        cos = float(embeddings[pair[0]] @ embeddings[pair[1]])
        return 0.5 * (rel[pair[0]] + rel[pair[1]]) - 0.5 * cos

    from itertools import combinations

    best = max(combinations([t for t, _ in candidates], 2), key=subset_score)
    assert sorted(best) == sorted(out)


def test_mmr_rejects_bad_lambda_and_duplicates():
    with pytest.raises(EmptyInput):
        mmr_select([("a", 1.0)], 1, 1.5, {})
    with pytest.raises(EmptyInput):
        mmr_select([("a", 1.0), ("a", 0.5)], 1, 0.5, {})


# ---------------------------------------------------------------------------
# domain / persona protocol


def test_parse_domain_persona_golden():
    domain, persona = parse_domain_persona(DOMAIN_RESPONSE)
    assert domain == "nuclear power plant operations"
    assert persona == "reactor systems engineer"


def test_parse_domain_persona_surrounding_chatter_ok():
    raw = "Sure, here you go:\n" + DOMAIN_RESPONSE + "\nHope that helps!"
    assert parse_domain_persona(raw)[0] == "nuclear power plant operations"


@pytest.mark.parametrize(
    "raw",
    [
        "Domain: x\nExpert Role: y",  # no START/END block
        "<|#|>START<|#|>\n<|#|>Domain: x\n<|#|>END<|#|>",  # missing role
        "<|#|>START<|#|>\n<|#|>Domain: \n<|#|>Expert Role: y\n<|#|>END<|#|>",
    ],
)
def test_parse_domain_persona_malformed(raw):
    with pytest.raises(ProtocolError):
        parse_domain_persona(raw)


def test_format_topic_list_orders_by_mass():
    clusters = [
        TopicCluster(id=0, member_chunk_ids=["a"], keywords=[("small", 1.0)]),
        TopicCluster(id=1, member_chunk_ids=["b", "c"], keywords=[("big", 2.0)]),
        TopicCluster(id=OUTLIER_CLUSTER_ID, member_chunk_ids=["d"]),
    ]
    listing = format_topic_list(clusters)
    assert listing.splitlines()[0] == "Topic 1 (2 chunks): big"
    assert "Topic -1" not in listing


def test_synthesize_profile_no_persona_uses_generics():
    gw = make_gateway([])
    clusters = [TopicCluster(id=0, member_chunk_ids=["a"])]
    profile = synthesize_profile(gw, clusters, no_persona=True)
    assert profile.domain == GENERIC_DOMAIN
    assert profile.persona == GENERIC_PERSONA
    assert profile.synthesized is False
    assert gw.calls_by_template == {}


def test_synthesize_profile_all_outliers_aborts():
    gw = make_gateway([])
    clusters = [TopicCluster(id=OUTLIER_CLUSTER_ID, member_chunk_ids=["a"])]
    with pytest.raises(ProfileError):
        synthesize_profile(gw, clusters)


def test_synthesize_profile_reprompts_once_then_succeeds():
    gw = make_gateway(
        [
            {"template_id": "domain_and_expert_from_topics", "match": "",
             "response": "not the protocol"},
            {"template_id": "domain_and_expert_from_topics", "match": "",
             "response": DOMAIN_RESPONSE},
        ]
    )
    clusters = [TopicCluster(id=0, member_chunk_ids=["a"], keywords=[("k", 1.0)])]
    profile = synthesize_profile(gw, clusters)
    assert profile.persona == "reactor systems engineer"
    assert gw.calls_by_template["domain_and_expert_from_topics"] == 2


def test_synthesize_profile_double_failure_aborts():
    gw = make_gateway(
        [
            {"template_id": "domain_and_expert_from_topics", "match": "",
             "response": "bad"},
            {"template_id": "domain_and_expert_from_topics", "match": "",
             "response": "still bad"},
        ]
    )
    clusters = [TopicCluster(id=0, member_chunk_ids=["a"])]
    with pytest.raises(ProfileError):
        synthesize_profile(gw, clusters)


# ---------------------------------------------------------------------------
# full profiling pass


def test_build_profile_two_vocabulary_groups():
    gw = make_gateway(
        [
            {
                "template_id": "domain_and_expert_from_topics",
                "match": "Topic 0",
                "response": DOMAIN_RESPONSE,
            }
        ]
    )
    chunks = [
        make_chunk(f"a{i}", f"reactor coolant loop pressure sensor {w}")
        for i, w in enumerate(["alpha", "beta", "gamma", "delta"])
    ] + [
        make_chunk(f"b{i}", f"ledger quarterly revenue audit column {w}")
        for i, w in enumerate(["one", "two", "three", "four"])
    ]
    embed_chunks(gw, chunks)
    profile = build_profile(gw, chunks, dimensions=2, eps=0.4, min_pts=3,
                            keywords_per_topic=4)
    assert profile.domain == "nuclear power plant operations"
    topic_of = profile.topic_of_chunk()
    assert len({topic_of[f"a{i}"] for i in range(4)}) == 1
    assert len({topic_of[f"b{i}"] for i in range(4)}) == 1
    assert topic_of["a0"] != topic_of["b0"]
    for cluster in profile.clusters:
        assert len(cluster.keywords) <= 4
        terms = [t for t, _ in cluster.keywords]
        assert len(terms) == len(set(terms))


def test_profile_round_trips_through_dict():
    clusters = [
        TopicCluster(id=0, member_chunk_ids=["a", "b"], keywords=[("k", 1.5)]),
        TopicCluster(id=OUTLIER_CLUSTER_ID, member_chunk_ids=["c"]),
    ]
    from qaforge.topics import CorpusProfile

    profile = CorpusProfile(domain="d", persona="p", clusters=clusters)
    restored = CorpusProfile.from_dict(profile.to_dict())
    assert restored.domain == "d"
    assert restored.clusters[0].keywords == [("k", 1.5)]
    assert restored.clusters[1].member_chunk_ids == ["c"]
