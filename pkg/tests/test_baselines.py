from __future__ import annotations

import numpy as np
import pytest

from expertroute.baselines import (
    ActivationStats,
    EmbeddingIndex,
    average_activation_routers,
    best_individual,
    build_embedding_index,
    collect_activation_stats,
    embed_examples,
    merge_experts,
    merged_hooks,
    oracle_route,
    retrieve_expert,
    top_right_singular_vector,
)
from expertroute.errors import ConfigError, ConvergenceError, DomainError
from expertroute.experts import init_expert
from expertroute.rng import named_stream
from expertroute.routing import build_routers, routed_hooks, standardize

from test_routing import make_pool


# ------------------------------------------------------ avg activation


def test_mean_of_traces_standardizes_to_zero():
    # raw mean [2, 2] is constant -> standardized row is the zero vector
    stats = ActivationStats("e", {"s": np.array([2.0, 2.0])}, 2)
    np.testing.assert_array_equal(standardize(stats.site_means["s"]), np.zeros(2))


def test_collect_activation_stats_excludes_padding(frozen_backbone, small_suite):
    stats = collect_activation_stats(
        frozen_backbone, "heldin-0", small_suite.split("heldin-0", "train"),
        max_examples=40, seed=0,
    )
    assert stats.sample_count == 40
    for sid, site in frozen_backbone.sites.items():
        assert stats.site_means[sid].shape == (site.n,)
        assert np.all(np.isfinite(stats.site_means[sid]))


def test_avg_act_single_expert_routes_to_it(frozen_backbone, small_suite):
    pool = make_pool(frozen_backbone, 1)
    stats = [
        collect_activation_stats(
            frozen_backbone, pool[0].expert_id, small_suite.split("heldin-0", "train"),
            max_examples=20, seed=0,
        )
    ]
    stats[0].expert_id = pool[0].expert_id
    routers = average_activation_routers(pool, stats, frozen_backbone, k=1)
    u = named_stream(0, "q").normal(size=frozen_backbone.config.d_model)
    from expertroute.routing import route_token

    decision = route_token(routers["encoder.0.attn.q"], u)
    assert decision.selected == [pool[0].expert_id]
    np.testing.assert_array_equal(decision.weights, [1.0])


def test_avg_act_shares_inference_path_with_gate_router(frozen_backbone):
    # inject learned-gate rows into the avg-act construction: decisions match bit-exactly
    pool = make_pool(frozen_backbone, 3)
    gate_routers = build_routers(pool, frozen_backbone, k=2)
    stats = [
        ActivationStats(e.expert_id, {sid: e.gates[sid].data for sid in e.gates}, 1)
        for e in pool
    ]
    injected = average_activation_routers(pool, stats, frozen_backbone, k=2)
    rng = named_stream(1, "shared-path")
    for sid in ("encoder.0.attn.q", "decoder.0.ff.up"):
        u = rng.normal(size=(2, 3, frozen_backbone.sites[sid].n))
        a = gate_routers[sid].affinities(u)
        b = injected[sid].affinities(u)
        np.testing.assert_array_equal(a, b)
        np.testing.assert_array_equal(
            gate_routers[sid].select(a), injected[sid].select(b)
        )


def test_empty_trace_errors(frozen_backbone, small_suite):
    from expertroute.taskgen import ExampleSet

    with pytest.raises(ConfigError):
        collect_activation_stats(
            frozen_backbone, "e", ExampleSet("t", "train", []), max_examples=5, seed=0
        )


# ---------------------------------------------------------------- arrow


def test_arrow_2x2_case():
    b = np.array([[1.0], [0.0]])
    a = np.array([[0.0, 2.0]])
    v = top_right_singular_vector(b @ a)
    np.testing.assert_allclose(np.abs(v), [0.0, 1.0], atol=1e-8)


def test_arrow_sign_is_irrelevant_for_scoring():
    rng = named_stream(2, "arrow")
    u = rng.normal(size=8)
    v = rng.normal(size=8)
    assert abs(abs(v @ u) - abs((-v) @ u)) < 1e-15


def test_power_iteration_matches_svd_oracle_on_random_sites():
    rng = named_stream(3, "arrow-oracle")
    for _ in range(50):
        n = int(rng.integers(4, 33))
        d = int(rng.integers(4, 33))
        r = int(rng.integers(1, 5))
        delta = rng.normal(size=(d, r)) @ rng.normal(size=(r, n))
        v_power = top_right_singular_vector(delta)
        _, _, vt = np.linalg.svd(delta)
        cos = abs(float(v_power @ vt[0]))
        assert cos > 0.999


def test_power_iteration_zero_matrix_errors():
    with pytest.raises(ConvergenceError):
        top_right_singular_vector(np.zeros((4, 6)))


# ------------------------------------------------------------ retrieval


def test_retrieval_exact_match_wins(frozen_backbone, small_suite):
    pool = make_pool(frozen_backbone, 2)
    train_sets = {
        pool[0].expert_id: small_suite.split("heldin-0", "train"),
        pool[1].expert_id: small_suite.split("heldin-1", "train"),
    }
    index = build_embedding_index(frozen_backbone, pool, train_sets, max_per_expert=25, seed=0)
    # query identical to a stored example of expert x1
    query_input = small_suite.split("heldin-1", "train").examples[0].input_ids
    q = embed_examples(frozen_backbone, [query_input])[0]
    assert retrieve_expert(index, q) == pool[1].expert_id


def test_retrieval_single_expert_index(frozen_backbone, small_suite):
    pool = make_pool(frozen_backbone, 1)
    index = build_embedding_index(
        frozen_backbone, pool, {pool[0].expert_id: small_suite.split("heldin-0", "train")},
        max_per_expert=10, seed=0,
    )
    q = named_stream(4, "q").normal(size=frozen_backbone.config.d_model)
    assert retrieve_expert(index, q) == pool[0].expert_id


def test_retrieval_nearest_cluster_wins():
    # two clusters at a wide angle; brute-force nearest neighbour oracle
    rng = named_stream(5, "clusters")
    a = np.array([1.0, 0.0, 0.0]) + 0.01 * rng.normal(size=(10, 3))
    b = np.array([0.0, 1.0, 0.0]) + 0.01 * rng.normal(size=(10, 3))
    index = EmbeddingIndex(
        ["ea", "eb"],
        np.concatenate([a, b]),
        np.array([0] * 10 + [1] * 10),
    )
    query = np.array([0.9, 0.1, 0.0])
    stored = np.concatenate([a, b])
    sims = stored @ query / (np.linalg.norm(stored, axis=1) * np.linalg.norm(query))
    brute = "ea" if int(np.argmax(sims)) < 10 else "eb"
    assert retrieve_expert(index, query) == brute == "ea"


def test_retrieval_zero_norm_rejected():
    index = EmbeddingIndex(["e"], np.ones((2, 3)), np.zeros(2, dtype=int))
    with pytest.raises(DomainError):
        retrieve_expert(index, np.zeros(3))


# -------------------------------------------------------------- merging


def test_merge_identical_experts_is_fixed_point(frozen_backbone):
    pool = make_pool(frozen_backbone, 3)
    for e in pool[1:]:
        for sid in e.sites:
            e.sites[sid].A.data = pool[0].sites[sid].A.data.copy()
            e.sites[sid].B.data = pool[0].sites[sid].B.data.copy()
    merged = merge_experts(pool)
    for sid in pool[0].sites:
        expected = pool[0].sites[sid].B.data @ pool[0].sites[sid].A.data
        np.testing.assert_allclose(merged.deltas[sid], expected, atol=1e-12)


def test_merge_is_elementwise_mean_of_dense_deltas(frozen_backbone):
    pool = make_pool(frozen_backbone, 2)
    merged = merge_experts(pool)
    for sid in pool[0].sites:
        d1 = pool[0].sites[sid].B.data @ pool[0].sites[sid].A.data
        d2 = pool[1].sites[sid].B.data @ pool[1].sites[sid].A.data
        np.testing.assert_allclose(merged.deltas[sid], (d1 + d2) / 2, atol=1e-12)


def test_merge_permutation_invariant(frozen_backbone):
    pool = make_pool(frozen_backbone, 3)
    m1 = merge_experts(pool)
    m2 = merge_experts(pool[::-1])
    for sid in m1.deltas:
        np.testing.assert_allclose(m1.deltas[sid], m2.deltas[sid], atol=1e-12)


def test_merged_rank_can_exceed_individual_rank(frozen_backbone):
    # two rank-1 updates with independent row/column spaces sum to rank 2
    pool = make_pool(frozen_backbone, 2)
    sid = "encoder.0.attn.q"
    site = frozen_backbone.sites[sid]
    for e, (i, j) in zip(pool, [(0, 0), (1, 1)]):
        a = np.zeros((e.rank, site.n))
        b = np.zeros((site.d, e.rank))
        a[0, i] = 1.0
        b[j, 0] = 1.0
        e.sites[sid].A.data = a
        e.sites[sid].B.data = b
    merged = merge_experts(pool)
    assert np.linalg.matrix_rank(merged.deltas[sid]) == 2 > 1


def test_merge_param_average_mode(frozen_backbone):
    pool = make_pool(frozen_backbone, 2)
    merged = merge_experts(pool, mode="parameter-average")
    sid = "encoder.0.ff.up"
    a_bar = (pool[0].sites[sid].A.data + pool[1].sites[sid].A.data) / 2
    b_bar = (pool[0].sites[sid].B.data + pool[1].sites[sid].B.data) / 2
    np.testing.assert_allclose(merged.deltas[sid], b_bar @ a_bar, atol=1e-12)


def test_merge_site_coverage_mismatch(frozen_backbone):
    pool = make_pool(frozen_backbone, 2)
    del pool[1].sites["encoder.0.attn.q"]
    with pytest.raises(ConfigError):
        merge_experts(pool)


def test_merged_hook_applies_dense_delta(frozen_backbone):
    pool = make_pool(frozen_backbone, 2)
    merged = merge_experts(pool)
    hooks = merged_hooks(frozen_backbone, merged)
    ids = np.array([[1, 4, 4, 20, 2]])
    dec = np.array([[1, 20]])
    out, _ = frozen_backbone.forward(ids, dec, hooks=hooks)
    base, _ = frozen_backbone.forward(ids, dec)
    assert not np.array_equal(out.data, base.data)


# ------------------------------------------------- oracle / individual


def test_oracle_argmax_and_ties():
    assert oracle_route({"e1": 0.9, "e2": 0.5}) == "e1"
    assert oracle_route({"e1": 0.5, "e2": 0.5}) == "e1"  # tie -> lowest index
    with pytest.raises(ConfigError):
        oracle_route({})


def test_oracle_dominates_each_expert():
    scores = {"a": 0.4, "b": 0.7, "c": 0.1}
    assert scores[oracle_route(scores)] >= max(scores.values())


def test_best_individual_mean_selection():
    table = {
        "d1": {"a": 0.2, "b": 0.6},
        "d2": {"a": 0.8, "b": 0.5},
    }
    assert best_individual(table) == "b"  # 0.55 > 0.5
    assert best_individual({"d1": {"a": 0.3, "b": 0.2}}) == oracle_route({"a": 0.3, "b": 0.2})
