from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from expertroute import tensor as T
from expertroute.errors import ConfigError, ShapeError
from expertroute.experts import init_expert, lora_hooks
from expertroute.rng import named_stream
from expertroute.routing import (
    SCORE_ABSDOT,
    RoutingTrace,
    SiteRouter,
    build_router,
    build_routers,
    route_token,
    routed_hooks,
    standardize,
)


def make_pool(backbone, n_experts, seed0=20):
    pool = []
    rng = named_stream(99, "pool")
    for i in range(n_experts):
        e = init_expert(backbone, rank=2, seed=seed0 + i, expert_id=f"x{i}")
        for sid in e.sites:
            site = backbone.sites[sid]
            e.sites[sid].B.data = 0.2 * rng.normal(size=(site.d, e.rank))
            e.gates[sid].data = rng.normal(size=site.n)
        pool.append(e)
    return pool


# ----------------------------------------------------------- standardize


def test_standardize_direct_case():
    out = standardize(np.array([1.0, 2.0, 3.0]))
    np.testing.assert_allclose(out, [-1.2247, 0.0, 1.2247], atol=1e-4)
    assert abs(out.mean()) < 1e-12
    np.testing.assert_allclose(out.std(), 1.0, atol=1e-12)


def test_standardize_constant_vector_is_zero():
    np.testing.assert_array_equal(standardize(np.array([5.0, 5.0, 5.0])), np.zeros(3))


def test_standardize_idempotent():
    rng = named_stream(1, "std")
    x = rng.normal(size=16)
    once = standardize(x)
    np.testing.assert_allclose(standardize(once), once, atol=1e-10)


def test_standardize_rejects_scalar_width():
    with pytest.raises(ShapeError):
        standardize(np.array([1.0]))


# ---------------------------------------------------------- site router


def test_build_router_rows_are_standardized(frozen_backbone):
    pool = make_pool(frozen_backbone, 3)
    router = build_router(pool, "encoder.0.attn.q", k=2)
    for row in router.gate_rows:
        assert abs(row.mean()) < 1e-8
        np.testing.assert_allclose(row.std(), 1.0, atol=1e-8)
    assert router.expert_order == ["x0", "x1", "x2"]


def test_build_router_contracts(frozen_backbone):
    pool = make_pool(frozen_backbone, 2)
    with pytest.raises(ConfigError):
        build_router(pool, "encoder.0.attn.q", k=3)  # k > pool
    with pytest.raises(ConfigError):
        build_router([], "encoder.0.attn.q", k=1)
    del pool[1].gates["encoder.0.attn.q"]
    with pytest.raises(ConfigError):
        build_router(pool, "encoder.0.attn.q", k=1)


def test_affinity_direct_dot_product():
    router = SiteRouter(
        site_id="s",
        expert_order=["a"],
        gate_rows=standardize(np.array([[0.0, 2.0]])),
        n=2,
        k=1,
    )
    decision = route_token(router, np.array([0.0, 4.0]))
    np.testing.assert_allclose(decision.affinities, [2.0], atol=1e-10)
    assert decision.selected == ["a"]
    np.testing.assert_array_equal(decision.weights, [1.0])


def test_topk_selection_ordering():
    router = SiteRouter(
        site_id="s",
        expert_order=["a", "b", "c"],
        gate_rows=np.zeros((3, 4)),
        n=4,
        k=2,
    )
    sel = router.select(np.array([3.0, 1.0, 2.5]))
    assert [router.expert_order[i] for i in sel] == ["a", "c"]


def test_topk_tie_breaks_to_lower_index():
    router = SiteRouter(
        site_id="s", expert_order=["a", "b", "c"], gate_rows=np.zeros((3, 4)), n=4, k=2
    )
    sel = router.select(np.array([1.0, 1.0, 1.0]))
    assert list(sel) == [0, 1]


def test_weights_match_softmax_over_scaled_affinities():
    router = SiteRouter(
        site_id="s", expert_order=["a", "b"], gate_rows=np.zeros((2, 4)), n=4, k=2
    )
    w = router.weights(np.array([2.0, 0.0]))  # logits 1.0, 0.0
    np.testing.assert_allclose(w, [0.7311, 0.2689], atol=1e-4)
    assert abs(w.sum() - 1.0) < 1e-12


def test_affinity_bound_and_self_affinity():
    rng = named_stream(2, "bound")
    n = 64
    for _ in range(50):
        v, u = rng.normal(size=n), rng.normal(size=n)
        alpha = float(standardize(v) @ standardize(u))
        assert abs(alpha) <= n + 1e-9
    x = rng.normal(size=n) * 3.0 + 1.0
    self_affinity = float(standardize(x) @ standardize(x))
    assert abs(self_affinity - n) < 1e-8


def test_decisions_invariant_to_affine_activation_transforms(frozen_backbone):
    pool = make_pool(frozen_backbone, 4)
    router = build_router(pool, "decoder.0.self.q", k=2)
    rng = named_stream(3, "affine")
    for _ in range(20):
        u = rng.normal(size=router.n)
        a, b = float(rng.uniform(0.1, 10.0)), float(rng.normal() * 5)
        d0 = route_token(router, u)
        d1 = route_token(router, a * u + b)
        assert d0.selected == d1.selected
        np.testing.assert_allclose(d0.weights, d1.weights, atol=1e-10)
        np.testing.assert_allclose(d0.affinities, d1.affinities, atol=1e-10)


@settings(max_examples=60, deadline=None)
@given(
    st.lists(st.floats(-5, 5), min_size=3, max_size=6),
    st.integers(min_value=1, max_value=3),
    st.floats(0.1, 10.0),
)
def test_topk_monotone_in_own_affinity(alphas, k, boost):
    alpha = np.asarray(alphas)
    k = min(k, alpha.size)
    router = SiteRouter(
        site_id="s",
        expert_order=[str(i) for i in range(alpha.size)],
        gate_rows=np.zeros((alpha.size, 4)),
        n=4,
        k=k,
    )
    sel = set(router.select(alpha).tolist())
    for z in list(sel):
        bumped = alpha.copy()
        bumped[z] += boost
        assert z in set(router.select(bumped).tolist())


def test_full_probabilities_properties(frozen_backbone):
    pool = make_pool(frozen_backbone, 5)
    router = build_router(pool, "encoder.0.ff.up", k=2)
    rng = named_stream(4, "probs")
    u = rng.normal(size=(3, 4, router.n))
    probs = router.full_probabilities(u)
    np.testing.assert_allclose(probs.sum(axis=-1), 1.0, atol=1e-12)
    assert (probs > 0).all()
    alpha = router.affinities(u)
    np.testing.assert_array_equal(
        probs.argmax(axis=-1), router.select(alpha)[..., 0]
    )


def test_identical_gates_give_uniform_probabilities():
    rows = np.tile(standardize(np.arange(6.0)), (3, 1))
    router = SiteRouter(site_id="s", expert_order=list("abc"), gate_rows=rows, n=6, k=1)
    probs = router.full_probabilities(np.arange(6.0)[None, None])
    np.testing.assert_allclose(probs[0, 0], [1 / 3] * 3, atol=1e-12)


# ----------------------------------------------------------- mixed hook


def forward_with(backbone, hooks, ids, dec):
    logits, _ = backbone.forward(ids, dec, hooks=hooks)
    return logits.data


def test_single_expert_routing_equals_plain_lora(frozen_backbone):
    pool = make_pool(frozen_backbone, 1)
    routers = build_routers(pool, frozen_backbone, k=1)
    ids = np.array([[1, 4, 4, 20, 21, 2]])
    dec = np.array([[1, 20, 21]])
    routed = forward_with(frozen_backbone, routed_hooks(frozen_backbone, routers, pool), ids, dec)
    plain = forward_with(frozen_backbone, lora_hooks(frozen_backbone, pool[0]), ids, dec)
    np.testing.assert_array_equal(routed, plain)


def test_identical_experts_make_split_irrelevant(frozen_backbone):
    pool = make_pool(frozen_backbone, 2)
    for sid in pool[0].sites:
        pool[1].sites[sid].A.data = pool[0].sites[sid].A.data.copy()
        pool[1].sites[sid].B.data = pool[0].sites[sid].B.data.copy()
    routers = build_routers(pool, frozen_backbone, k=2)
    ids = np.array([[1, 5, 5, 22, 23, 2]])
    dec = np.array([[1, 22, 23]])
    routed = forward_with(frozen_backbone, routed_hooks(frozen_backbone, routers, pool), ids, dec)
    plain = forward_with(frozen_backbone, lora_hooks(frozen_backbone, pool[0]), ids, dec)
    np.testing.assert_allclose(routed, plain, atol=1e-12)


def test_two_expert_mixing_is_convex_combination(frozen_backbone):
    site_id = "encoder.0.attn.q"
    site = frozen_backbone.sites[site_id]
    pool = make_pool(frozen_backbone, 2)
    router = build_routers(pool, frozen_backbone, k=2)[site_id]
    rng = named_stream(5, "mix")
    u = rng.normal(size=(1, 1, site.n))
    from expertroute.routing import routed_forward_hook

    base = T.constant(np.zeros((1, 1, site.d)))
    mixed = routed_forward_hook(site, router, pool)(T.Tensor(u), base, site).data

    alpha = router.affinities(u[0, 0])
    w = router.weights(alpha[router.select(alpha)])
    deltas = [
        (u[0, 0] @ e.sites[site_id].A.data.T) @ e.sites[site_id].B.data.T for e in pool
    ]
    order = router.select(alpha)
    expected = w[0] * deltas[order[0]] + w[1] * deltas[order[1]]
    np.testing.assert_allclose(mixed[0, 0], expected, atol=1e-12)


def test_absdot_mode_ignores_gate_sign():
    rng = named_stream(6, "absdot")
    rows = rng.normal(size=(2, 8))
    r_pos = SiteRouter("s", ["a", "b"], rows, n=8, k=1, score_mode=SCORE_ABSDOT)
    r_neg = SiteRouter("s", ["a", "b"], -rows, n=8, k=1, score_mode=SCORE_ABSDOT)
    u = rng.normal(size=8)
    np.testing.assert_allclose(r_pos.affinities(u), r_neg.affinities(u), atol=1e-12)


def test_routing_trace_aggregation(frozen_backbone):
    site = frozen_backbone.sites["encoder.0.attn.q"]
    trace = RoutingTrace(["a", "b"])
    probs = np.array([[[0.9, 0.1], [0.5, 0.5]]])  # one sequence, two tokens
    trace.set_batch_masks(np.ones((1, 2)), np.ones((1, 1)))
    trace.record(site, probs, np.array([[0, 0]]))
    mean = trace.mean_probabilities()[site.site_id]
    np.testing.assert_allclose(mean, [0.7, 0.3], atol=1e-12)
    np.testing.assert_allclose(trace.top1_fractions()[site.site_id], [1.0, 0.0])


def test_routing_trace_respects_mask(frozen_backbone):
    site = frozen_backbone.sites["encoder.0.attn.q"]
    trace = RoutingTrace(["a", "b"])
    probs = np.array([[[0.9, 0.1], [0.0, 1.0]]])
    trace.set_batch_masks(np.array([[1.0, 0.0]]), np.ones((1, 1)))  # second token is pad
    trace.record(site, probs, np.array([[0, 1]]))
    np.testing.assert_allclose(trace.mean_probabilities()[site.site_id], [0.9, 0.1])
