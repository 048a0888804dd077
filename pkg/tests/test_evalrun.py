from __future__ import annotations

import numpy as np
import pytest

from expertroute.errors import ConfigError, MissingArtifactError
from expertroute.evalrun import (
    EvalContext,
    EvalReport,
    dataset_accuracy,
    evaluate_method,
    expert_score_table,
    rank_classify,
    sequence_scores,
)
from expertroute.experts import lora_hooks
from expertroute.baselines import merge_experts
from expertroute.pipeline import stage_build_index, stage_build_router
from expertroute.config import RunConfig

from test_routing import make_pool


def ctx_with(frozen_backbone, small_suite, **kw):
    return EvalContext(backbone=frozen_backbone, suite=small_suite, **kw)


def test_rank_classify_tie_goes_to_lowest_index(frozen_backbone):
    gold = [20, 21, 2]
    idx = rank_classify(frozen_backbone, {}, [1, 4, 4, 20, 2], [gold, list(gold)])
    assert idx == 0


def test_rank_classify_requires_two_nonempty_choices(frozen_backbone):
    with pytest.raises(ConfigError):
        rank_classify(frozen_backbone, {}, [1, 2], [[2]])
    with pytest.raises(ConfigError):
        rank_classify(frozen_backbone, {}, [1, 2], [[2], []])


def test_mean_normalization_arithmetic():
    # totals (-1.0 over 2 tokens) vs (-0.8 over 1 token) -> means (-0.5, -0.8)
    totals = np.array([-1.0, -0.8])
    lengths = np.array([2.0, 1.0])
    means = totals / lengths
    assert int(np.argmax(means)) == 0


def test_duplicate_losing_choice_never_changes_winner(frozen_backbone, small_suite):
    ex = small_suite.split("heldin-0", "test").examples[0]
    hooks = {}
    base_idx = rank_classify(frozen_backbone, hooks, ex.input_ids, ex.choices)
    loser = next(i for i in range(len(ex.choices)) if i != base_idx)
    extended = ex.choices + [list(ex.choices[loser])]
    assert rank_classify(frozen_backbone, hooks, ex.input_ids, extended) == base_idx


def test_sequence_scores_sum_vs_mean(frozen_backbone, small_suite):
    pairs = small_suite.split("heldin-0", "test").pairs()[:4]
    mean_scores = sequence_scores(frozen_backbone, {}, pairs, "mean")
    sum_scores = sequence_scores(frozen_backbone, {}, pairs, "sum")
    lengths = np.array([len(t) for _, t in pairs])
    np.testing.assert_allclose(mean_scores, sum_scores / lengths, rtol=1e-12)
    with pytest.raises(ConfigError):
        sequence_scores(frozen_backbone, {}, pairs, "median")


def test_eval_report_validates_accuracies():
    with pytest.raises(ConfigError):
        EvalReport("base", {"d": 1.5}, 1.5)
    with pytest.raises(ConfigError):
        EvalReport("base", {"d": 0.5, "e": 0.7}, 0.9)
    r = EvalReport("base", {"d": 0.5, "e": 0.7}, 0.6000000000000001)
    assert r.mean_accuracy == pytest.approx(0.6)


def test_missing_artifacts_name_the_build_step(frozen_backbone, small_suite):
    ctx = ctx_with(frozen_backbone, small_suite)
    with pytest.raises(MissingArtifactError, match="build-router --kind phatgoose"):
        evaluate_method("phatgoose", ctx)
    with pytest.raises(MissingArtifactError, match="build-index"):
        evaluate_method("retrieval", ctx)
    with pytest.raises(MissingArtifactError, match="merge"):
        evaluate_method("merged", ctx)
    with pytest.raises(MissingArtifactError, match="train-multitask"):
        evaluate_method("multitask", ctx)
    with pytest.raises(MissingArtifactError, match="train-expert"):
        evaluate_method("oracle", ctx)
    with pytest.raises(ConfigError):
        evaluate_method("nonsense", ctx)


def test_oracle_geq_best_individual_everywhere(frozen_backbone, small_suite):
    pool = make_pool(frozen_backbone, 3)
    ctx = ctx_with(frozen_backbone, small_suite, experts=pool)
    datasets = small_suite.heldout_ids
    oracle = evaluate_method("oracle", ctx, datasets)
    best = evaluate_method("best-individual", ctx, datasets)
    for ds in datasets:
        assert oracle.per_dataset[ds] >= best.per_dataset[ds]
    # by construction oracle also dominates every single expert
    for ds in datasets:
        for e in pool:
            assert oracle.per_dataset[ds] >= ctx.expert_scores[ds][e.expert_id]


def test_single_expert_pool_equivalences(frozen_backbone, small_suite):
    """With one expert and k=1, all routing-flavoured methods coincide."""
    cfg = RunConfig(seed=0, k=1, stored_examples=30)
    pool = make_pool(frozen_backbone, 1)
    # rename so the expert matches a real task's training data
    pool[0].expert_id = "heldin-0"
    routers = {
        "phatgoose": stage_build_router(cfg, frozen_backbone, pool, "phatgoose", small_suite),
        "avg-act": stage_build_router(cfg, frozen_backbone, pool, "avg-act", small_suite),
    }
    index = stage_build_index(cfg, frozen_backbone, pool, small_suite)
    ctx = ctx_with(
        frozen_backbone, small_suite, experts=pool, routers=routers, index=index
    )
    datasets = small_suite.heldout_ids
    accs = {
        m: evaluate_method(m, ctx, datasets).per_dataset
        for m in ("phatgoose", "avg-act", "retrieval", "oracle")
    }
    plain = {
        ds: dataset_accuracy(
            frozen_backbone, lora_hooks(frozen_backbone, pool[0]), small_suite.split(ds, "test")
        )
        for ds in datasets
    }
    for m, per in accs.items():
        assert per == plain, m


def test_expert_score_table_diagonal_is_own_task(frozen_backbone, small_suite):
    pool = make_pool(frozen_backbone, 2)
    pool[0].expert_id, pool[1].expert_id = "heldin-0", "heldin-1"
    ctx = ctx_with(frozen_backbone, small_suite, experts=pool)
    table = expert_score_table(ctx, ["heldin-0", "heldin-1"])
    assert set(table) == {"heldin-0", "heldin-1"}
    for ds in table:
        assert set(table[ds]) == {"heldin-0", "heldin-1"}
        for acc in table[ds].values():
            assert 0.0 <= acc <= 1.0
