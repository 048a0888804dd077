"""Rank-classification evaluation of every method over a task suite."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .backbone import Backbone, Hook
from .baselines import (
    EmbeddingIndex,
    MergedExpert,
    best_individual,
    embed_examples,
    merged_hooks,
    oracle_route,
    retrieve_expert,
)
from .data import pad_batch
from .errors import ConfigError, MissingArtifactError
from .experts import LoraExpert, lora_hooks
from .routing import RoutingTrace, SiteRouter, routed_hooks
from .taskgen import ExampleSet, TaskSuite
from .tensor import log_softmax_data

METHOD_ORDER = (
    "phatgoose",
    "avg-act",
    "arrow",
    "retrieval",
    "merged",
    "merged-param-avg",
    "oracle",
    "best-individual",
    "multitask",
    "base",
)

ROUTING_METHODS = ("phatgoose", "avg-act", "arrow")


def sequence_scores(
    backbone: Backbone,
    hooks: dict[str, Hook],
    pairs: list[tuple[list[int], list[int]]],
    normalize: str = "mean",
    batch_size: int = 64,
    trace: RoutingTrace | None = None,
) -> np.ndarray:
    """Teacher-forced log-likelihood of each (input, target) pair."""
    out = np.empty(len(pairs))
    for start in range(0, len(pairs), batch_size):
        batch = pad_batch(pairs[start : start + batch_size])
        if trace is not None:
            trace.set_batch_masks(batch.enc_mask, batch.target_mask)
        logits, _ = backbone.forward(
            batch.input_ids, batch.decoder_ids, hooks=hooks, enc_mask=batch.enc_mask
        )
        logp = log_softmax_data(logits.data)
        tok = np.take_along_axis(logp, batch.target_ids[..., None], axis=-1)[..., 0]
        totals = (tok * batch.target_mask).sum(axis=1)
        if normalize == "mean":
            totals = totals / batch.target_mask.sum(axis=1)
        elif normalize != "sum":
            raise ConfigError(f"unknown normalization {normalize!r}")
        out[start : start + batch.n_sequences] = totals
    return out


def rank_classify(
    backbone: Backbone,
    hooks: dict[str, Hook],
    input_ids: list[int],
    choices: list[list[int]],
    normalize: str = "mean",
) -> int:
    """Index of the best-scoring choice; ties go to the lowest index."""
    if len(choices) < 2:
        raise ConfigError("rank classification needs at least 2 choices")
    if any(len(c) == 0 for c in choices):
        raise ConfigError("empty answer choice")
    scores = sequence_scores(
        backbone, hooks, [(input_ids, c) for c in choices], normalize
    )
    return int(np.argmax(scores))


def dataset_accuracy(
    backbone: Backbone,
    hooks: dict[str, Hook],
    examples: ExampleSet,
    normalize: str = "mean",
    trace: RoutingTrace | None = None,
) -> float:
    """Fraction of examples whose gold choice wins rank classification.

    When `trace` is given, a second pass over the gold targets records the
    routing behaviour on the dataset's actual examples.
    """
    pairs = []
    layout = []
    for ex in examples.examples:
        if any(len(c) == 0 for c in ex.choices):
            raise ConfigError("empty answer choice")
        layout.append(len(ex.choices))
        pairs.extend((ex.input_ids, c) for c in ex.choices)
    scores = sequence_scores(backbone, hooks, pairs, normalize)
    correct, offset = 0, 0
    for ex, width in zip(examples.examples, layout):
        chosen = int(np.argmax(scores[offset : offset + width]))
        if ex.choices[chosen] == ex.target_ids:
            correct += 1
        offset += width
    if trace is not None:
        sequence_scores(backbone, hooks, examples.pairs(), normalize, trace=trace)
    return correct / len(examples.examples)


@dataclass
class EvalReport:
    method: str
    per_dataset: dict[str, float]
    mean_accuracy: float
    routing: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)
    top1_fractions: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)
    runtime: float = 0.0
    config_snapshot: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        for name, acc in self.per_dataset.items():
            if not 0.0 <= acc <= 1.0:
                raise ConfigError(f"accuracy for {name} outside [0, 1]")
        if self.per_dataset:
            expected = float(np.mean(list(self.per_dataset.values())))
            if abs(expected - self.mean_accuracy) > 1e-12:
                raise ConfigError("mean accuracy does not match per-dataset values")


@dataclass
class EvalContext:
    """Every artifact evaluation might need; missing ones raise by name."""

    backbone: Backbone
    suite: TaskSuite
    experts: list[LoraExpert] | None = None
    routers: dict[str, dict[str, SiteRouter]] = field(default_factory=dict)
    index: EmbeddingIndex | None = None
    merged: dict[str, MergedExpert] = field(default_factory=dict)
    multitask_expert: LoraExpert | None = None
    expert_scores: dict[str, dict[str, float]] | None = None
    normalize: str = "mean"
    seed: int = 0
    config_snapshot: dict = field(default_factory=dict)

    def need(self, value, what: str, build_step: str):
        if value is None:
            raise MissingArtifactError(f"{what} missing; run `{build_step}` first")
        return value

    def expert_by_id(self, expert_id: str) -> LoraExpert:
        for e in self.need(self.experts, "expert pool", "train-expert"):
            if e.expert_id == expert_id:
                return e
        raise MissingArtifactError(f"expert {expert_id!r} not in pool")


def expert_score_table(
    ctx: EvalContext, dataset_ids: list[str]
) -> dict[str, dict[str, float]]:
    """Accuracy of every expert's plain LoRA on every dataset."""
    experts = ctx.need(ctx.experts, "expert pool", "train-expert")
    table: dict[str, dict[str, float]] = {}
    for ds in dataset_ids:
        examples = ctx.suite.split(ds, "test")
        table[ds] = {}
        for e in experts:
            hooks = lora_hooks(ctx.backbone, e)
            table[ds][e.expert_id] = dataset_accuracy(
                ctx.backbone, hooks, examples, ctx.normalize
            )
    return table


def _routed_eval(
    ctx: EvalContext, kind: str, dataset_ids: list[str], record_routing: bool
) -> tuple[dict[str, float], dict, dict]:
    routers = ctx.routers.get(kind)
    if routers is None:
        raise MissingArtifactError(
            f"{kind} routers missing; run `build-router --kind {kind}` first"
        )
    experts = ctx.need(ctx.experts, "expert pool", "train-expert")
    per_dataset, routing, top1 = {}, {}, {}
    for ds in dataset_ids:
        trace = RoutingTrace([e.expert_id for e in experts]) if record_routing else None
        hooks = routed_hooks(ctx.backbone, routers, experts, trace)
        per_dataset[ds] = dataset_accuracy(
            ctx.backbone, hooks, ctx.suite.split(ds, "test"), ctx.normalize, trace
        )
        if trace is not None:
            routing[ds] = trace.mean_probabilities()
            top1[ds] = trace.top1_fractions()
    return per_dataset, routing, top1


def _retrieval_eval(ctx: EvalContext, dataset_ids: list[str]) -> dict[str, float]:
    index = ctx.need(ctx.index, "embedding index", "build-index")
    experts = ctx.need(ctx.experts, "expert pool", "train-expert")
    by_id = {e.expert_id: e for e in experts}
    per_dataset = {}
    for ds in dataset_ids:
        examples = ctx.suite.split(ds, "test")
        queries = embed_examples(ctx.backbone, [ex.input_ids for ex in examples.examples])
        chosen = [retrieve_expert(index, q) for q in queries]
        # group per chosen expert so whole-example hooks still batch
        correct = 0
        for expert_id in sorted(set(chosen)):
            subset = ExampleSet(
                examples.task_id,
                examples.split,
                [ex for ex, c in zip(examples.examples, chosen) if c == expert_id],
            )
            hooks = lora_hooks(ctx.backbone, by_id[expert_id])
            acc = dataset_accuracy(ctx.backbone, hooks, subset, ctx.normalize)
            correct += acc * len(subset.examples)
        per_dataset[ds] = correct / len(examples.examples)
    return per_dataset


def evaluate_method(
    method: str,
    ctx: EvalContext,
    dataset_ids: list[str] | None = None,
    record_routing: bool = False,
) -> EvalReport:
    """One comparison-table row: per-dataset accuracy plus routing trace."""
    if method not in METHOD_ORDER:
        raise ConfigError(f"unknown method {method!r}; expected one of {METHOD_ORDER}")
    if dataset_ids is None:
        dataset_ids = ctx.suite.heldout_ids
    start = time.monotonic()
    routing: dict = {}
    top1: dict = {}

    if method in ROUTING_METHODS:
        kind = method
        per_dataset, routing, top1 = _routed_eval(
            ctx, kind, dataset_ids, record_routing
        )
    elif method == "retrieval":
        per_dataset = _retrieval_eval(ctx, dataset_ids)
    elif method in ("merged", "merged-param-avg"):
        mode = "outer-product" if method == "merged" else "parameter-average"
        merged = ctx.merged.get(mode)
        if merged is None:
            raise MissingArtifactError(
                f"merged expert ({mode}) missing; run `merge` first"
            )
        hooks = merged_hooks(ctx.backbone, merged)
        per_dataset = {
            ds: dataset_accuracy(
                ctx.backbone, hooks, ctx.suite.split(ds, "test"), ctx.normalize
            )
            for ds in dataset_ids
        }
    elif method in ("oracle", "best-individual"):
        scores = ctx.expert_scores
        if scores is None or any(ds not in scores for ds in dataset_ids):
            scores = expert_score_table(ctx, dataset_ids)
            ctx.expert_scores = {**(ctx.expert_scores or {}), **scores}
        if method == "oracle":
            per_dataset = {
                ds: ctx.expert_scores[ds][oracle_route(ctx.expert_scores[ds])]
                for ds in dataset_ids
            }
        else:
            pick = best_individual({ds: ctx.expert_scores[ds] for ds in dataset_ids})
            per_dataset = {ds: ctx.expert_scores[ds][pick] for ds in dataset_ids}
    elif method == "multitask":
        expert = ctx.need(ctx.multitask_expert, "multitask expert", "train-multitask")
        hooks = lora_hooks(ctx.backbone, expert)
        per_dataset = {
            ds: dataset_accuracy(
                ctx.backbone, hooks, ctx.suite.split(ds, "test"), ctx.normalize
            )
            for ds in dataset_ids
        }
    elif method == "base":
        per_dataset = {
            ds: dataset_accuracy(
                ctx.backbone, {}, ctx.suite.split(ds, "test"), ctx.normalize
            )
            for ds in dataset_ids
        }
    else:  # pragma: no cover - exhaustively matched above
        raise ConfigError(method)

    return EvalReport(
        method=method,
        per_dataset=per_dataset,
        mean_accuracy=float(np.mean(list(per_dataset.values()))),
        routing=routing,
        top1_fractions=top1,
        runtime=time.monotonic() - start,
        config_snapshot=ctx.config_snapshot,
        seed=ctx.seed,
    )
