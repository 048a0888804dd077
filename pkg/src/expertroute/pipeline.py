"""End-to-end orchestration of the build: corpus, backbone, experts,
gates, routers, baselines, evaluation.

Each stage reads and writes bundles under `out_dir` so the CLI can run
stages independently; `run_full_pipeline` chains everything in memory
(persisting on request) and returns the artifacts plus all reports,
which is what the benchmark and the acceptance suite consume.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .backbone import Backbone, build_backbone, pretrain_backbone
from .baselines import (
    ActivationStats,
    EmbeddingIndex,
    MergedExpert,
    arrow_routers,
    average_activation_routers,
    build_embedding_index,
    collect_activation_stats,
    merge_experts,
)
from .bundles import (
    load_backbone,
    load_expert,
    load_index,
    load_merged,
    load_routers,
    save_backbone,
    save_expert,
    save_index,
    save_merged,
    save_routers,
)
from .config import RunConfig
from .errors import MissingArtifactError
from .evalrun import (
    EvalContext,
    EvalReport,
    METHOD_ORDER,
    evaluate_method,
    expert_score_table,
)
from .experts import (
    LoraExpert,
    init_expert,
    train_expert,
    train_gate,
    train_joint,
    train_multitask_reference,
)
from .routing import SiteRouter, build_routers
from .taskgen import TaskSuite, generate_suite, load_suite, pretraining_corpus, save_suite


class ArtifactPaths:
    """Directory layout of one run."""

    def __init__(self, out_dir: str | Path):
        self.root = Path(out_dir)

    @property
    def suite(self) -> Path:
        return self.root / "suite"

    @property
    def backbone(self) -> Path:
        return self.root / "backbone"

    def expert(self, task_id: str) -> Path:
        return self.root / "experts" / task_id

    def joint_expert(self, task_id: str) -> Path:
        return self.root / "experts-joint" / task_id

    @property
    def multitask(self) -> Path:
        return self.root / "multitask"

    def router(self, kind: str) -> Path:
        return self.root / "routers" / kind

    @property
    def index(self) -> Path:
        return self.root / "index"

    def merged(self, mode: str) -> Path:
        return self.root / "merged" / mode

    @property
    def scores(self) -> Path:
        return self.root / "scores" / "expert_scores.json"

    def report(self, name: str) -> Path:
        return self.root / "reports" / f"{name}.json"

    @property
    def tables(self) -> Path:
        return self.root / "reports"


def _require(path: Path, what: str, step: str) -> Path:
    if not path.exists():
        raise MissingArtifactError(f"{what} not found at {path}; run `{step}` first")
    return path


# ------------------------------------------------------------ stage ops


def stage_gen_tasks(cfg: RunConfig, paths: ArtifactPaths | None = None) -> TaskSuite:
    suite = generate_suite(
        seed=cfg.seed,
        n_heldin=cfg.n_heldin,
        n_heldout=cfg.n_heldout,
        sizes=(cfg.train_examples, cfg.validation_examples, cfg.test_examples),
        vocab_size=cfg.vocab_size,
    )
    if paths is not None:
        save_suite(suite, paths.suite)
    return suite


def stage_pretrain(cfg: RunConfig, paths: ArtifactPaths | None = None) -> Backbone:
    backbone = build_backbone(cfg.backbone_config())
    corpus = pretraining_corpus(
        cfg.seed, cfg.pretrain_examples, cfg.n_heldin, cfg.n_heldout, cfg.vocab_size
    )
    pretrain_backbone(
        backbone,
        corpus,
        steps=cfg.pretrain_steps,
        opt_config=cfg.optimizer_config(cfg.pretrain_lr),
        batch_size=cfg.pretrain_batch,
        seed=cfg.seed,
        holdout=cfg.pretrain_holdout,
    )
    if paths is not None:
        save_backbone(paths.backbone, backbone)
    return backbone


def stage_train_expert(
    cfg: RunConfig,
    suite: TaskSuite,
    backbone: Backbone,
    task_id: str,
    with_gate: bool = False,
    paths: ArtifactPaths | None = None,
) -> LoraExpert:
    expert = init_expert(backbone, cfg.rank, cfg.seed, expert_id=task_id)
    train_expert(
        backbone,
        expert,
        suite.split(task_id, "train"),
        suite.split(task_id, "validation"),
        steps=cfg.expert_steps,
        opt_config=cfg.optimizer_config(),
        batch_size=cfg.batch_size,
        seed=cfg.seed,
        eval_every=cfg.eval_every,
    )
    if with_gate:
        train_gate(
            backbone,
            expert,
            suite.split(task_id, "train"),
            steps=cfg.gate_steps,
            opt_config=cfg.optimizer_config(),
            batch_size=cfg.batch_size,
            seed=cfg.seed,
        )
    if paths is not None:
        save_expert(paths.expert(task_id), expert, backbone.fingerprint())
    return expert


def stage_train_joint(
    cfg: RunConfig,
    suite: TaskSuite,
    backbone: Backbone,
    task_id: str,
    paths: ArtifactPaths | None = None,
) -> LoraExpert:
    expert = init_expert(backbone, cfg.rank, cfg.seed, expert_id=task_id)
    train_joint(
        backbone,
        expert,
        suite.split(task_id, "train"),
        suite.split(task_id, "validation"),
        steps=cfg.joint_steps,
        opt_config=cfg.optimizer_config(),
        batch_size=cfg.batch_size,
        seed=cfg.seed,
        eval_every=cfg.eval_every,
    )
    if paths is not None:
        save_expert(paths.joint_expert(task_id), expert, backbone.fingerprint())
    return expert


def stage_train_multitask(
    cfg: RunConfig,
    suite: TaskSuite,
    backbone: Backbone,
    paths: ArtifactPaths | None = None,
) -> LoraExpert:
    expert = init_expert(backbone, cfg.rank, cfg.seed, expert_id="multitask")
    train_multitask_reference(
        backbone,
        expert,
        [suite.split(t, "train") for t in suite.heldin_ids],
        [suite.split(t, "validation") for t in suite.heldin_ids],
        steps=cfg.multitask_steps,
        opt_config=cfg.optimizer_config(),
        batch_size=cfg.batch_size,
        seed=cfg.seed,
        eval_every=cfg.eval_every,
    )
    if paths is not None:
        save_expert(paths.multitask, expert, backbone.fingerprint())
    return expert


def stage_build_router(
    cfg: RunConfig,
    backbone: Backbone,
    experts: list[LoraExpert],
    kind: str,
    suite: TaskSuite | None = None,
    paths: ArtifactPaths | None = None,
    save_as: str | None = None,
) -> dict[str, SiteRouter]:
    if kind == "phatgoose":
        routers = build_routers(experts, backbone, cfg.k)
    elif kind == "avg-act":
        stats = [
            collect_activation_stats(
                backbone,
                e.expert_id,
                suite.split(e.expert_id, "train"),
                cfg.stored_examples,
                cfg.seed,
            )
            for e in experts
        ]
        routers = average_activation_routers(experts, stats, backbone, cfg.k)
    elif kind == "arrow":
        routers = arrow_routers(experts, backbone, cfg.k, seed=cfg.seed)
    else:
        raise MissingArtifactError(f"unknown router kind {kind!r}")
    if paths is not None:
        save_routers(
            paths.router(save_as or kind), routers, kind, backbone.fingerprint()
        )
    return routers


def stage_build_index(
    cfg: RunConfig,
    backbone: Backbone,
    experts: list[LoraExpert],
    suite: TaskSuite,
    paths: ArtifactPaths | None = None,
) -> EmbeddingIndex:
    index = build_embedding_index(
        backbone,
        experts,
        {e.expert_id: suite.split(e.expert_id, "train") for e in experts},
        max_per_expert=cfg.stored_examples,
        seed=cfg.seed,
    )
    if paths is not None:
        save_index(paths.index, index, backbone.fingerprint())
    return index


def stage_merge(
    cfg: RunConfig,
    backbone: Backbone,
    experts: list[LoraExpert],
    mode: str,
    paths: ArtifactPaths | None = None,
) -> MergedExpert:
    merged = merge_experts(experts, mode)
    if paths is not None:
        save_merged(paths.merged(mode), merged, backbone.fingerprint())
    return merged


# -------------------------------------------------------- full pipeline


@dataclass
class RunArtifacts:
    config: RunConfig
    suite: TaskSuite
    backbone: Backbone
    experts: list[LoraExpert]
    joint_experts: list[LoraExpert]
    multitask_expert: LoraExpert
    routers: dict[str, dict[str, SiteRouter]]
    joint_routers: dict[str, SiteRouter]
    index: EmbeddingIndex
    merged: dict[str, MergedExpert]
    heldout_reports: dict[str, EvalReport] = field(default_factory=dict)
    joint_heldout_report: EvalReport | None = None
    heldin_phatgoose: EvalReport | None = None
    heldin_scores: dict[str, dict[str, float]] = field(default_factory=dict)
    heldout_scores: dict[str, dict[str, float]] = field(default_factory=dict)

    def context(self) -> EvalContext:
        return EvalContext(
            backbone=self.backbone,
            suite=self.suite,
            experts=self.experts,
            routers=self.routers,
            index=self.index,
            merged=self.merged,
            multitask_expert=self.multitask_expert,
            expert_scores=dict(self.heldout_scores),
            normalize=self.config.normalize,
            seed=self.config.seed,
            config_snapshot=self.config.to_dict(),
        )


def run_full_pipeline(
    cfg: RunConfig,
    out_dir: str | Path | None = None,
    progress: bool = False,
) -> RunArtifacts:
    """Every stage in dependency order, in memory, optionally persisted."""
    paths = ArtifactPaths(out_dir) if out_dir is not None else None

    def note(msg: str) -> None:
        if progress:
            print(f"[pipeline seed={cfg.seed}] {msg}", flush=True)

    note("generating task suite")
    suite = stage_gen_tasks(cfg, paths)
    note("pretraining backbone")
    backbone = stage_pretrain(cfg, paths)

    experts, joint_experts = [], []
    for task_id in suite.heldin_ids:
        note(f"training expert + gate for {task_id}")
        experts.append(
            stage_train_expert(cfg, suite, backbone, task_id, with_gate=True, paths=paths)
        )
    for task_id in suite.heldin_ids:
        note(f"joint-training {task_id}")
        joint_experts.append(stage_train_joint(cfg, suite, backbone, task_id, paths=paths))
    note("training multitask reference")
    multitask = stage_train_multitask(cfg, suite, backbone, paths)

    note("building routers, index, merges")
    routers = {
        kind: stage_build_router(cfg, backbone, experts, kind, suite, paths)
        for kind in ("phatgoose", "avg-act", "arrow")
    }
    joint_routers = stage_build_router(
        cfg, backbone, joint_experts, "phatgoose", suite, paths, save_as="phatgoose-joint"
    )
    index = stage_build_index(cfg, backbone, experts, suite, paths)
    merged = {
        mode: stage_merge(cfg, backbone, experts, mode, paths)
        for mode in ("outer-product", "parameter-average")
    }

    artifacts = RunArtifacts(
        config=cfg,
        suite=suite,
        backbone=backbone,
        experts=experts,
        joint_experts=joint_experts,
        multitask_expert=multitask,
        routers=routers,
        joint_routers=joint_routers,
        index=index,
        merged=merged,
    )

    note("scoring experts on all datasets")
    ctx = artifacts.context()
    artifacts.heldout_scores = expert_score_table(ctx, suite.heldout_ids)
    artifacts.heldin_scores = expert_score_table(ctx, suite.heldin_ids)
    ctx.expert_scores = dict(artifacts.heldout_scores)

    note("evaluating methods on held-out tasks")
    for method in METHOD_ORDER:
        artifacts.heldout_reports[method] = evaluate_method(
            method, ctx, suite.heldout_ids, record_routing=method == "phatgoose"
        )

    note("evaluating phatgoose on held-in tasks")
    artifacts.heldin_phatgoose = evaluate_method(
        "phatgoose", ctx, suite.heldin_ids, record_routing=True
    )

    note("evaluating joint-gate routing on held-out tasks")
    joint_ctx = EvalContext(
        backbone=backbone,
        suite=suite,
        experts=joint_experts,
        routers={"phatgoose": joint_routers},
        normalize=cfg.normalize,
        seed=cfg.seed,
        config_snapshot=cfg.to_dict(),
    )
    artifacts.joint_heldout_report = evaluate_method(
        "phatgoose", joint_ctx, suite.heldout_ids
    )

    if paths is not None:
        paths.scores.parent.mkdir(parents=True, exist_ok=True)
        paths.scores.write_text(
            json.dumps(
                {"held-out": artifacts.heldout_scores, "held-in": artifacts.heldin_scores},
                indent=2,
                sort_keys=True,
            )
        )
        for method, report in artifacts.heldout_reports.items():
            save_report(paths.report(method), report)
        save_report(paths.report("phatgoose-heldin"), artifacts.heldin_phatgoose)
        save_report(paths.report("phatgoose-joint"), artifacts.joint_heldout_report)
    return artifacts


# ------------------------------------------------------- report persist


def save_report(path: Path, report: EvalReport) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "method": report.method,
        "per_dataset": report.per_dataset,
        "mean_accuracy": report.mean_accuracy,
        "runtime": report.runtime,
        "seed": report.seed,
        "config_snapshot": report.config_snapshot,
        "routing": {
            ds: {sid: vec.tolist() for sid, vec in per_site.items()}
            for ds, per_site in report.routing.items()
        },
        "top1_fractions": {
            ds: {sid: vec.tolist() for sid, vec in per_site.items()}
            for ds, per_site in report.top1_fractions.items()
        },
    }
    path.write_text(json.dumps(payload, indent=2, sort_keys=True))


def load_report(path: Path) -> EvalReport:
    d = json.loads(Path(path).read_text())
    return EvalReport(
        method=d["method"],
        per_dataset=d["per_dataset"],
        mean_accuracy=d["mean_accuracy"],
        routing={
            ds: {sid: np.asarray(vec) for sid, vec in per_site.items()}
            for ds, per_site in d["routing"].items()
        },
        top1_fractions={
            ds: {sid: np.asarray(vec) for sid, vec in per_site.items()}
            for ds, per_site in d["top1_fractions"].items()
        },
        runtime=d["runtime"],
        config_snapshot=d["config_snapshot"],
        seed=d["seed"],
    )


# ----------------------------------------------------- store-backed CLI


def load_suite_artifact(paths: ArtifactPaths) -> TaskSuite:
    _require(paths.suite / "suite_manifest.json", "task suite", "gen-tasks")
    return load_suite(paths.suite)


def load_backbone_artifact(paths: ArtifactPaths) -> Backbone:
    _require(paths.backbone / "manifest.json", "backbone checkpoint", "pretrain")
    return load_backbone(paths.backbone)


def load_expert_pool(
    paths: ArtifactPaths, suite: TaskSuite, backbone: Backbone, joint: bool = False
) -> list[LoraExpert]:
    pool = []
    for task_id in suite.heldin_ids:
        p = paths.joint_expert(task_id) if joint else paths.expert(task_id)
        step = "train-joint" if joint else "train-expert"
        _require(p / "manifest.json", f"expert for {task_id}", f"{step} --task {task_id}")
        pool.append(load_expert(p, backbone))
    return pool


def build_eval_context(
    paths: ArtifactPaths,
    cfg: RunConfig,
    method: str,
    joint: bool = False,
) -> EvalContext:
    """Load exactly the artifacts `method` needs, erroring by build step."""
    suite = load_suite_artifact(paths)
    backbone = load_backbone_artifact(paths)
    ctx = EvalContext(
        backbone=backbone,
        suite=suite,
        normalize=cfg.normalize,
        seed=cfg.seed,
        config_snapshot=cfg.to_dict(),
    )
    needs_pool = method in (
        "phatgoose",
        "avg-act",
        "arrow",
        "retrieval",
        "oracle",
        "best-individual",
    )
    if needs_pool:
        ctx.experts = load_expert_pool(paths, suite, backbone, joint=joint)
    if method in ("phatgoose", "avg-act", "arrow"):
        router_name = "phatgoose-joint" if joint and method == "phatgoose" else method
        p = paths.router(router_name)
        _require(
            p / "manifest.json",
            f"{router_name} routers",
            f"build-router --kind {method}" + (" --joint" if joint else ""),
        )
        _, routers = load_routers(p, backbone)
        ctx.routers[method] = routers
    if method == "retrieval":
        _require(paths.index / "manifest.json", "embedding index", "build-index")
        ctx.index = load_index(paths.index, backbone)
    if method in ("merged", "merged-param-avg"):
        mode = "outer-product" if method == "merged" else "parameter-average"
        p = paths.merged(mode)
        _require(p / "manifest.json", f"merged expert ({mode})", "merge")
        ctx.merged[mode] = load_merged(p, backbone)
    if method == "multitask":
        _require(paths.multitask / "manifest.json", "multitask expert", "train-multitask")
        ctx.multitask_expert = load_expert(paths.multitask, backbone)
    return ctx
