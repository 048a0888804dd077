"""Command-line interface.

Subcommands map one-to-one onto pipeline stages and read/write bundles
under --out-dir.  Global flags: --config (key=value file), --seed,
--out-dir; explicit flags beat config-file values, which beat defaults.

Exit codes: 0 success, 1 usage error, 2 missing/mismatched artifact,
3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .analysis import (
    correlate_kl_vs_accuracy,
    kl_divergence,
    one_hot_distribution,
    routing_distribution,
)
from .baselines import oracle_route
from .bundles import load_expert, save_expert
from .config import RunConfig, resolve_config
from .errors import BundleError, ConfigError, ExpertRouteError, MissingArtifactError, NumericError
from .evalrun import METHOD_ORDER, evaluate_method, expert_score_table
from .experts import train_gate
from .pipeline import (
    ArtifactPaths,
    build_eval_context,
    load_backbone_artifact,
    load_expert_pool,
    load_report,
    load_suite_artifact,
    save_report,
    stage_build_index,
    stage_build_router,
    stage_gen_tasks,
    stage_merge,
    stage_pretrain,
    stage_train_expert,
    stage_train_joint,
    stage_train_multitask,
)
from .reporting import emit_report

EXIT_USAGE = 1
EXIT_ARTIFACT = 2
EXIT_NUMERIC = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _build_parser() -> _Parser:
    parser = _Parser(prog="expertroute", description=__doc__)
    parser.add_argument("--config", type=Path, help="key = value config file")
    parser.add_argument("--seed", type=int, help="run seed (overrides config)")
    parser.add_argument("--out-dir", help="artifact directory (overrides config)")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-tasks", help="generate the synthetic task suite")

    p = sub.add_parser("pretrain", help="pretrain and freeze the backbone")
    p.add_argument("--steps", type=int, help="override pretraining steps")

    for name, what in (
        ("train-expert", "train a LoRA expert on one held-in task"),
        ("train-gate", "train the routing gate of an existing expert"),
        ("train-joint", "train expert and gate jointly (ablation)"),
    ):
        p = sub.add_parser(name, help=what)
        p.add_argument("--task", help="task id (default: all held-in tasks)")

    sub.add_parser("train-multitask", help="train the multitask reference expert")

    p = sub.add_parser("build-router", help="assemble per-site routers")
    p.add_argument("--kind", choices=("phatgoose", "avg-act", "arrow"), required=True)
    p.add_argument("--joint", action="store_true", help="use jointly trained experts")

    sub.add_parser("build-index", help="build the retrieval embedding index")

    p = sub.add_parser("merge", help="merge the expert pool into one dense delta")
    p.add_argument(
        "--param-avg", action="store_true", help="average parameters before the product"
    )

    p = sub.add_parser("evaluate", help="evaluate one method")
    p.add_argument("--method", choices=METHOD_ORDER, required=True)
    p.add_argument(
        "--datasets", choices=("held-out", "held-in", "all"), default="held-out"
    )
    p.add_argument("--joint", action="store_true", help="use jointly trained experts")

    p = sub.add_parser("analyze-routing", help="KL alignment with oracle routing")
    p.add_argument("--method", choices=("phatgoose", "avg-act", "arrow"), default="phatgoose")

    p = sub.add_parser("report", help="emit the comparison table")
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    return parser


def _dataset_ids(suite, selection: str) -> list[str]:
    if selection == "held-out":
        return suite.heldout_ids
    if selection == "held-in":
        return suite.heldin_ids
    return suite.heldin_ids + suite.heldout_ids


def _cmd_gen_tasks(cfg, paths):
    suite = stage_gen_tasks(cfg, paths)
    print(f"wrote suite with {len(suite.specs)} tasks to {paths.suite}")


def _cmd_pretrain(cfg, paths, args):
    if args.steps is not None:
        cfg.pretrain_steps = args.steps
    backbone = stage_pretrain(cfg, paths)
    print(f"wrote frozen backbone (fingerprint {backbone.fingerprint()[:12]}) to {paths.backbone}")


def _heldin_tasks(cfg, paths, args):
    suite = load_suite_artifact(paths)
    if args.task is not None:
        if args.task not in suite.heldin_ids:
            raise ConfigError(f"{args.task!r} is not a held-in task of this suite")
        return suite, [args.task]
    return suite, suite.heldin_ids


def _cmd_train_expert(cfg, paths, args):
    suite, tasks = _heldin_tasks(cfg, paths, args)
    backbone = load_backbone_artifact(paths)
    for task_id in tasks:
        stage_train_expert(cfg, suite, backbone, task_id, with_gate=False, paths=paths)
        print(f"trained expert {task_id} -> {paths.expert(task_id)}")


def _cmd_train_gate(cfg, paths, args):
    suite, tasks = _heldin_tasks(cfg, paths, args)
    backbone = load_backbone_artifact(paths)
    for task_id in tasks:
        bundle = paths.expert(task_id)
        if not (bundle / "manifest.json").exists():
            raise MissingArtifactError(
                f"expert for {task_id} not found; run `train-expert --task {task_id}` first"
            )
        expert = load_expert(bundle, backbone)
        train_gate(
            backbone,
            expert,
            suite.split(task_id, "train"),
            steps=cfg.gate_steps,
            opt_config=cfg.optimizer_config(),
            batch_size=cfg.batch_size,
            seed=cfg.seed,
        )
        save_expert(bundle, expert, backbone.fingerprint())
        print(f"trained gate for {task_id} -> {bundle}")


def _cmd_train_joint(cfg, paths, args):
    suite, tasks = _heldin_tasks(cfg, paths, args)
    backbone = load_backbone_artifact(paths)
    for task_id in tasks:
        stage_train_joint(cfg, suite, backbone, task_id, paths=paths)
        print(f"joint-trained {task_id} -> {paths.joint_expert(task_id)}")


def _cmd_train_multitask(cfg, paths):
    suite = load_suite_artifact(paths)
    backbone = load_backbone_artifact(paths)
    stage_train_multitask(cfg, suite, backbone, paths)
    print(f"trained multitask reference -> {paths.multitask}")


def _cmd_build_router(cfg, paths, args):
    suite = load_suite_artifact(paths)
    backbone = load_backbone_artifact(paths)
    experts = load_expert_pool(paths, suite, backbone, joint=args.joint)
    save_as = f"{args.kind}-joint" if args.joint else args.kind
    stage_build_router(cfg, backbone, experts, args.kind, suite, paths, save_as=save_as)
    print(f"built {save_as} routers -> {paths.router(save_as)}")


def _cmd_build_index(cfg, paths):
    suite = load_suite_artifact(paths)
    backbone = load_backbone_artifact(paths)
    experts = load_expert_pool(paths, suite, backbone)
    stage_build_index(cfg, backbone, experts, suite, paths)
    print(f"built embedding index -> {paths.index}")


def _cmd_merge(cfg, paths, args):
    suite = load_suite_artifact(paths)
    backbone = load_backbone_artifact(paths)
    experts = load_expert_pool(paths, suite, backbone)
    mode = "parameter-average" if args.param_avg else "outer-product"
    stage_merge(cfg, backbone, experts, mode, paths)
    print(f"merged ({mode}) -> {paths.merged(mode)}")


def _cmd_evaluate(cfg, paths, args):
    ctx = build_eval_context(paths, cfg, args.method, joint=args.joint)
    datasets = _dataset_ids(ctx.suite, args.datasets)
    report = evaluate_method(
        args.method, ctx, datasets, record_routing=args.method in ("phatgoose", "avg-act", "arrow")
    )
    name = args.method + ("-joint" if args.joint else "")
    if args.datasets != "held-out":
        name += f"-{args.datasets}"
    save_report(paths.report(name), report)
    print(f"{args.method}: mean accuracy {report.mean_accuracy:.4f} over {len(datasets)} datasets")
    for ds in datasets:
        print(f"  {ds}: {report.per_dataset[ds]:.4f}")
    print(f"wrote {paths.report(name)}")


def _cmd_analyze_routing(cfg, paths, args):
    report_path = paths.report(args.method)
    if not report_path.exists():
        raise MissingArtifactError(
            f"no routing report for {args.method}; run `evaluate --method {args.method}` first"
        )
    report = load_report(report_path)
    if not report.routing:
        raise MissingArtifactError(
            f"report for {args.method} has no routing trace; re-run `evaluate --method {args.method}`"
        )
    ctx = build_eval_context(paths, cfg, "oracle")
    datasets = list(report.routing)
    scores = expert_score_table(ctx, datasets)
    expert_order = [e.expert_id for e in ctx.experts]
    kls, accs = {}, {}
    for ds in datasets:
        dist = routing_distribution(report.routing[ds], expert_order)
        oracle_expert = oracle_route(scores[ds])
        onehot = one_hot_distribution(expert_order, oracle_expert, list(dist.per_site))
        _, kls[ds] = kl_divergence(dist, onehot)
        accs[ds] = report.per_dataset[ds]
        print(f"{ds}: KL(routing || oracle one-hot) = {kls[ds]:.4f}, accuracy = {accs[ds]:.4f}")
    if len(datasets) >= 3:
        r = correlate_kl_vs_accuracy(kls, accs)
        print(f"Pearson r(KL, accuracy) = {'undefined' if r is None else f'{r:.4f}'}")
    out = paths.tables / f"routing_analysis_{args.method}.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps({"kl": kls, "accuracy": accs}, indent=2, sort_keys=True))
    print(f"wrote {out}")


def _cmd_report(cfg, paths, args):
    reports = []
    for method in METHOD_ORDER:
        path = paths.report(method)
        if path.exists():
            reports.append(load_report(path))
    if not reports:
        raise MissingArtifactError("no evaluation reports found; run `evaluate` first")
    suite = load_suite_artifact(paths)
    order = [d for d in suite.heldin_ids + suite.heldout_ids if d in reports[0].per_dataset]
    written = emit_report(reports, args.format, paths.tables, dataset_order=order or None)
    for path in written:
        print(f"wrote {path}")


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        overrides = {"seed": args.seed, "out_dir": args.out_dir}
        cfg = resolve_config(args.config, overrides)
        paths = ArtifactPaths(cfg.out_dir)
        if args.command == "gen-tasks":
            _cmd_gen_tasks(cfg, paths)
        elif args.command == "pretrain":
            _cmd_pretrain(cfg, paths, args)
        elif args.command == "train-expert":
            _cmd_train_expert(cfg, paths, args)
        elif args.command == "train-gate":
            _cmd_train_gate(cfg, paths, args)
        elif args.command == "train-joint":
            _cmd_train_joint(cfg, paths, args)
        elif args.command == "train-multitask":
            _cmd_train_multitask(cfg, paths)
        elif args.command == "build-router":
            _cmd_build_router(cfg, paths, args)
        elif args.command == "build-index":
            _cmd_build_index(cfg, paths)
        elif args.command == "merge":
            _cmd_merge(cfg, paths, args)
        elif args.command == "evaluate":
            _cmd_evaluate(cfg, paths, args)
        elif args.command == "analyze-routing":
            _cmd_analyze_routing(cfg, paths, args)
        elif args.command == "report":
            _cmd_report(cfg, paths, args)
    except (MissingArtifactError, BundleError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ARTIFACT
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ExpertRouteError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return 0


if __name__ == "__main__":
    sys.exit(main())
