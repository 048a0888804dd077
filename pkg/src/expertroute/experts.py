"""LoRA expert modules and the three ways of training them.

An expert owns, per hosting site, a low-rank pair (A, B) and a gate
vector v.  `train_expert` fits A and B with everything else frozen;
`train_gate` then fits v alone on the same data and objective, which is
the step that makes v usable as a routing direction later.  `train_joint`
is the ablation that fits all three at once, and
`train_multitask_reference` fits a single expert on a task mixture.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .backbone import Backbone, Hook, ModuleSite
from .data import pad_batch
from .errors import ConfigError, NumericError, ShapeError
from .optim import AdamW, OptimizerConfig, adamw_step, warmup_lr
from .rng import named_stream
from .taskgen import ExampleSet, sample_batch
from .tensor import Tensor


@dataclass
class LoraSite:
    A: Tensor  # [r, n]
    B: Tensor  # [d, r]


@dataclass
class LoraExpert:
    expert_id: str
    rank: int
    sites: dict[str, LoraSite]
    gates: dict[str, Tensor]  # v, [n] per site
    meta: dict = field(default_factory=dict)

    def validate_against(self, backbone: Backbone) -> None:
        for site_id, entry in self.sites.items():
            site = backbone.sites.get(site_id)
            if site is None:
                raise ConfigError(f"expert covers unknown site {site_id!r}")
            if entry.A.shape != (self.rank, site.n) or entry.B.shape != (
                site.d,
                self.rank,
            ):
                raise ShapeError(
                    f"LoRA shapes at {site_id} do not match site (n={site.n}, d={site.d})"
                )
            if self.gates[site_id].shape != (site.n,):
                raise ShapeError(f"gate width at {site_id} does not match n={site.n}")

    def trainable_lora(self) -> dict[str, Tensor]:
        out = {}
        for site_id, entry in self.sites.items():
            out[f"{site_id}.A"] = entry.A
            out[f"{site_id}.B"] = entry.B
        return out

    def trainable_gates(self) -> dict[str, Tensor]:
        return {f"{site_id}.v": v for site_id, v in self.gates.items()}

    def snapshot_lora(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.trainable_lora().items()}

    def snapshot_gates(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.trainable_gates().items()}

    def restore_lora(self, snap: dict[str, np.ndarray]) -> None:
        for site_id, entry in self.sites.items():
            entry.A.data = snap[f"{site_id}.A"].copy()
            entry.B.data = snap[f"{site_id}.B"].copy()


@dataclass
class TrainReport:
    loss_curve: list[float]
    eval_steps: list[int]
    eval_losses: list[float]
    checkpoint_step: int
    final_validation_loss: float
    wall_clock: float


def init_expert(
    backbone: Backbone, rank: int, seed: int, expert_id: str = "expert"
) -> LoraExpert:
    """Fresh expert: A ~ N(0, 1/n), B = 0, v = 0, so the initial delta is 0."""
    sites: dict[str, LoraSite] = {}
    gates: dict[str, Tensor] = {}
    for site_id, site in backbone.sites.items():
        if rank > min(site.n, site.d):
            raise ConfigError(
                f"rank {rank} exceeds min(n, d) = {min(site.n, site.d)} at {site_id}"
            )
        rng = named_stream(seed, f"expert.{expert_id}.init.{site_id}")
        a = rng.normal(0.0, 1.0 / np.sqrt(site.n), size=(rank, site.n))
        sites[site_id] = LoraSite(
            A=Tensor(a, requires_grad=True),
            B=Tensor(np.zeros((site.d, rank)), requires_grad=True),
        )
        gates[site_id] = Tensor(np.zeros(site.n), requires_grad=True)
    return LoraExpert(
        expert_id=expert_id,
        rank=rank,
        sites=sites,
        gates=gates,
        meta={"seed": seed},
    )


def lora_forward_hook(site: ModuleSite, expert: LoraExpert) -> Hook:
    """Site output becomes W u + B (A u)."""
    entry = expert.sites[site.site_id]

    def hook(u: Tensor, base: Tensor, _site: ModuleSite) -> Tensor:
        au = T.matmul(u, T.transpose(entry.A, (1, 0)))
        return base + T.matmul(au, T.transpose(entry.B, (1, 0)))

    return hook


def gated_forward_hook(site: ModuleSite, expert: LoraExpert) -> Hook:
    """Site output becomes W u + (B A u) * sigmoid(v . u)."""
    entry = expert.sites[site.site_id]
    v = expert.gates[site.site_id]

    def hook(u: Tensor, base: Tensor, _site: ModuleSite) -> Tensor:
        au = T.matmul(u, T.transpose(entry.A, (1, 0)))
        delta = T.matmul(au, T.transpose(entry.B, (1, 0)))
        score = T.matmul(u, T.reshape(v, (site.n, 1)))
        return base + delta * T.sigmoid(score)

    return hook


def lora_hooks(backbone: Backbone, expert: LoraExpert) -> dict[str, Hook]:
    return {
        sid: lora_forward_hook(backbone.sites[sid], expert) for sid in expert.sites
    }


def gated_hooks(backbone: Backbone, expert: LoraExpert) -> dict[str, Hook]:
    return {
        sid: gated_forward_hook(backbone.sites[sid], expert) for sid in expert.sites
    }


def _require_frozen(backbone: Backbone) -> None:
    if not backbone.frozen:
        raise ConfigError("backbone must be frozen before expert-phase training")


def validation_loss(
    backbone: Backbone,
    hooks: dict[str, Hook],
    examples: ExampleSet,
    batch_size: int = 64,
) -> float:
    """Teacher-forced loss over a whole split, deterministic order."""
    total, weight = 0.0, 0.0
    rows = examples.pairs()
    for start in range(0, len(rows), batch_size):
        batch = pad_batch(rows[start : start + batch_size])
        logits, _ = backbone.forward(
            batch.input_ids, batch.decoder_ids, hooks=hooks, enc_mask=batch.enc_mask
        )
        n = batch.target_mask.sum()
        total += (
            T.cross_entropy(logits, batch.target_ids, batch.target_mask).item() * n
        )
        weight += n
    return total / weight


def _training_loop(
    backbone: Backbone,
    params: dict[str, Tensor],
    hooks: dict[str, Hook],
    train_set: ExampleSet,
    val_set: ExampleSet | None,
    steps: int,
    opt_config: OptimizerConfig,
    batch_size: int,
    seed: int,
    stream: str,
    eval_every: int,
    lr_overrides: dict[str, float] | None = None,
) -> TrainReport:
    """Shared AdamW loop with optional best-validation checkpointing."""
    start = time.monotonic()
    opt = AdamW(params, opt_config)
    rng = named_stream(seed, stream)
    curve: list[float] = []
    eval_steps: list[int] = []
    eval_losses: list[float] = []
    best = (np.inf, 0, {k: t.data.copy() for k, t in params.items()})

    def evaluate(step: int) -> None:
        nonlocal best
        loss = validation_loss(backbone, hooks, val_set)
        eval_steps.append(step)
        eval_losses.append(loss)
        if loss < best[0]:
            best = (loss, step, {k: t.data.copy() for k, t in params.items()})

    if val_set is not None and steps > 0:
        evaluate(0)
    for step in range(steps):
        batch = sample_batch(train_set, batch_size, rng)
        tape = T.Tape()
        with tape:
            logits, _ = backbone.forward(
                batch.input_ids,
                batch.decoder_ids,
                hooks=hooks,
                enc_mask=batch.enc_mask,
            )
            loss = T.cross_entropy(logits, batch.target_ids, batch.target_mask)
        value = loss.item()
        if not np.isfinite(value):
            raise NumericError(f"training diverged at step {step}: loss={value}")
        curve.append(value)
        tape.backward(loss)
        lr = warmup_lr(opt_config.lr, step, steps, opt_config.warmup_ratio)
        if lr_overrides:
            # per-parameter learning rates, used by joint training's gate lr
            for name, p in params.items():
                if p.grad is None:
                    continue
                scale = lr_overrides.get(name, 1.0)
                p.data = adamw_step(
                    p.data,
                    p.grad,
                    opt.state[name],
                    lr=lr * scale,
                    weight_decay=opt_config.weight_decay,
                    betas=opt_config.betas,
                    eps=opt_config.eps,
                )
                p.grad = None
        else:
            opt.step(lr)
        if val_set is not None and (step + 1) % eval_every == 0:
            evaluate(step + 1)
    if val_set is not None and steps > 0 and steps % eval_every != 0:
        evaluate(steps)

    if val_set is not None and steps > 0:
        for k, p in params.items():
            p.data = best[2][k].copy()
        checkpoint_step, final_val = best[1], best[0]
    else:
        checkpoint_step, final_val = steps, float("nan")
    return TrainReport(
        loss_curve=curve,
        eval_steps=eval_steps,
        eval_losses=eval_losses,
        checkpoint_step=checkpoint_step,
        final_validation_loss=final_val,
        wall_clock=time.monotonic() - start,
    )


def train_expert(
    backbone: Backbone,
    expert: LoraExpert,
    train_set: ExampleSet,
    val_set: ExampleSet | None,
    steps: int,
    opt_config: OptimizerConfig,
    batch_size: int = 32,
    seed: int = 0,
    eval_every: int = 50,
) -> TrainReport:
    """Fit A and B on one task; v and the backbone stay untouched."""
    _require_frozen(backbone)
    expert.validate_against(backbone)
    report = _training_loop(
        backbone,
        expert.trainable_lora(),
        lora_hooks(backbone, expert),
        train_set,
        val_set,
        steps,
        opt_config,
        batch_size,
        seed,
        f"expert.{expert.expert_id}.batches",
        eval_every,
    )
    expert.meta.update(
        {
            "task": train_set.task_id,
            "steps": steps,
            "checkpoint_step": report.checkpoint_step,
            "phase": "expert",
            "hyperparameters": {
                "lr": opt_config.lr,
                "weight_decay": opt_config.weight_decay,
                "warmup_ratio": opt_config.warmup_ratio,
                "batch_size": batch_size,
            },
        }
    )
    return report


def train_gate(
    backbone: Backbone,
    expert: LoraExpert,
    train_set: ExampleSet,
    steps: int,
    opt_config: OptimizerConfig,
    batch_size: int = 32,
    seed: int = 0,
) -> TrainReport:
    """Fit v alone, gated forward, same data and objective as the expert.

    No checkpoint selection: the gate after the final step is kept.
    """
    _require_frozen(backbone)
    for t in expert.trainable_lora().values():
        t.requires_grad = False
    try:
        report = _training_loop(
            backbone,
            expert.trainable_gates(),
            gated_hooks(backbone, expert),
            train_set,
            None,
            steps,
            opt_config,
            batch_size,
            seed,
            f"gate.{expert.expert_id}.batches",
            eval_every=max(steps, 1),
        )
    finally:
        for t in expert.trainable_lora().values():
            t.requires_grad = True
    expert.meta.update({"gate_steps": steps, "phase": "gated"})
    return report


def train_joint(
    backbone: Backbone,
    expert: LoraExpert,
    train_set: ExampleSet,
    val_set: ExampleSet | None,
    steps: int,
    opt_config: OptimizerConfig,
    batch_size: int = 32,
    seed: int = 0,
    eval_every: int = 50,
    gate_lr_scale: float = 1.0,
) -> TrainReport:
    """Ablation: fit A, B and v simultaneously from initialization."""
    _require_frozen(backbone)
    params = {**expert.trainable_lora(), **expert.trainable_gates()}
    overrides = None
    if gate_lr_scale != 1.0:
        overrides = {name: gate_lr_scale for name in expert.trainable_gates()}
    report = _training_loop(
        backbone,
        params,
        gated_hooks(backbone, expert),
        train_set,
        val_set,
        steps,
        opt_config,
        batch_size,
        seed,
        f"joint.{expert.expert_id}.batches",
        eval_every,
        lr_overrides=overrides,
    )
    expert.meta.update({"task": train_set.task_id, "steps": steps, "phase": "joint"})
    return report


def train_multitask_reference(
    backbone: Backbone,
    expert: LoraExpert,
    train_sets: list[ExampleSet],
    val_sets: list[ExampleSet] | None,
    steps: int,
    opt_config: OptimizerConfig,
    batch_size: int = 32,
    seed: int = 0,
    eval_every: int = 50,
) -> TrainReport:
    """Single LoRA on the concatenated mixture, uniform example sampling.

    Violates the share-weights-only setting by design; reference row only.
    """
    merged_train = ExampleSet(
        task_id="multitask",
        split="train",
        examples=[e for s in train_sets for e in s.examples],
    )
    merged_val = None
    if val_sets is not None:
        merged_val = ExampleSet(
            task_id="multitask",
            split="validation",
            examples=[e for s in val_sets for e in s.examples],
        )
    return train_expert(
        backbone,
        expert,
        merged_train,
        merged_val,
        steps,
        opt_config,
        batch_size,
        seed,
        eval_every,
    )
