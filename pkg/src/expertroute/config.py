"""Run configuration: defaults, key=value config files, flag overrides.

Precedence is flag > config file > default.  The config file format is
one `key = value` per line with `#` comments; keys are the field names
of `RunConfig`.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from .backbone import BackboneConfig
from .errors import ConfigError
from .optim import OptimizerConfig


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "run"

    # backbone
    vocab_size: int = 64
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 256
    n_encoder_layers: int = 2
    n_decoder_layers: int = 2
    max_seq_len: int = 24

    # pretraining
    pretrain_steps: int = 1000
    pretrain_lr: float = 3e-3
    pretrain_examples: int = 4096
    pretrain_batch: int = 32
    pretrain_holdout: int = 256

    # task suite
    n_heldin: int = 8
    n_heldout: int = 4
    train_examples: int = 2000
    validation_examples: int = 200
    test_examples: int = 200

    # expert and gate training
    rank: int = 4
    expert_steps: int = 300
    gate_steps: int = 100
    joint_steps: int = 300
    multitask_steps: int = 300
    batch_size: int = 32
    lr: float = 5e-3
    weight_decay: float = 0.0
    warmup_ratio: float = 0.06
    eval_every: int = 50

    # routing and baselines
    k: int = 2
    stored_examples: int = 1000

    # evaluation
    normalize: str = "mean"

    def backbone_config(self) -> BackboneConfig:
        return BackboneConfig(
            vocab_size=self.vocab_size,
            d_model=self.d_model,
            n_heads=self.n_heads,
            d_ff=self.d_ff,
            n_encoder_layers=self.n_encoder_layers,
            n_decoder_layers=self.n_decoder_layers,
            max_seq_len=self.max_seq_len,
            seed=self.seed,
        )

    def optimizer_config(self, lr: float | None = None) -> OptimizerConfig:
        return OptimizerConfig(
            lr=self.lr if lr is None else lr,
            weight_decay=self.weight_decay,
            warmup_ratio=self.warmup_ratio,
        )

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def _coerce(name: str, kind: type, raw: str):
    try:
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"config key {name!r}: cannot parse {raw!r} as {kind.__name__}") from exc


def parse_config_file(path: Path) -> dict:
    """Read `key = value` lines into a dict typed against RunConfig."""
    known = {f.name: f.type for f in fields(RunConfig)}
    types = {"int": int, "float": float, "str": str}
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected `key = value`, got {line!r}")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key not in known:
            raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
        out[key] = _coerce(key, types.get(str(known[key]), str), raw)
    return out


def resolve_config(
    config_path: Path | None, flag_overrides: dict | None = None
) -> RunConfig:
    """Defaults, then config file, then explicit flags."""
    values = {}
    if config_path is not None:
        values.update(parse_config_file(config_path))
    for key, val in (flag_overrides or {}).items():
        if val is not None:
            values.update({key: val})
    return RunConfig(**values)
