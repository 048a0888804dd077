"""A small encoder-decoder transformer whose linear layers host expert modules.

Every attention projection and feed-forward matrix is a `ModuleSite`: a
frozen weight that a per-site hook can extend.  Hooks receive the site's
incoming activations and the base output `W u` and return a replacement
output, which is how LoRA deltas, sigmoid gates, and token routers attach
without the backbone knowing about any of them.

Architecture notes: pre-layernorm blocks, learned position embeddings,
bias-free site linears, greedy decoding only.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .data import Batch, pad_batch
from .errors import ConfigError, NumericError, ShapeError
from .optim import AdamW, OptimizerConfig, warmup_lr
from .rng import named_stream
from .tensor import Tensor

Hook = Callable[[Tensor, Tensor, "ModuleSite"], Tensor]

LN_EPS = 1e-5
MASK_BIAS = -1e9


@dataclass(frozen=True)
class BackboneConfig:
    vocab_size: int = 64
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 256
    n_encoder_layers: int = 2
    n_decoder_layers: int = 2
    max_seq_len: int = 24
    seed: int = 0

    def validate(self) -> None:
        extents = (
            self.vocab_size,
            self.d_model,
            self.n_heads,
            self.d_ff,
            self.n_encoder_layers,
            self.n_decoder_layers,
            self.max_seq_len,
        )
        if any(e < 1 for e in extents):
            raise ConfigError(f"all extents must be >= 1, got {self}")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "d_model": self.d_model,
            "n_heads": self.n_heads,
            "d_ff": self.d_ff,
            "n_encoder_layers": self.n_encoder_layers,
            "n_decoder_layers": self.n_decoder_layers,
            "max_seq_len": self.max_seq_len,
            "seed": self.seed,
        }

    @staticmethod
    def from_dict(d: dict) -> "BackboneConfig":
        return BackboneConfig(**{k: int(v) for k, v in d.items()})


@dataclass(frozen=True)
class ModuleSite:
    """One linear layer that can host expert modules.

    `stream` says which token stream feeds the site: "enc" for encoder-side
    activations (including cross-attention keys/values, whose input is the
    encoder memory) and "dec" for decoder-side ones.  `layer_key` groups
    sites for per-layer reporting.
    """

    site_id: str
    n: int  # input width
    d: int  # output width
    stream: str  # "enc" | "dec"
    layer_key: str


@dataclass
class ActivationTrace:
    """Per-site input activations captured during one forward pass."""

    per_site: dict[str, np.ndarray] = field(default_factory=dict)


class Backbone:
    def __init__(self, config: BackboneConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params
        self.sites = _enumerate_sites(config)
        self.frozen = False

    def freeze(self) -> None:
        for p in self.params.values():
            p.requires_grad = False
        self.frozen = True

    def site_weight(self, site_id: str) -> Tensor:
        return self.params[site_id]

    def fingerprint(self) -> str:
        """Content hash of config plus every weight, order-independent."""
        h = hashlib.sha256()
        h.update(json.dumps(self.config.to_dict(), sort_keys=True).encode())
        for name in sorted(self.params):
            arr = self.params[name].data
            h.update(name.encode())
            h.update(str(arr.shape).encode())
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return h.hexdigest()

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    # ------------------------------------------------------------ forward

    def forward(
        self,
        input_ids: np.ndarray,
        decoder_ids: np.ndarray,
        hooks: dict[str, Hook] | None = None,
        trace_sites: list[str] | None = None,
        enc_mask: np.ndarray | None = None,
    ) -> tuple[Tensor, ActivationTrace | None]:
        """Teacher-forced pass; returns [B, Td, vocab] logits.

        `hooks` maps site_id to a replacement for that site's output;
        `trace_sites` lists sites whose incoming activations to capture.
        """
        cfg = self.config
        hooks = hooks or {}
        for site_id in hooks:
            if site_id not in self.sites:
                raise ConfigError(f"unknown site_id in hooks: {site_id!r}")
        if trace_sites:
            unknown = [s for s in trace_sites if s not in self.sites]
            if unknown:
                raise ConfigError(f"unknown site_id in trace_sites: {unknown}")
        input_ids = np.asarray(input_ids)
        decoder_ids = np.asarray(decoder_ids)
        b, te = input_ids.shape
        _, td = decoder_ids.shape
        if te > cfg.max_seq_len or td > cfg.max_seq_len:
            raise ShapeError(
                f"sequence length {max(te, td)} exceeds max_seq_len {cfg.max_seq_len}"
            )
        if enc_mask is None:
            enc_mask = np.ones((b, te))

        trace = ActivationTrace() if trace_sites else None
        ctx = _PassContext(self, hooks, trace, set(trace_sites or ()))

        # additive attention biases
        enc_bias = T.constant(np.where(enc_mask, 0.0, MASK_BIAS)[:, None, None, :])
        causal = np.triu(np.full((td, td), MASK_BIAS), k=1)
        dec_bias = T.constant(causal[None, None, :, :])
        cross_bias = enc_bias

        p = self.params
        x = T.embedding(p["embed.tok"], input_ids) + T.embedding(
            p["embed.pos_enc"], np.arange(te)[None, :]
        )
        for i in range(cfg.n_encoder_layers):
            x = _encoder_layer(ctx, f"encoder.{i}", x, enc_bias)
        memory = _layer_norm(p["encoder.final_ln.g"], p["encoder.final_ln.b"], x)

        y = T.embedding(p["embed.tok"], decoder_ids) + T.embedding(
            p["embed.pos_dec"], np.arange(td)[None, :]
        )
        for i in range(cfg.n_decoder_layers):
            y = _decoder_layer(ctx, f"decoder.{i}", y, memory, dec_bias, cross_bias)
        y = _layer_norm(p["decoder.final_ln.g"], p["decoder.final_ln.b"], y)
        logits = T.matmul(y, T.transpose(p["out.proj"], (1, 0)))
        return logits, trace


class _PassContext:
    """Per-forward plumbing: hook dispatch and trace capture."""

    __slots__ = ("backbone", "hooks", "trace", "trace_sites")

    def __init__(self, backbone, hooks, trace, trace_sites):
        self.backbone = backbone
        self.hooks = hooks
        self.trace = trace
        self.trace_sites = trace_sites

    def apply_site(self, site_id: str, u: Tensor) -> Tensor:
        site = self.backbone.sites[site_id]
        if self.trace is not None and site_id in self.trace_sites:
            self.trace.per_site[site_id] = u.data.copy()
        base = T.matmul(u, T.transpose(self.backbone.params[site_id], (1, 0)))
        hook = self.hooks.get(site_id)
        if hook is None:
            return base
        return hook(u, base, site)


def _layer_norm(g: Tensor, b: Tensor, x: Tensor) -> Tensor:
    mu = T.tmean(x, axis=-1, keepdims=True)
    centered = x - mu
    var = T.tmean(centered * centered, axis=-1, keepdims=True)
    return g * (centered / T.sqrt(var + LN_EPS)) + b


def _attention(ctx, prefix: str, x_q: Tensor, x_kv: Tensor, bias: Tensor) -> Tensor:
    cfg = ctx.backbone.config
    h, dh = cfg.n_heads, cfg.d_model // cfg.n_heads

    def split(t: Tensor) -> Tensor:
        bsz, tlen = t.shape[0], t.shape[1]
        return T.transpose(T.reshape(t, (bsz, tlen, h, dh)), (0, 2, 1, 3))

    q = split(ctx.apply_site(f"{prefix}.q", x_q))
    k = split(ctx.apply_site(f"{prefix}.k", x_kv))
    v = split(ctx.apply_site(f"{prefix}.v", x_kv))
    scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(dh)) + bias
    attn = T.softmax(scores, axis=-1)
    mixed = T.matmul(attn, v)
    bsz, tlen = x_q.shape[0], x_q.shape[1]
    merged = T.reshape(T.transpose(mixed, (0, 2, 1, 3)), (bsz, tlen, cfg.d_model))
    return ctx.apply_site(f"{prefix}.o", merged)


def _feed_forward(ctx, layer: str, x: Tensor) -> Tensor:
    hidden = T.relu(ctx.apply_site(f"{layer}.ff.up", x))
    return ctx.apply_site(f"{layer}.ff.down", hidden)


def _encoder_layer(ctx, layer: str, x: Tensor, bias: Tensor) -> Tensor:
    p = ctx.backbone.params
    normed = _layer_norm(p[f"{layer}.ln1.g"], p[f"{layer}.ln1.b"], x)
    x = x + _attention(ctx, f"{layer}.attn", normed, normed, bias)
    normed = _layer_norm(p[f"{layer}.ln2.g"], p[f"{layer}.ln2.b"], x)
    return x + _feed_forward(ctx, layer, normed)


def _decoder_layer(ctx, layer, y, memory, dec_bias, cross_bias) -> Tensor:
    p = ctx.backbone.params
    normed = _layer_norm(p[f"{layer}.ln1.g"], p[f"{layer}.ln1.b"], y)
    y = y + _attention(ctx, f"{layer}.self", normed, normed, dec_bias)
    normed = _layer_norm(p[f"{layer}.ln2.g"], p[f"{layer}.ln2.b"], y)
    y = y + _attention(ctx, f"{layer}.cross", normed, memory, cross_bias)
    normed = _layer_norm(p[f"{layer}.ln3.g"], p[f"{layer}.ln3.b"], y)
    return y + _feed_forward(ctx, layer, normed)


def _enumerate_sites(cfg: BackboneConfig) -> dict[str, ModuleSite]:
    d, f = cfg.d_model, cfg.d_ff
    sites: dict[str, ModuleSite] = {}

    def add(site_id: str, n: int, dout: int, stream: str, layer_key: str) -> None:
        sites[site_id] = ModuleSite(site_id, n, dout, stream, layer_key)

    for i in range(cfg.n_encoder_layers):
        key = f"encoder.{i}"
        for name in ("q", "k", "v", "o"):
            add(f"{key}.attn.{name}", d, d, "enc", key)
        add(f"{key}.ff.up", d, f, "enc", key)
        add(f"{key}.ff.down", f, d, "enc", key)
    for i in range(cfg.n_decoder_layers):
        key = f"decoder.{i}"
        for name in ("q", "k", "v", "o"):
            add(f"{key}.self.{name}", d, d, "dec", key)
        # cross-attention keys/values read the encoder memory
        add(f"{key}.cross.q", d, d, "dec", key)
        add(f"{key}.cross.k", d, d, "enc", key)
        add(f"{key}.cross.v", d, d, "enc", key)
        add(f"{key}.cross.o", d, d, "dec", key)
        add(f"{key}.ff.up", d, f, "dec", key)
        add(f"{key}.ff.down", f, d, "dec", key)
    return sites


def build_backbone(config: BackboneConfig) -> Backbone:
    """Deterministically initialized backbone; parameters still trainable."""
    config.validate()
    params: dict[str, Tensor] = {}

    def init(name: str, shape: tuple[int, ...], std: float) -> None:
        rng = named_stream(config.seed, f"backbone.init.{name}")
        params[name] = Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)

    def init_ln(prefix: str) -> None:
        params[f"{prefix}.g"] = Tensor(np.ones(config.d_model), requires_grad=True)
        params[f"{prefix}.b"] = Tensor(np.zeros(config.d_model), requires_grad=True)

    d, f = config.d_model, config.d_ff
    # positions get a smaller scale than tokens so token identity dominates
    init("embed.tok", (config.vocab_size, d), 1.0)
    init("embed.pos_enc", (config.max_seq_len, d), 0.1)
    init("embed.pos_dec", (config.max_seq_len, d), 0.1)
    init("out.proj", (config.vocab_size, d), 1.0 / np.sqrt(d))

    sites = _enumerate_sites(config)
    for site_id, site in sites.items():
        init(site_id, (site.d, site.n), 1.0 / np.sqrt(site.n))
    for i in range(config.n_encoder_layers):
        init_ln(f"encoder.{i}.ln1")
        init_ln(f"encoder.{i}.ln2")
    for i in range(config.n_decoder_layers):
        init_ln(f"decoder.{i}.ln1")
        init_ln(f"decoder.{i}.ln2")
        init_ln(f"decoder.{i}.ln3")
    init_ln("encoder.final_ln")
    init_ln("decoder.final_ln")
    return Backbone(config, params)


@dataclass
class PretrainReport:
    initial_holdout_loss: float
    final_holdout_loss: float
    loss_curve: list[float]
    wall_clock: float


def _holdout_loss(backbone: Backbone, batch: Batch) -> float:
    logits, _ = backbone.forward(
        batch.input_ids, batch.decoder_ids, enc_mask=batch.enc_mask
    )
    return T.cross_entropy(logits, batch.target_ids, batch.target_mask).item()


def pretrain_backbone(
    backbone: Backbone,
    examples: list[tuple[list[int], list[int]]],
    steps: int,
    opt_config: OptimizerConfig,
    batch_size: int,
    seed: int,
    holdout: int = 128,
) -> PretrainReport:
    """Language-model the mixture, then freeze every weight.

    The last `holdout` examples are excluded from training and used to
    check that the loss actually went down.
    """
    vocab = backbone.config.vocab_size
    for inp, tgt in examples:
        ids = list(inp) + list(tgt)
        if ids and (min(ids) < 0 or max(ids) >= vocab):
            raise ConfigError(f"corpus token id out of range [0, {vocab})")
    if len(examples) <= holdout:
        raise ConfigError("corpus too small for the held-out slice")
    train, held = examples[:-holdout], examples[-holdout:]
    held_batch = pad_batch(held)

    start = time.monotonic()
    initial = _holdout_loss(backbone, held_batch)
    curve: list[float] = []
    opt = AdamW(backbone.params, opt_config)
    rng = named_stream(seed, "pretrain.batches")
    for step in range(steps):
        idx = rng.integers(0, len(train), size=batch_size)
        batch = pad_batch([train[i] for i in idx])
        tape = T.Tape()
        with tape:
            logits, _ = backbone.forward(
                batch.input_ids, batch.decoder_ids, enc_mask=batch.enc_mask
            )
            loss = T.cross_entropy(logits, batch.target_ids, batch.target_mask)
        value = loss.item()
        if not np.isfinite(value):
            raise NumericError(f"pretraining diverged at step {step}: loss={value}")
        curve.append(value)
        tape.backward(loss)
        opt.step(warmup_lr(opt_config.lr, step, steps, opt_config.warmup_ratio))
    final = _holdout_loss(backbone, held_batch)
    backbone.freeze()
    return PretrainReport(initial, final, curve, time.monotonic() - start)


def greedy_decode(
    backbone: Backbone,
    input_ids: np.ndarray,
    hooks: dict[str, Hook] | None = None,
    max_len: int | None = None,
    enc_mask: np.ndarray | None = None,
    bos_id: int = 1,
    eos_id: int = 2,
) -> list[list[int]]:
    """Argmax decoding until EOS or `max_len`; returns ids without BOS/EOS."""
    max_len = max_len or backbone.config.max_seq_len
    b = input_ids.shape[0]
    out = np.full((b, 1), bos_id, dtype=np.int64)
    done = np.zeros(b, dtype=bool)
    for _ in range(max_len - 1):
        logits, _ = backbone.forward(input_ids, out, hooks=hooks, enc_mask=enc_mask)
        nxt = np.argmax(logits.data[:, -1, :], axis=-1)
        nxt[done] = eos_id
        out = np.concatenate([out, nxt[:, None]], axis=1)
        done |= nxt == eos_id
        if done.all():
            break
    result = []
    for row in out[:, 1:]:
        toks = row.tolist()
        result.append(toks[: toks.index(eos_id)] if eos_id in toks else toks)
    return result
