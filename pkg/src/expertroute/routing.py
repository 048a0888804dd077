"""Per-site top-k routers assembled from per-expert gate vectors.

A router standardizes both its gate rows and each incoming activation,
scores every expert by the dot product of the standardized pair, keeps
the top-k, and softmax-mixes the selected experts' low-rank deltas with
a 1/sqrt(n) temperature.  No sigmoid appears at inference; the gate's
only trace is the direction of its vector.

The same machinery also drives the magnitude-scored variant used by the
singular-vector baseline (`score_mode="absdot"`), which skips the
standardization and scores by |v . u|.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .backbone import Backbone, Hook, ModuleSite
from .errors import ConfigError, ShapeError
from .experts import LoraExpert
from .tensor import Tensor

STD_EPS = 1e-8

SCORE_COSINE = "cosine"  # standardized dot products, signed
SCORE_ABSDOT = "absdot"  # raw dot products, absolute value


def standardize(x: np.ndarray) -> np.ndarray:
    """Center and scale to unit population std along the last axis.

    The divisor is max(std, eps) so non-degenerate vectors standardize
    exactly (self-affinity equals n up to rounding) while constant vectors
    map to the zero vector instead of erroring; affine shifts a*x + b
    (a > 0) cancel up to rounding.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] < 2:
        raise ShapeError("standardize requires vectors of length >= 2")
    mu = x.mean(axis=-1, keepdims=True)
    sd = x.std(axis=-1, keepdims=True)
    return (x - mu) / np.maximum(sd, STD_EPS)


@dataclass
class SiteRouter:
    """Gate matrix plus the top-k rule for one module site."""

    site_id: str
    expert_order: list[str]
    gate_rows: np.ndarray  # [Z, n]
    n: int
    k: int
    score_mode: str = SCORE_COSINE

    def __post_init__(self):
        z, n = self.gate_rows.shape
        if z != len(self.expert_order):
            raise ShapeError("gate matrix rows do not match expert order")
        if n != self.n:
            raise ShapeError(f"gate width {n} does not match site width {self.n}")
        if not 1 <= self.k <= z:
            raise ConfigError(f"k={self.k} outside [1, {z}]")
        if self.score_mode not in (SCORE_COSINE, SCORE_ABSDOT):
            raise ConfigError(f"unknown score mode {self.score_mode!r}")

    def affinities(self, u: np.ndarray) -> np.ndarray:
        """Scores for every expert; `u` is [..., n] raw activations."""
        if u.shape[-1] != self.n:
            raise ShapeError(f"activation width {u.shape[-1]} != n={self.n}")
        if self.score_mode == SCORE_COSINE:
            return standardize(u) @ self.gate_rows.T
        return np.abs(u @ self.gate_rows.T)

    def select(self, alpha: np.ndarray) -> np.ndarray:
        """Indices of the top-k experts, ties to the lower expert index."""
        order = np.argsort(-alpha, axis=-1, kind="stable")
        return order[..., : self.k]

    def weights(self, alpha_selected: np.ndarray) -> np.ndarray:
        """Softmax over selected affinities scaled by 1/sqrt(n)."""
        logits = alpha_selected / np.sqrt(self.n)
        logits = logits - logits.max(axis=-1, keepdims=True)
        e = np.exp(logits)
        return e / e.sum(axis=-1, keepdims=True)

    def full_probabilities(self, u: np.ndarray) -> np.ndarray:
        """Softmax over ALL experts of alpha/sqrt(n); analysis only."""
        alpha = self.affinities(u)
        logits = alpha / np.sqrt(self.n)
        logits = logits - logits.max(axis=-1, keepdims=True)
        e = np.exp(logits)
        return e / e.sum(axis=-1, keepdims=True)


@dataclass
class RouterDecision:
    token_position: int
    affinities: np.ndarray  # over all experts, expert order of the router
    selected: list[str]  # expert ids, highest affinity first
    weights: np.ndarray  # over selected, sums to 1


def build_router(
    experts: list[LoraExpert], site_id: str, k: int, score_mode: str = SCORE_COSINE
) -> SiteRouter:
    """Stack standardized gate vectors, preserving expert order."""
    if not experts:
        raise ConfigError("cannot build a router from an empty expert pool")
    rows = []
    n = None
    for e in experts:
        if site_id not in e.gates:
            raise ConfigError(f"expert {e.expert_id!r} has no gate at {site_id!r}")
        v = e.gates[site_id].data
        if n is None:
            n = v.shape[0]
        elif v.shape[0] != n:
            raise ShapeError(f"gate width mismatch at {site_id}: {v.shape[0]} != {n}")
        rows.append(standardize(v))
    return SiteRouter(
        site_id=site_id,
        expert_order=[e.expert_id for e in experts],
        gate_rows=np.stack(rows),
        n=n,
        k=k,
        score_mode=score_mode,
    )


def route_token(router: SiteRouter, u: np.ndarray, position: int = 0) -> RouterDecision:
    """Full decision for one activation vector."""
    u = np.asarray(u, dtype=np.float64)
    if u.ndim != 1:
        raise ShapeError("route_token expects a single activation vector")
    alpha = router.affinities(u)
    sel = router.select(alpha)
    w = router.weights(alpha[sel])
    return RouterDecision(
        token_position=position,
        affinities=alpha,
        selected=[router.expert_order[int(i)] for i in sel],
        weights=w,
    )


class RoutingTrace:
    """Streaming aggregation of routing behaviour during evaluation.

    Accumulates, per site, the token-mean of full softmax probabilities
    and top-1 counts per expert.  The evaluation loop sets the current
    batch's validity masks so padding tokens never count.
    """

    def __init__(self, expert_order: list[str]):
        self.expert_order = list(expert_order)
        self.prob_sums: dict[str, np.ndarray] = {}
        self.top1_counts: dict[str, np.ndarray] = {}
        self.token_counts: dict[str, float] = {}
        self._masks: dict[str, np.ndarray | None] = {"enc": None, "dec": None}

    def set_batch_masks(self, enc_mask: np.ndarray, dec_mask: np.ndarray) -> None:
        self._masks = {"enc": enc_mask, "dec": dec_mask}

    def record(self, site: ModuleSite, probs: np.ndarray, top1: np.ndarray) -> None:
        mask = self._masks[site.stream]
        if mask is None:
            mask = np.ones(probs.shape[:-1])
        z = len(self.expert_order)
        sid = site.site_id
        if sid not in self.prob_sums:
            self.prob_sums[sid] = np.zeros(z)
            self.top1_counts[sid] = np.zeros(z)
            self.token_counts[sid] = 0.0
        self.prob_sums[sid] += (probs * mask[..., None]).sum(axis=(0, 1))
        flat_mask = mask.astype(bool)
        self.top1_counts[sid] += np.bincount(top1[flat_mask], minlength=z)
        self.token_counts[sid] += float(mask.sum())

    def mean_probabilities(self) -> dict[str, np.ndarray]:
        return {
            sid: self.prob_sums[sid] / self.token_counts[sid]
            for sid in self.prob_sums
            if self.token_counts[sid] > 0
        }

    def top1_fractions(self) -> dict[str, np.ndarray]:
        return {
            sid: self.top1_counts[sid] / self.token_counts[sid]
            for sid in self.top1_counts
            if self.token_counts[sid] > 0
        }


def routed_forward_hook(
    site: ModuleSite,
    router: SiteRouter,
    experts: list[LoraExpert],
    trace: RoutingTrace | None = None,
) -> Hook:
    """Per-token mixed-expert site output W u + sum_z w_z (B_z A_z u).

    Inference-only: decisions are made on raw activation data and the
    learned sigmoid never appears.
    """
    if [e.expert_id for e in experts] != router.expert_order:
        raise ConfigError("experts list does not match router expert order")
    mats = [
        (e.sites[site.site_id].A.data, e.sites[site.site_id].B.data) for e in experts
    ]

    def hook(u: Tensor, base: Tensor, _site: ModuleSite) -> Tensor:
        ud = u.data
        alpha = router.affinities(ud)  # [B, T, Z]
        sel = router.select(alpha)  # [B, T, k]
        w = router.weights(np.take_along_axis(alpha, sel, axis=-1))
        full_w = np.zeros_like(alpha)
        np.put_along_axis(full_w, sel, w, axis=-1)
        if trace is not None:
            probs = router.full_probabilities(ud)
            trace.record(site, probs, sel[..., 0])
        mixed = np.zeros(ud.shape[:-1] + (site.d,))
        for z, (a, b) in enumerate(mats):
            wz = full_w[..., z]
            if not wz.any():
                continue
            mixed += ((ud @ a.T) @ b.T) * wz[..., None]
        return base + T.constant(mixed)

    return hook


def routed_hooks(
    backbone: Backbone,
    routers: dict[str, SiteRouter],
    experts: list[LoraExpert],
    trace: RoutingTrace | None = None,
) -> dict[str, Hook]:
    return {
        sid: routed_forward_hook(backbone.sites[sid], router, experts, trace)
        for sid, router in routers.items()
    }


def build_routers(
    experts: list[LoraExpert],
    backbone: Backbone,
    k: int,
    score_mode: str = SCORE_COSINE,
    gate_rows_override: dict[str, np.ndarray] | None = None,
) -> dict[str, SiteRouter]:
    """One router per site the experts cover.

    `gate_rows_override` swaps in externally computed rows (activation
    means, singular vectors) while keeping the identical inference path.
    """
    site_ids = list(experts[0].sites)
    routers = {}
    for sid in site_ids:
        if gate_rows_override is not None and sid in gate_rows_override:
            routers[sid] = SiteRouter(
                site_id=sid,
                expert_order=[e.expert_id for e in experts],
                gate_rows=gate_rows_override[sid],
                n=backbone.sites[sid].n,
                k=k,
                score_mode=score_mode,
            )
        else:
            routers[sid] = build_router(experts, sid, k, score_mode)
    return routers
