"""Routing-distribution analysis: KL alignment with oracle choices.

Distributions are token means of the full softmax over experts, kept per
site and aggregated per layer.  The KL between two routing distributions
is computed per site and averaged; the oracle's distribution is the
one-hot vector on its chosen expert.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError

KL_EPS = 1e-9


@dataclass
class RoutingDistribution:
    expert_order: list[str]
    per_site: dict[str, np.ndarray]
    per_layer: dict[str, np.ndarray]

    def __post_init__(self):
        for name, vec in {**self.per_site, **self.per_layer}.items():
            if vec.shape != (len(self.expert_order),):
                raise ShapeError(f"distribution at {name} has wrong width")
            if np.any(vec < 0) or abs(vec.sum() - 1.0) > 1e-9:
                raise ConfigError(f"distribution at {name} is not a probability vector")


def layer_of(site_id: str) -> str:
    return ".".join(site_id.split(".")[:2])


def routing_distribution(
    mean_probs: dict[str, np.ndarray], expert_order: list[str]
) -> RoutingDistribution:
    """Per-site token-mean probabilities plus a per-layer aggregate view."""
    if not mean_probs:
        raise ConfigError("empty routing trace")
    layers: dict[str, list[np.ndarray]] = {}
    for sid, vec in mean_probs.items():
        layers.setdefault(layer_of(sid), []).append(vec)
    per_layer = {layer: np.mean(vecs, axis=0) for layer, vecs in layers.items()}
    return RoutingDistribution(list(expert_order), dict(mean_probs), per_layer)


def one_hot_distribution(
    expert_order: list[str], expert_id: str, site_ids: list[str]
) -> RoutingDistribution:
    vec = np.zeros(len(expert_order))
    vec[expert_order.index(expert_id)] = 1.0
    per_site = {sid: vec.copy() for sid in site_ids}
    return routing_distribution(per_site, expert_order)


def kl_scalar(p: np.ndarray, q: np.ndarray, eps: float = KL_EPS) -> float:
    """sum p ln(p/q) with epsilon-smoothed, renormalized q."""
    q = (np.asarray(q, dtype=np.float64) + eps)
    q = q / q.sum()
    p = np.asarray(p, dtype=np.float64)
    mask = p > 0
    return float(np.sum(p[mask] * np.log(p[mask] / q[mask])))


def kl_divergence(
    p: RoutingDistribution, q: RoutingDistribution, eps: float = KL_EPS
) -> tuple[dict[str, float], float]:
    """Per-site KL(p || q) plus the mean over sites."""
    if p.expert_order != q.expert_order:
        raise ConfigError("expert orders differ between distributions")
    if set(p.per_site) != set(q.per_site):
        raise ConfigError("site sets differ between distributions")
    per_site = {sid: kl_scalar(p.per_site[sid], q.per_site[sid], eps) for sid in p.per_site}
    return per_site, float(np.mean(list(per_site.values())))


def pearson(xs: list[float], ys: list[float]) -> float | None:
    """Pearson correlation; None when either series has zero variance."""
    if len(xs) != len(ys) or len(xs) < 2:
        raise ConfigError("need two equal-length series of at least 2 points")
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    xc, yc = x - x.mean(), y - y.mean()
    denom = np.sqrt((xc * xc).sum() * (yc * yc).sum())
    if denom == 0.0:
        return None
    return float((xc * yc).sum() / denom)


def correlate_kl_vs_accuracy(
    kls: dict[str, float], accuracies: dict[str, float]
) -> float | None:
    """Correlation between per-dataset oracle-alignment KL and accuracy."""
    if set(kls) != set(accuracies):
        raise ConfigError("dataset sets differ between KL and accuracy series")
    if len(kls) < 3:
        raise ConfigError("need at least 3 datasets for the correlation")
    order = sorted(kls)
    return pearson([kls[d] for d in order], [accuracies[d] for d in order])
