"""Comparison methods that recycle the same expert pool.

Average Activation swaps learned gate rows for per-task mean activations
and reuses the identical routing path.  The singular-vector router
("arrow") derives gate rows from the expert weights themselves and scores
by absolute dot product.  Retrieval picks one expert per example by
nearest stored embedding.  Merging collapses the pool into a single dense
delta.  Oracle and best-individual pick experts from a measured score
table.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .backbone import Backbone, Hook, ModuleSite
from .data import pad_batch
from .errors import ConfigError, ConvergenceError, DomainError, ShapeError
from .experts import LoraExpert
from .rng import named_stream
from .routing import SCORE_ABSDOT, SiteRouter, build_routers, standardize
from .taskgen import ExampleSet
from .tensor import Tensor


# ---------------------------------------------------- average activation


@dataclass
class ActivationStats:
    """Per-site mean input activation of one expert's own training data."""

    expert_id: str
    site_means: dict[str, np.ndarray]
    sample_count: int


def collect_activation_stats(
    backbone: Backbone,
    expert_id: str,
    examples: ExampleSet,
    max_examples: int,
    seed: int,
    batch_size: int = 64,
) -> ActivationStats:
    """Token-mean of u over sampled examples at every site (pads excluded)."""
    if not examples.examples:
        raise ConfigError(f"no examples to trace for expert {expert_id!r}")
    rows = examples.pairs()
    if len(rows) > max_examples:
        rng = named_stream(seed, f"avgact.sample.{expert_id}")
        idx = rng.choice(len(rows), size=max_examples, replace=False)
        rows = [rows[i] for i in sorted(idx)]
    site_ids = list(backbone.sites)
    sums = {sid: np.zeros(backbone.sites[sid].n) for sid in site_ids}
    counts = {sid: 0.0 for sid in site_ids}
    for start in range(0, len(rows), batch_size):
        batch = pad_batch(rows[start : start + batch_size])
        _, trace = backbone.forward(
            batch.input_ids,
            batch.decoder_ids,
            trace_sites=site_ids,
            enc_mask=batch.enc_mask,
        )
        masks = {"enc": batch.enc_mask, "dec": batch.target_mask}
        for sid in site_ids:
            u = trace.per_site[sid]
            mask = masks[backbone.sites[sid].stream]
            sums[sid] += (u * mask[..., None]).sum(axis=(0, 1))
            counts[sid] += mask.sum()
    means = {sid: sums[sid] / counts[sid] for sid in site_ids}
    return ActivationStats(expert_id, means, len(rows))


def average_activation_routers(
    experts: list[LoraExpert],
    stats: list[ActivationStats],
    backbone: Backbone,
    k: int,
) -> dict[str, SiteRouter]:
    """Routers whose gate rows are standardized mean activations."""
    if [s.expert_id for s in stats] != [e.expert_id for e in experts]:
        raise ConfigError("stats order does not match expert order")
    overrides: dict[str, np.ndarray] = {}
    for sid in experts[0].sites:
        overrides[sid] = np.stack([standardize(s.site_means[sid]) for s in stats])
    return build_routers(experts, backbone, k, gate_rows_override=overrides)


# ------------------------------------------------- singular-vector gates


def top_right_singular_vector(
    delta: np.ndarray, tol: float = 1e-10, max_iters: int = 10_000, seed: int = 0
) -> np.ndarray:
    """Power iteration on delta^T delta for the first right singular vector."""
    n = delta.shape[1]
    gram = delta.T @ delta
    rng = named_stream(seed, "power.init")
    x = rng.normal(size=n)
    x /= np.linalg.norm(x)
    for _ in range(max_iters):
        y = gram @ x
        norm = np.linalg.norm(y)
        if norm == 0.0:
            raise ConvergenceError(
                "power iteration hit the zero vector (rank-0 update?)"
            )
        y /= norm
        residual = np.linalg.norm(y - x * np.sign(x @ y))
        x = y
        if residual < tol:
            return x
    raise ConvergenceError(
        f"power iteration did not converge in {max_iters} iters; last residual {residual:.3e}"
    )


def arrow_routers(
    experts: list[LoraExpert], backbone: Backbone, k: int, seed: int = 0
) -> dict[str, SiteRouter]:
    """Gate rows from each expert's B A update; |v . u| scoring."""
    overrides: dict[str, np.ndarray] = {}
    for sid in experts[0].sites:
        rows = []
        for e in experts:
            entry = e.sites.get(sid)
            if entry is None:
                raise ConfigError(f"expert {e.expert_id!r} missing site {sid!r}")
            rows.append(top_right_singular_vector(entry.B.data @ entry.A.data, seed=seed))
        overrides[sid] = np.stack(rows)
    return build_routers(
        experts, backbone, k, score_mode=SCORE_ABSDOT, gate_rows_override=overrides
    )


# -------------------------------------------------------------- retrieval


@dataclass
class EmbeddingIndex:
    """Stored example embeddings, each tagged with its source expert."""

    expert_ids: list[str]
    embeddings: np.ndarray  # [N, d_model]
    sources: np.ndarray  # [N] int index into expert_ids

    def __post_init__(self):
        if self.embeddings.shape[0] != self.sources.shape[0]:
            raise ShapeError("embeddings and sources disagree on N")


def embed_examples(
    backbone: Backbone, inputs: list[list[int]], batch_size: int = 64
) -> np.ndarray:
    """Mean-pooled final encoder states of the frozen base backbone."""
    out = []
    for start in range(0, len(inputs), batch_size):
        chunk = inputs[start : start + batch_size]
        batch = pad_batch([(inp, [2]) for inp in chunk])
        _, trace = backbone.forward(
            batch.input_ids,
            batch.decoder_ids,
            trace_sites=["decoder.0.cross.k"],
            enc_mask=batch.enc_mask,
        )
        # cross.k input IS the final encoder memory
        memory = trace.per_site["decoder.0.cross.k"]
        pooled = (memory * batch.enc_mask[..., None]).sum(axis=1)
        pooled /= batch.enc_mask.sum(axis=1)[..., None]
        out.append(pooled)
    return np.concatenate(out, axis=0)


def build_embedding_index(
    backbone: Backbone,
    experts: list[LoraExpert],
    train_sets: dict[str, ExampleSet],
    max_per_expert: int,
    seed: int,
) -> EmbeddingIndex:
    expert_ids = [e.expert_id for e in experts]
    all_inputs: list[list[int]] = []
    sources: list[int] = []
    for zi, e in enumerate(experts):
        eset = train_sets[e.expert_id]
        if not eset.examples:
            raise ConfigError(f"empty example set for expert {e.expert_id!r}")
        rows = [ex.input_ids for ex in eset.examples]
        if len(rows) > max_per_expert:
            rng = named_stream(seed, f"index.sample.{e.expert_id}")
            idx = rng.choice(len(rows), size=max_per_expert, replace=False)
            rows = [rows[i] for i in sorted(idx)]
        all_inputs.extend(rows)
        sources.extend([zi] * len(rows))
    embeddings = embed_examples(backbone, all_inputs)
    return EmbeddingIndex(expert_ids, embeddings, np.asarray(sources))


def retrieve_expert(index: EmbeddingIndex, query_embedding: np.ndarray) -> str:
    """Expert of the nearest stored example by cosine similarity."""
    if index.embeddings.shape[0] == 0:
        raise ConfigError("embedding index is empty")
    qn = np.linalg.norm(query_embedding)
    if qn == 0.0:
        raise DomainError("query embedding has zero norm")
    norms = np.linalg.norm(index.embeddings, axis=1)
    if np.any(norms == 0.0):
        raise DomainError("stored embedding has zero norm")
    sims = index.embeddings @ query_embedding / (norms * qn)
    return index.expert_ids[int(index.sources[int(np.argmax(sims))])]


# ---------------------------------------------------------------- merging


@dataclass
class MergedExpert:
    """Dense per-site delta standing in for the whole pool; no routing."""

    mode: str  # "outer-product" | "parameter-average"
    deltas: dict[str, np.ndarray]  # site_id -> [d, n]


def merge_experts(experts: list[LoraExpert], mode: str = "outer-product") -> MergedExpert:
    """Uniform average of the experts, after or before the outer product.

    "outer-product" averages the dense updates B_z A_z (rank can exceed any
    individual r); "parameter-average" averages A's and B's first and then
    multiplies.
    """
    if not experts:
        raise ConfigError("cannot merge an empty expert pool")
    site_ids = set(experts[0].sites)
    for e in experts[1:]:
        if set(e.sites) != site_ids:
            raise ConfigError(
                f"expert {e.expert_id!r} covers different sites than the pool"
            )
    deltas: dict[str, np.ndarray] = {}
    for sid in experts[0].sites:
        if mode == "outer-product":
            acc = sum(e.sites[sid].B.data @ e.sites[sid].A.data for e in experts)
            deltas[sid] = acc / len(experts)
        elif mode == "parameter-average":
            a_bar = sum(e.sites[sid].A.data for e in experts) / len(experts)
            b_bar = sum(e.sites[sid].B.data for e in experts) / len(experts)
            deltas[sid] = b_bar @ a_bar
        else:
            raise ConfigError(f"unknown merge mode {mode!r}")
    return MergedExpert(mode, deltas)


def merged_hooks(backbone: Backbone, merged: MergedExpert) -> dict[str, Hook]:
    def make(site: ModuleSite, delta: np.ndarray) -> Hook:
        def hook(u: Tensor, base: Tensor, _site: ModuleSite) -> Tensor:
            return base + T.constant(u.data @ delta.T)

        return hook

    return {
        sid: make(backbone.sites[sid], delta) for sid, delta in merged.deltas.items()
    }


# ------------------------------------------------------ oracle selection


def oracle_route(scores: dict[str, float]) -> str:
    """Expert with the best score on one dataset; ties to lowest index."""
    if not scores:
        raise ConfigError("empty score table")
    return max(scores, key=lambda e: (scores[e], -list(scores).index(e)))


def best_individual(per_dataset_scores: dict[str, dict[str, float]]) -> str:
    """Expert with the best mean score across all evaluation datasets."""
    if not per_dataset_scores:
        raise ConfigError("empty score table")
    experts = list(next(iter(per_dataset_scores.values())))
    means = {
        e: float(np.mean([per_dataset_scores[d][e] for d in per_dataset_scores]))
        for e in experts
    }
    return oracle_route(means)
