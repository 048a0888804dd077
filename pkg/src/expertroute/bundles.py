"""Manifest + raw-array containers for every shareable artifact.

A bundle is a directory holding `manifest.json` and `data.bin`.  The
manifest records kind, format version, metadata, and for every named
array its shape and byte offset into `data.bin`, which stores raw
little-endian float64.  Arrays are written in sorted-name order and the
manifest with sorted keys, so save -> load -> save is byte-identical.

Weights travel, training data never does: expert bundles carry A/B/v and
hyperparameter metadata only, plus the fingerprint of the backbone they
were trained against, which loaders verify.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .backbone import Backbone, BackboneConfig
from .baselines import EmbeddingIndex, MergedExpert
from .errors import (
    BundleError,
    FingerprintMismatchError,
    FormatVersionError,
    TruncatedArrayError,
)
from .experts import LoraExpert, LoraSite
from .routing import SiteRouter
from .tensor import Tensor

FORMAT_VERSION = 1


def save_bundle(path: Path, kind: str, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = {}
    offset = 0
    with open(path / "data.bin", "wb") as fh:
        for name in sorted(arrays):
            arr = np.ascontiguousarray(arrays[name], dtype="<f8")
            fh.write(arr.tobytes())
            entries[name] = {
                "shape": list(arr.shape),
                "offset": offset,
                "count": int(arr.size),
            }
            offset += arr.size * 8
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "meta": meta,
        "arrays": entries,
    }
    (path / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    )


def load_bundle(path: Path, expected_kind: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.exists():
        raise BundleError(f"no manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise FormatVersionError(
            f"bundle format {version!r} unsupported (expected {FORMAT_VERSION})"
        )
    if expected_kind is not None and manifest.get("kind") != expected_kind:
        raise BundleError(
            f"bundle at {path} is kind {manifest.get('kind')!r}, wanted {expected_kind!r}"
        )
    blob = (path / "data.bin").read_bytes()
    arrays = {}
    for name, entry in manifest["arrays"].items():
        start = entry["offset"]
        end = start + entry["count"] * 8
        if end > len(blob):
            raise TruncatedArrayError(
                f"array {name!r} ends at byte {end}, file has {len(blob)}"
            )
        arrays[name] = (
            np.frombuffer(blob[start:end], dtype="<f8")
            .reshape(entry["shape"])
            .astype(np.float64)
        )
    return manifest["meta"], arrays


# ------------------------------------------------------------- backbone


def save_backbone(path: Path, backbone: Backbone) -> None:
    meta = {
        "config": backbone.config.to_dict(),
        "seed": backbone.config.seed,
        "frozen": backbone.frozen,
        "fingerprint": backbone.fingerprint(),
    }
    arrays = {name: t.data for name, t in backbone.params.items()}
    save_bundle(path, "backbone", meta, arrays)


def load_backbone(path: Path) -> Backbone:
    meta, arrays = load_bundle(path, "backbone")
    config = BackboneConfig.from_dict(meta["config"])
    params = {name: Tensor(arr, requires_grad=not meta["frozen"]) for name, arr in arrays.items()}
    backbone = Backbone(config, params)
    backbone.frozen = bool(meta["frozen"])
    actual = backbone.fingerprint()
    if actual != meta["fingerprint"]:
        raise FingerprintMismatchError(
            f"backbone content hash {actual[:12]} != manifest {meta['fingerprint'][:12]}"
        )
    return backbone


# --------------------------------------------------------------- expert


def save_expert(path: Path, expert: LoraExpert, backbone_fingerprint: str) -> None:
    arrays = {}
    for sid, entry in expert.sites.items():
        arrays[f"{sid}.A"] = entry.A.data
        arrays[f"{sid}.B"] = entry.B.data
        arrays[f"{sid}.v"] = expert.gates[sid].data
    meta = {
        "expert_id": expert.expert_id,
        "rank": expert.rank,
        "sites": sorted(expert.sites),
        "backbone_fingerprint": backbone_fingerprint,
        **{k: v for k, v in expert.meta.items()},
    }
    save_bundle(path, "expert", meta, arrays)


def load_expert(path: Path, backbone: Backbone | None = None) -> LoraExpert:
    meta, arrays = load_bundle(path, "expert")
    if backbone is not None:
        actual = backbone.fingerprint()
        if actual != meta["backbone_fingerprint"]:
            raise FingerprintMismatchError(
                f"expert {meta['expert_id']!r} was trained against backbone "
                f"{meta['backbone_fingerprint'][:12]}, not {actual[:12]}"
            )
    sites = {}
    gates = {}
    for sid in meta["sites"]:
        sites[sid] = LoraSite(
            A=Tensor(arrays[f"{sid}.A"], requires_grad=True),
            B=Tensor(arrays[f"{sid}.B"], requires_grad=True),
        )
        gates[sid] = Tensor(arrays[f"{sid}.v"], requires_grad=True)
    extra = {
        k: v
        for k, v in meta.items()
        if k not in ("expert_id", "rank", "sites", "backbone_fingerprint")
    }
    expert = LoraExpert(
        expert_id=meta["expert_id"],
        rank=int(meta["rank"]),
        sites=sites,
        gates=gates,
        meta=extra,
    )
    if backbone is not None:
        expert.validate_against(backbone)
    return expert


# --------------------------------------------------------------- routers


def save_routers(
    path: Path, routers: dict[str, SiteRouter], kind: str, backbone_fingerprint: str
) -> None:
    first = next(iter(routers.values()))
    meta = {
        "router_kind": kind,
        "k": first.k,
        "score_mode": first.score_mode,
        "expert_order": first.expert_order,
        "backbone_fingerprint": backbone_fingerprint,
        "sites": sorted(routers),
    }
    arrays = {f"{sid}.gates": r.gate_rows for sid, r in routers.items()}
    save_bundle(path, "router", meta, arrays)


def load_routers(path: Path, backbone: Backbone | None = None) -> tuple[str, dict[str, SiteRouter]]:
    meta, arrays = load_bundle(path, "router")
    if backbone is not None:
        actual = backbone.fingerprint()
        if actual != meta["backbone_fingerprint"]:
            raise FingerprintMismatchError(
                f"router bundle built against backbone "
                f"{meta['backbone_fingerprint'][:12]}, not {actual[:12]}"
            )
    routers = {}
    for sid in meta["sites"]:
        rows = arrays[f"{sid}.gates"]
        routers[sid] = SiteRouter(
            site_id=sid,
            expert_order=list(meta["expert_order"]),
            gate_rows=rows,
            n=rows.shape[1],
            k=int(meta["k"]),
            score_mode=meta["score_mode"],
        )
    return meta["router_kind"], routers


# ----------------------------------------------------------------- index


def save_index(path: Path, index: EmbeddingIndex, backbone_fingerprint: str) -> None:
    meta = {
        "expert_ids": index.expert_ids,
        "backbone_fingerprint": backbone_fingerprint,
    }
    arrays = {
        "embeddings": index.embeddings,
        "sources": index.sources.astype(np.float64),
    }
    save_bundle(path, "index", meta, arrays)


def load_index(path: Path, backbone: Backbone | None = None) -> EmbeddingIndex:
    meta, arrays = load_bundle(path, "index")
    if backbone is not None:
        actual = backbone.fingerprint()
        if actual != meta["backbone_fingerprint"]:
            raise FingerprintMismatchError(
                f"index built against backbone "
                f"{meta['backbone_fingerprint'][:12]}, not {actual[:12]}"
            )
    return EmbeddingIndex(
        expert_ids=list(meta["expert_ids"]),
        embeddings=arrays["embeddings"],
        sources=arrays["sources"].astype(np.int64),
    )


# ---------------------------------------------------------------- merged


def save_merged(path: Path, merged: MergedExpert, backbone_fingerprint: str) -> None:
    meta = {
        "mode": merged.mode,
        "backbone_fingerprint": backbone_fingerprint,
        "sites": sorted(merged.deltas),
    }
    arrays = {f"{sid}.delta": d for sid, d in merged.deltas.items()}
    save_bundle(path, "merged", meta, arrays)


def load_merged(path: Path, backbone: Backbone | None = None) -> MergedExpert:
    meta, arrays = load_bundle(path, "merged")
    if backbone is not None:
        actual = backbone.fingerprint()
        if actual != meta["backbone_fingerprint"]:
            raise FingerprintMismatchError(
                f"merged bundle built against backbone "
                f"{meta['backbone_fingerprint'][:12]}, not {actual[:12]}"
            )
    return MergedExpert(
        mode=meta["mode"],
        deltas={sid: arrays[f"{sid}.delta"] for sid in meta["sites"]},
    )
