"""Comparison tables and routing matrices as CSV/JSON files."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .analysis import layer_of
from .errors import ConfigError
from .evalrun import METHOD_ORDER, EvalReport


def _fmt(x: float) -> str:
    # repr round-trips float64 exactly
    return repr(float(x))


def comparison_rows(
    reports: list[EvalReport], dataset_order: list[str] | None = None
) -> tuple[list[str], list[list[str]]]:
    """Header + rows (method, per-dataset accuracy, mean), fixed method order."""
    if not reports:
        raise ConfigError("no reports to emit")
    if dataset_order is None:
        dataset_order = list(reports[0].per_dataset)
    by_method = {r.method: r for r in reports}
    header = ["method", *dataset_order, "mean"]
    rows = []
    for method in METHOD_ORDER:
        r = by_method.get(method)
        if r is None:
            continue
        cells = [method]
        for ds in dataset_order:
            cells.append(_fmt(r.per_dataset[ds]) if ds in r.per_dataset else "")
        cells.append(_fmt(r.mean_accuracy))
        rows.append(cells)
    return header, rows


def emit_report(
    reports: list[EvalReport],
    fmt: str,
    out_path: Path,
    dataset_order: list[str] | None = None,
) -> list[Path]:
    """Write the comparison table plus per-layer routing matrices.

    Returns the list of files written.  Routing matrices (rows = layers,
    columns = experts, row-stochastic) are emitted for every report that
    recorded routing, one CSV per (method, dataset).
    """
    out_path = Path(out_path)
    out_path.mkdir(parents=True, exist_ok=True)
    header, rows = comparison_rows(reports, dataset_order)
    written: list[Path] = []

    if fmt == "csv":
        table = out_path / "comparison.csv"
        with open(table, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            writer.writerows(rows)
        written.append(table)
    elif fmt == "json":
        table = out_path / "comparison.json"
        payload = {
            "datasets": header[1:-1],
            "methods": {
                row[0]: {
                    "per_dataset": {
                        ds: float(cell)
                        for ds, cell in zip(header[1:-1], row[1:-1])
                        if cell != ""
                    },
                    "mean": float(row[-1]),
                }
                for row in rows
            },
        }
        table.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
        written.append(table)
    else:
        raise ConfigError(f"unknown report format {fmt!r}")

    for report in reports:
        for ds, per_site in report.routing.items():
            layers: dict[str, list[np.ndarray]] = {}
            for sid, vec in per_site.items():
                layers.setdefault(layer_of(sid), []).append(vec)
            matrix_path = out_path / f"routing_{report.method}_{ds}.csv"
            with open(matrix_path, "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["layer"] + [f"expert_{i}" for i in range(len(next(iter(per_site.values()))))])
                for layer in sorted(layers):
                    mean = np.mean(layers[layer], axis=0)
                    writer.writerow([layer] + [_fmt(x) for x in mean])
            written.append(matrix_path)
    return written
