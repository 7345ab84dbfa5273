"""Deterministic text artifacts: CSV tables, curve files, field dumps, manifests.

Numbers are written with 17 significant digits so reruns with the same
configuration and seed produce byte-identical files; the manifest is the
only artifact carrying a timestamp.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from datetime import datetime, timezone
from pathlib import Path

import numpy as np


def fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return f"{float(x):.17g}"


def write_csv(path: str | Path, header: list[str], rows: list[list]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(v if isinstance(v, str) else fmt(v) for v in row))
    path.write_text("\n".join(lines) + "\n", encoding="ascii")
    return path


def write_curve_csv(path: str | Path, times, series: dict[str, np.ndarray]) -> Path:
    """Curve file: first column the abscissa, one column per labelled series."""
    header = ["T"] + list(series)
    rows = []
    for idx, t in enumerate(times):
        rows.append([t] + [vals[idx] for vals in series.values()])
    return write_csv(path, header, rows)


def write_manifest(path: str | Path, payload: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    body = dict(payload)
    body["created"] = datetime.now(timezone.utc).isoformat(timespec="seconds")
    path.write_text(json.dumps(body, indent=2, sort_keys=True, default=str) + "\n",
                    encoding="utf-8")
    return path


def save_field_text(path: str | Path, field_vec: np.ndarray, grid, bound: float) -> Path:
    """Full-field dump, row-major in the node order, with a geometry header."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="ascii") as fh:
        fh.write(
            f"# I={grid.I} J={grid.J} Y={fmt(grid.y_half)} "
            f"dz={fmt(bound * grid.dzeta)} dy={fmt(grid.dy)}\n"
        )
        for v in field_vec:
            fh.write(fmt(v) + "\n")
    return path


def write_cycles_csv(path: str | Path, durations, increments) -> Path:
    rows = [[i, d, inc] for i, (d, inc) in enumerate(zip(durations, increments))]
    return write_csv(path, ["cycle", "duration", "deformation_increment"], rows)


@dataclass
class ResultRow:
    """One scalar with full provenance."""

    target: str
    quantity: str
    pipeline: str
    method: str
    param_name: str
    param_value: float
    value: float
    stderr: float | None = None
    itilde: int | None = None
    jtilde: int | None = None
    y_half: float | None = None
    dt: float | None = None
    lam: float | None = None
    seed: int | None = None
    n_paths: int | None = None
    note: str = ""

    @staticmethod
    def header() -> list[str]:
        return [
            "target", "quantity", "pipeline", "method", "param_name", "param_value",
            "value", "stderr", "itilde", "jtilde", "y_half", "dt", "lam", "seed",
            "n_paths", "note",
        ]

    def to_list(self) -> list:
        d = asdict(self)
        return [d[k] for k in self.header()]


def write_results_csv(path: str | Path, rows: list[ResultRow]) -> Path:
    return write_csv(path, ResultRow.header(), [r.to_list() for r in rows])


def write_wide_table(
    path: str | Path, rows: list[ResultRow], param_values: list[float]
) -> Path:
    """Sweep table in the two-row-per-quantity layout: methods stacked under
    each quantity, one column per sweep value."""
    header = ["quantity", "method"] + [fmt(v) for v in param_values]
    seen: dict[tuple[str, str], dict[float, float]] = {}
    order: list[tuple[str, str]] = []
    for r in rows:
        key = (r.quantity, r.method)
        if key not in seen:
            seen[key] = {}
            order.append(key)
        seen[key][r.param_value] = r.value
    body = []
    for quantity, method in order:
        cells = [seen[(quantity, method)].get(v) for v in param_values]
        body.append([quantity, method] + cells)
    return write_csv(path, header, body)
