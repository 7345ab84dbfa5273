"""Render the CSV artifacts of an experiment to PNG figures.

Rendering is a convenience layer on top of the delimited output: every
figure is rebuilt from the already-written CSV files, so the plots can be
regenerated (or skipped with --no-figures) without touching the data path.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

_RC = {
    "figure.figsize": (5.0, 3.4),
    "figure.dpi": 140,
    "font.size": 9,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "legend.fontsize": 8,
    "lines.linewidth": 1.2,
}

_YLABELS = {
    "E1": "constraint probability",
    "E2": "mean kinetic energy",
    "E2p": "mean kinetic energy",
    "E3": "variance growth rate",
    "E3p": "variance growth rate",
}


def _read_curve_csv(path: Path) -> tuple[list[str], list[list[float]]]:
    lines = path.read_text(encoding="ascii").strip().splitlines()
    header = lines[0].split(",")
    data = [[float(v) if v else float("nan") for v in ln.split(",")] for ln in lines[1:]]
    return header, data


def render_curve_file(csv_path: Path, png_path: Path, ylabel: str = "") -> Path:
    header, data = _read_curve_csv(csv_path)
    xs = [row[0] for row in data]
    with plt.rc_context(_RC):
        fig, ax = plt.subplots()
        for col, label in enumerate(header[1:], start=1):
            if label.endswith("stderr"):
                continue
            ax.plot(xs, [row[col] for row in data], label=label)
        ax.set_xlabel(header[0])
        ax.set_ylabel(ylabel or csv_path.stem.replace("_", " "))
        ax.legend(loc="best")
        fig.tight_layout()
        fig.savefig(png_path)
        plt.close(fig)
    return png_path


def render_sweep_table(csv_path: Path, png_path: Path) -> Path:
    """One line per (quantity, method) over the sweep values."""
    lines = csv_path.read_text(encoding="ascii").strip().splitlines()
    header = lines[0].split(",")
    xs = [float(v) for v in header[2:]]
    with plt.rc_context(_RC):
        fig, ax = plt.subplots()
        for ln in lines[1:]:
            cells = ln.split(",")
            ys = [float(v) if v else float("nan") for v in cells[2:]]
            ax.plot(xs, ys, marker="o", markersize=3, label=f"{cells[0]} ({cells[1]})")
        ax.set_xlabel("constraint half-width")
        ax.set_ylabel("stationary value")
        ax.legend(loc="best")
        fig.tight_layout()
        fig.savefig(png_path)
        plt.close(fig)
    return png_path


def render_experiment(result, cfg) -> list[Path]:
    """PNG per CSV artifact, written alongside the data files."""
    rendered: list[Path] = []
    for artifact in list(result.artifacts):
        if artifact.suffix != ".csv":
            continue
        png = artifact.with_suffix(".png")
        stem = artifact.stem
        if stem in ("table1", "table2"):
            rendered.append(render_sweep_table(artifact, png))
        elif stem == "results":
            continue
        else:
            ylabel = next((v for k, v in _YLABELS.items() if stem.startswith(k)), "")
            rendered.append(render_curve_file(artifact, png, ylabel))
    return rendered
