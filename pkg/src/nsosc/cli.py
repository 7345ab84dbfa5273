"""Command line front end.

Verbs:
  solve      one quantity, one parameter point
  sweep      one or more quantities over a parameter sweep
  reproduce  built-in study by tag (table1, table2, tabemper, fig2, fig3, fig4)
  compare    cross-method report from a results.csv

The default output directory comes from $NSOSC_OUTDIR; every run writes
results.csv plus a manifest, and renders PNG figures next to the CSV
artifacts unless --no-figures is given.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .experiments import (
    ExperimentConfig,
    compare_report,
    load_config,
    run_experiment,
)
from .reporting import ResultRow, write_csv


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI config file; flags override it")
    p.add_argument("--out", dest="out_dir", help="output directory (default $NSOSC_OUTDIR)")
    p.add_argument("--no-figures", dest="figures", action="store_false", default=None,
                   help="skip PNG rendering")
    p.add_argument("--paper-scale", dest="paper_scale", action="store_true", default=None,
                   help="full-size grids and time steps (slow)")
    # oscillator
    p.add_argument("--kind", choices=["elasto-plastic", "obstacle"])
    p.add_argument("--c0", type=float)
    p.add_argument("--k", type=float)
    p.add_argument("--bound", type=float, help="plastic yield or obstacle position")
    p.add_argument("--restitution", type=float)
    p.add_argument("--eps", type=float, help="neighborhood radius for the proximity presets")
    # discretization
    p.add_argument("--itilde", type=int)
    p.add_argument("--jtilde", type=int)
    p.add_argument("--y-half", dest="y_half", type=float)
    p.add_argument("--pde-dt", dest="pde_dt", type=float)
    p.add_argument("--lam", type=float)
    p.add_argument("--mu", type=float)
    # monte carlo
    p.add_argument("--paths", dest="n_paths", type=int)
    p.add_argument("--mc-dt", dest="mc_dt", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--burn-in", dest="burn_in", type=float)
    p.add_argument("--mc-horizon", dest="mc_horizon", type=float)
    # quantity
    p.add_argument("--horizon", type=float)
    p.add_argument("--lag", type=float)
    p.add_argument("--pipeline", help="override the preset's default pipeline")
    p.add_argument("--methods", help="comma list from pde,mc,sup")


def _overrides(args: argparse.Namespace) -> dict:
    skip = {"config", "command", "tag", "presets", "values", "results", "tolerance"}
    over = {k: v for k, v in vars(args).items() if k not in skip and v is not None}
    if getattr(args, "presets", None):
        over["presets"] = tuple(s.strip() for s in args.presets.split(","))
    if getattr(args, "values", None):
        over["sweep_values"] = tuple(float(s) for s in args.values.split(","))
    if over.get("methods"):
        over["methods"] = tuple(s.strip() for s in over["methods"].split(","))
    return over


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nsosc",
        description="statistics of stochastic elasto-plastic and vibro-impact oscillators",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_solve = sub.add_parser("solve", help="evaluate one quantity")
    p_solve.add_argument("--presets", default="E1", help="comma list of quantity presets")
    _add_common(p_solve)

    p_sweep = sub.add_parser("sweep", help="evaluate quantities over a bound sweep")
    p_sweep.add_argument("--presets", default="E1", help="comma list of quantity presets")
    p_sweep.add_argument("--values", required=True, help="comma list of bound values")
    _add_common(p_sweep)

    p_rep = sub.add_parser("reproduce", help="run a built-in study")
    p_rep.add_argument("tag", choices=["table1", "table2", "tabemper", "fig2", "fig3", "fig4"])
    _add_common(p_rep)

    p_cmp = sub.add_parser("compare", help="cross-method report from results.csv files")
    p_cmp.add_argument("results", nargs="+", help="results.csv paths")
    p_cmp.add_argument("--out", dest="out_dir", default=None)
    return parser


def _load_rows(paths: list[str]) -> list[ResultRow]:
    rows: list[ResultRow] = []
    for path in paths:
        lines = Path(path).read_text(encoding="ascii").strip().splitlines()
        header = lines[0].split(",")
        for ln in lines[1:]:
            cells = dict(zip(header, ln.split(",")))
            rows.append(ResultRow(
                target=cells["target"],
                quantity=cells["quantity"],
                pipeline=cells["pipeline"],
                method=cells["method"],
                param_name=cells["param_name"],
                param_value=float(cells["param_value"]),
                value=float(cells["value"]),
                stderr=float(cells["stderr"]) if cells.get("stderr") else None,
                note=cells.get("note", ""),
            ))
    return rows


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)

    if args.command == "compare":
        rows = _load_rows(args.results)
        report = compare_report(rows)
        sys.stdout.write(report.render_text())
        if args.out_dir:
            out = Path(args.out_dir)
            out.mkdir(parents=True, exist_ok=True)
            write_csv(out / "compare.csv",
                      ["quantity", "param_value", "method_ref", "method_other",
                       "value_ref", "value_other", "delta", "tolerance", "status"],
                      report.to_rows())
        if report.status == "no comparable pairs":
            sys.stdout.write("no comparable pairs\n")
            return 0
        return 0 if report.all_passed else 1

    over = _overrides(args)
    if args.command == "sweep":
        over["target"] = "sweep"
    elif args.command == "reproduce":
        over["target"] = args.tag
    else:
        over["target"] = "solve"
    try:
        cfg = load_config(args.config, over)
    except (ValueError, FileNotFoundError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 2

    result = run_experiment(cfg)
    for row in result.rows:
        se = f" +- {row.stderr:.3g}" if row.stderr else ""
        sys.stdout.write(
            f"{row.quantity:>16s} [{row.param_name}={row.param_value:g}] "
            f"{row.method}: {row.value:.6g}{se}\n"
        )
    if result.failures:
        for failure in result.failures:
            sys.stderr.write(f"failed: {failure['job']}: {failure['error']}\n")
        sys.stderr.write(f"partial results kept in {result.out_dir}\n")
        return 1
    sys.stdout.write(f"artifacts in {result.out_dir}\n")
    return 0


if __name__ == "__main__":  # pragma: no cover
    raise SystemExit(main())
