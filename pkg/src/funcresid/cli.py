"""Command-line entry point: ``funcresid {fit,simulate,verify,casestudy}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import Dataset, parse_terms

log = logging.getLogger("funcresid")


def _add_plot_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--scale", choices=("normal", "uniform"), default="normal")
    p.add_argument("--x-bins", type=int, default=60)
    p.add_argument("--y-bins", type=int, default=80)
    p.add_argument("--span", type=float, default=2.0 / 3.0, help="LOWESS span in (0, 1]")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="funcresid", description="Functional residual diagnostics for discrete regression"
    )
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fit", help="fit a model to a CSV and write residual diagnostics")
    f.add_argument("data", type=Path, help="input CSV")
    f.add_argument("--outcome", required=True)
    f.add_argument(
        "--family", required=True,
        choices=("binary-logit", "cumulative-link", "adjacent-category", "poisson",
                 "quasi-poisson", "hurdle-poisson"),
    )
    f.add_argument("--terms", required=True, help='e.g. "x + x^2 + x1:x2 + bs(hour,7,3)"')
    f.add_argument("--zero-terms", help="hurdle zero-part terms (default: --terms)")
    f.add_argument("--link", choices=("logit", "probit", "cloglog"))
    f.add_argument("--max-category", type=int)
    f.add_argument("--delimiter", help="CSV delimiter (sniffed when omitted)")
    f.add_argument("--plot", nargs="*", default=None,
                   help="covariates to draw heatmaps for (default: all used columns)")
    f.add_argument("--out", type=Path, default=Path("fit_report"))
    _add_plot_args(f)

    s = sub.add_parser("simulate", help="draw a dataset from a registered scenario")
    s.add_argument("scenario", nargs="?")
    s.add_argument("--n", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", type=Path, help="output CSV (stdout when omitted)")
    s.add_argument("--list", action="store_true", help="list scenarios and exit")

    v = sub.add_parser("verify", help="run the theorem checks and print a JSON report")
    v.add_argument("--only", nargs="*", help="subset of checks")
    v.add_argument("--quick", action="store_true", help="smaller Monte Carlo sizes")
    v.add_argument("--out", type=Path, help="also write the JSON report here")

    c = sub.add_parser("casestudy", help="run the wine or bike refinement pipeline")
    c.add_argument("which", choices=("wine", "bike"))
    c.add_argument("data", type=Path, help="input CSV supplied by the user")
    c.add_argument("--config", type=Path, help="JSON config; unspecified keys keep defaults")
    c.add_argument("--out", type=Path, help="output directory (overrides the config)")
    return ap


def cmd_fit(args) -> int:
    from .diagnostics import discrete_edges, fnfn, heatmap, lowess_of_residuals
    from .models import ModelSpec, fit
    from .plotting import plot_fnfn, plot_heatmap
    from .residuals import functional_residuals, write_residuals_csv

    terms = parse_terms(args.terms)
    columns = sorted(terms.columns())
    if args.zero_terms:
        columns = sorted(set(columns) | parse_terms(args.zero_terms).columns())
    data = Dataset.from_csv(args.data, args.outcome, columns=columns, delimiter=args.delimiter)
    spec = ModelSpec(
        args.family, terms, link=args.link, max_category=args.max_category,
        zero_terms=args.zero_terms,
    )
    model = fit(spec, data)
    res = functional_residuals(model, data)
    out: Path = args.out
    out.mkdir(parents=True, exist_ok=True)
    summary = model.summary()
    curve = fnfn(res)
    summary["fnfn_sup_dev"] = curve.sup_dev
    summary["residual_rows"] = len(res)
    (out / "fit.json").write_text(json.dumps(summary, indent=2) + "\n")
    write_residuals_csv(res, data.y, out / "residuals.csv")
    plot_fnfn(curve, out / "fnfn")
    for col in args.plot if args.plot is not None else columns:
        x = data.column(col)
        smooth = None
        if np.unique(x).size > 1 and len(res) >= 3:
            smooth = lowess_of_residuals(res, x, args.scale, span=args.span)
        grid = heatmap(
            res, x, args.scale, x_bins=args.x_bins, y_bins=args.y_bins,
            x_edges=discrete_edges(x[res.index], max_values=args.x_bins),
        )
        plot_heatmap(grid, out / f"heatmap_{col.replace('.', '_')}", smooth, xlabel=col)
    print(json.dumps({"model": spec.describe(), "aic": summary["aic"],
                      "fnfn_sup_dev": curve.sup_dev, "out": str(out)}))
    return 0


def cmd_simulate(args) -> int:
    import pandas as pd

    from .simulation import SCENARIOS, simulate

    if args.list or not args.scenario:
        for name, spec in SCENARIOS.items():
            print(f"{name:22s} {spec.description}")
        return 0
    data = simulate(args.scenario, n=args.n, seed=args.seed)
    frame = pd.DataFrame(data.X, columns=list(data.names))
    frame.insert(0, "y", data.y)
    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(args.out, index=False, float_format="%.17g")
    else:
        frame.to_csv(sys.stdout, index=False, float_format="%.17g")
    return 0


def cmd_verify(args) -> int:
    from .verification import verification_report

    report = verification_report(args.only, quick=args.quick)
    text = json.dumps(report, indent=2)
    if args.out:
        args.out.write_text(text + "\n")
    print(text)
    return 0 if report["passed"] else 1


def cmd_casestudy(args) -> int:
    from .casestudy import bike_pipeline, load_config, wine_pipeline

    cfg = load_config(args.which, args.config)
    run = wine_pipeline if args.which == "wine" else bike_pipeline
    report = run(args.data, cfg, output_dir=args.out)
    out = args.out or Path(cfg.output_dir)
    print(json.dumps({
        "pipeline": report.pipeline,
        "rows_used": report.n_used,
        "stages": [
            {"name": s.name, "aic": s.aic, "dispersion": s.dispersion, "sup_dev": s.sup_dev}
            for s in report.stages
        ],
        "report": str(out / "report.json"),
        "index": str(out / "index.html"),
    }, indent=2))
    return 0


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    handlers = {
        "fit": cmd_fit,
        "simulate": cmd_simulate,
        "verify": cmd_verify,
        "casestudy": cmd_casestudy,
    }
    from .models import FitError

    try:
        return handlers[args.command](args)
    except (ValueError, KeyError, FileNotFoundError, FitError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
