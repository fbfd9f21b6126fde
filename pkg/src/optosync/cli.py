"""Command-line entry point: ``optosync run|sweep|fit|budget|presets``.

Exit codes: 0 success, 2 scenario load error, 3 fit failure, 4 tracking lost.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys

import numpy as np

from . import hom
from .io import budget_report, emit_outputs, read_dip_csv
from .scenario import ScenarioError, list_presets, resolve
from .simulate import arm_budgets, run_dip_scan, run_sweep

EXIT_OK, EXIT_LOAD, EXIT_FIT, EXIT_TRACKING = 0, 2, 3, 4


def _load(args):
    scn = resolve(args.scenario)
    if getattr(args, "seed", None) is not None:
        scn = scn.with_seed(args.seed)
    return scn


def _values(text: str) -> list[float]:
    text = text.strip()
    if not text:
        return []
    return [float(v) for v in text.split(",")]


def cmd_run(args) -> int:
    scn = _load(args)
    res = run_dip_scan(scn, args.mode, workers=args.workers)
    paths = emit_outputs(res, args.out)
    if res.servo_trace is not None and scn.servo_enabled and res.servo_trace.lost:
        print(f"tracking lost in {res.servo_trace.lost} servo measurements", file=sys.stderr)
        return EXIT_TRACKING
    if not res.fit_ok:
        print(f"fit failed: {res.fit_error}; raw data in {paths['dip']}", file=sys.stderr)
        return EXIT_FIT
    print(f"V = {res.visibility:.4f} +/- {res.sigma_visibility:.4f} "
          f"(lower bound {res.lower_bound:.4f}); outputs in {args.out}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    scn = _load(args)
    try:
        rows = run_sweep(scn, args.param, _values(args.values), args.mode)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_LOAD
    out = open(args.out, "w", newline="", encoding="utf-8") if args.out else sys.stdout
    try:
        w = csv.writer(out, lineterminator="\n")
        w.writerow(("value", "visibility", "sigma_visibility", "converged"))
        for r in rows:
            w.writerow((repr(r.value), repr(r.visibility), repr(r.sigma_visibility), int(r.converged)))
    finally:
        if out is not sys.stdout:
            out.close()
    return EXIT_OK if all(r.converged for r in rows) else EXIT_FIT


def cmd_fit(args) -> int:
    try:
        data = read_dip_csv(args.input)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_LOAD
    try:
        fit = hom.fit_dip(data)
    except ValueError as exc:
        print(f"fit failed: {exc}", file=sys.stderr)
        return EXIT_FIT
    v, sv, lb = hom.visibility_with_uncertainty(fit)
    b, _, c, s = (float(p) for p in fit.params)
    print(json.dumps({
        "visibility": v, "sigma_visibility": sv, "visibility_lower_bound": lb,
        "baseline": b, "center_mm": c, "fwhm_mm": abs(s) * hom.FWHM_PER_SIGMA,
        "chi2": fit.chi2, "dof": fit.dof, "converged": fit.converged,
    }, indent=2, sort_keys=True))
    return EXIT_OK if fit.converged and np.isfinite(sv) else EXIT_FIT


def cmd_budget(args) -> int:
    scn = _load(args)
    print(json.dumps(budget_report(arm_budgets(scn)), indent=2, sort_keys=True))
    return EXIT_OK


def cmd_presets(args) -> int:
    for name in list_presets():
        print(name)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="optosync", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def scenario_args(sp):
        sp.add_argument("--scenario", required=True, help="preset name or scenario file")
        sp.add_argument("--seed", type=int, help="override the scenario seed")
        sp.add_argument("--mode", choices=("analytic", "micro_mc"), default="analytic")

    r = sub.add_parser("run", help="simulate and fit one dip scan")
    scenario_args(r)
    r.add_argument("--out", required=True, help="output directory")
    r.add_argument("--workers", type=int, default=1)
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("sweep", help="one dip scan per value of a scenario field")
    scenario_args(s)
    s.add_argument("--param", required=True, help="dotted path, e.g. relay.extra_jitter_ps")
    s.add_argument("--values", required=True, help="comma-separated values")
    s.add_argument("--out", help="CSV file (default stdout)")
    s.set_defaults(func=cmd_sweep)

    f = sub.add_parser("fit", help="fit a dip CSV")
    f.add_argument("--input", required=True)
    f.set_defaults(func=cmd_fit)

    b = sub.add_parser("budget", help="link budget per arm as JSON")
    b.add_argument("--scenario", required=True)
    b.set_defaults(func=cmd_budget)

    pr = sub.add_parser("presets", help="bundled scenarios")
    pr.add_argument("action", choices=("list",))
    pr.set_defaults(func=cmd_presets)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ScenarioError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_LOAD


if __name__ == "__main__":
    sys.exit(main())
