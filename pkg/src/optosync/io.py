"""Plot-ready output files for a dip scan.

Every file is a pure function of the run result, floats are written with
``repr`` precision and JSON keys are sorted, so a fixed scenario and seed
give byte-identical files.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

from .hom import FWHM_PER_SIGMA
from .simulate import RunResult

DIP_COLUMNS = ("position_mm", "fourfolds", "err_fourfolds", "expected_rate")
SERVO_COLUMNS = ("time_s", "drift_mm", "measured_mm", "correction_mm", "residual_mm")


def _num(v):
    """JSON-safe float: NaN and infinities become ``None``."""
    v = float(v)
    return v if math.isfinite(v) else None


def _write_csv(path: Path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _write_json(path: Path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def dip_rows(result: RunResult):
    """Rows of the dip CSV; ``expected_rate`` is fourfolds per hour (empty in
    micro-MC mode, which has no closed-form expectation)."""
    hours = result.scenario.scan.integration_time
    for p in result.points:
        rate = "" if not math.isfinite(p.expected) else repr(p.expected / hours)
        yield (repr(float(p.position)), int(p.fourfolds), repr(math.sqrt(p.fourfolds)), rate)


def summary(result: RunResult) -> dict:
    ps_per_mm = result.extras.get("ps_per_mm")
    out = {
        "scenario": result.scenario.name,
        "seed": result.seed,
        "config_hash": result.config_hash,
        "mode": result.mode,
        "fit_converged": result.fit_ok,
        "fit_message": result.fit_error,
        "visibility": _num(result.visibility),
        "sigma_visibility": _num(result.sigma_visibility),
        "visibility_lower_bound": _num(result.lower_bound),
        "visibility_ceiling": _num(result.visibility_ceiling),
        "mean_pairs_per_pulse": [float(m) for m in result.extras.get("mu", ())],
        "relative_jitter_ps": _num(result.extras.get("relative_jitter_ps", float("nan"))),
        "same_clock_pulse": bool(result.extras.get("same_clock_pulse", True)),
    }
    if result.fit is not None:
        b, v, c, s = (float(p) for p in result.fit.params)
        eb, ev, ec, es = (float(e) for e in result.fit.errors)
        fwhm = abs(s) * FWHM_PER_SIGMA
        out["fit"] = {
            "baseline": _num(b),
            "sigma_baseline": _num(eb),
            "visibility_raw": _num(v),
            "center_mm": _num(c),
            "sigma_center_mm": _num(ec),
            "fwhm_mm": _num(fwhm),
            "sigma_fwhm_mm": _num(es * FWHM_PER_SIGMA),
            "fwhm_ps": _num(fwhm * ps_per_mm) if ps_per_mm else None,
            "chi2": _num(result.fit.chi2),
            "dof": int(result.fit.dof),
            "iterations": int(result.fit.iterations),
        }
    if result.servo_trace is not None:
        out["servo"] = {
            "enabled": result.scenario.servo_enabled,
            "rms_residual_mm": _num(result.servo_trace.rms_residual()),
            "tracking_lost": int(result.servo_trace.lost),
        }
    return out


def budget_report(result_or_budgets) -> dict:
    budgets = getattr(result_or_budgets, "budgets", result_or_budgets)
    out = {}
    for name, b in zip(("arm1", "arm2"), budgets):
        out[name] = {
            "distribution": b.distribution.as_dict(),
            "node": b.node.as_dict(),
        }
    return out


def emit_outputs(result: RunResult, directory) -> dict[str, Path]:
    """Write dip.csv, summary.json, budget.json and (with drift) servo.csv.

    Returns the written paths by name. I/O errors are re-raised with the
    offending path in the message.
    """
    d = Path(directory)
    paths = {
        "dip": d / "dip.csv",
        "summary": d / "summary.json",
        "budget": d / "budget.json",
    }
    if result.servo_trace is not None:
        paths["servo"] = d / "servo.csv"
    try:
        d.mkdir(parents=True, exist_ok=True)
        _write_csv(paths["dip"], DIP_COLUMNS, dip_rows(result))
        _write_json(paths["summary"], summary(result))
        _write_json(paths["budget"], budget_report(result))
        if "servo" in paths:
            tr = result.servo_trace
            rows = (
                tuple(repr(float(v)) if math.isfinite(v) else "" for v in row)
                for row in zip(tr.time, tr.drift, tr.measured, tr.correction, tr.residual)
            )
            _write_csv(paths["servo"], SERVO_COLUMNS, rows)
    except OSError as exc:
        raise OSError(f"cannot write outputs to {exc.filename or d}: {exc.strerror}") from exc
    return paths


def read_dip_csv(path) -> np.ndarray:
    """``(position, counts, error)`` triples from a dip CSV."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = {"position_mm", "fourfolds"} - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        rows = []
        for row in reader:
            n = float(row["fourfolds"])
            err = row.get("err_fourfolds") or math.sqrt(n)
            rows.append((float(row["position_mm"]), n, max(float(err), 1.0)))
    return np.array(rows, dtype=float)
