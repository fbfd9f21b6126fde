import csv
import json
import math
import warnings

import numpy as np
import pytest

from optosync import cli, hom
from optosync.io import DIP_COLUMNS, emit_outputs
from optosync.scenario import load_preset, load_scenario
from optosync.simulate import micro_mc_scenario, run_dip_scan, run_sweep, throughput_projection
from optosync.spdc import multipair_visibility_penalty

TINY = """
name = "tiny"
seed = 3

[[arm1.spans]]
length_km = 0.005

[[arm2.spans]]
length_km = 0.005

[micro_mc]
cycles_per_point = 200000

[scan]
start_mm = -12.0
stop_mm = 12.0
points = 13
"""


@pytest.fixture(scope="module")
def short():
    return load_preset("short_symmetric")


@pytest.fixture(scope="module")
def short_run(short):
    return run_dip_scan(short)


def test_run_result_contents(short, short_run):
    r = short_run
    assert len(r.points) == 21 and r.fit_ok
    assert r.config_hash == short.config_hash and r.seed == short.seed
    assert r.servo_trace is None
    x, n, e = r.arrays()
    assert np.array_equal(x, short.scan.positions)
    assert 20 < e[0] < 200  # tens of fourfolds per hour far from the dip
    for p in r.points:
        t = p.tally
        assert all(t.fourfolds <= v for v in t.twofolds.values())
        assert all(t.twofolds[k] <= t.singles[k.split("&")[0]] for k in t.twofolds)


def test_parallel_matches_sequential(short, short_run):
    par = run_dip_scan(short, workers=4)
    assert [p.fourfolds for p in par.points] == [p.fourfolds for p in short_run.points]


def test_visibility_ceiling_composition(short, short_run):
    # analytic ceiling agrees with the factorised multipair x V0 x jitter product
    r = short_run
    mu = r.extras["mu"][0]
    ref = multipair_visibility_penalty(mu, 0.5 * 0.2, 0.15 * 0.2)
    assert r.visibility_ceiling <= ref + 1e-6
    assert r.visibility <= r.visibility_ceiling + 3 * r.sigma_visibility
    assert r.visibility_ceiling == pytest.approx(ref, abs=2e-3)


def test_micro_mc_agrees_with_analytic():
    scn = load_scenario(TINY)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        mc = run_dip_scan(scn, "micro_mc")
        an = run_dip_scan(micro_mc_scenario(scn))
    assert mc.fit_ok and an.fit_ok
    combined = math.hypot(mc.sigma_visibility, an.sigma_visibility)
    assert abs(mc.visibility - an.visibility) < 3 * combined
    assert mc.visibility <= an.visibility_ceiling + 3 * mc.sigma_visibility


def test_pump_phase_invariance_bitwise():
    scn = load_scenario(TINY)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        a = run_dip_scan(scn, "micro_mc", phase_mode="random")
        b = run_dip_scan(scn, "micro_mc", phase_mode="fixed")
    assert [p.fourfolds for p in a.points] == [p.fourfolds for p in b.points]
    assert np.array_equal(a.fit.params, b.fit.params)


def test_asymmetric_uses_different_pulses(short):
    asym = run_dip_scan(load_preset("asymmetric_400m"))
    assert not asym.extras["same_clock_pulse"]
    assert asym.extras["relative_jitter_ps"] == pytest.approx(math.sqrt(2) * 0.1)


def test_input_polarisation_changes_rate_only(short):
    rot = short.with_value("arm1.polarization_angle_deg", 30.0)
    a, b = run_dip_scan(short), run_dip_scan(rot)
    assert b.points[0].expected < a.points[0].expected
    assert b.visibility_ceiling == pytest.approx(a.visibility_ceiling, abs=1e-3)


def test_sweep_empty_and_jitter(short):
    assert run_sweep(short, "relay.extra_jitter_ps", []) == []
    rows = run_sweep(short, "relay.extra_jitter_ps", [0.0, 3.0, 8.5])
    base = run_dip_scan(short)
    sigma_d = hom.dip_sigma_ps(17.64, 17.64)
    for r in rows:
        oracle = sigma_d / math.hypot(sigma_d, r.value)
        expect = base.visibility_ceiling * oracle
        assert abs(r.visibility - expect) < 3 * r.sigma_visibility


def test_sweep_mu_decreases_visibility(short):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        scn = short.with_value("scan.integration_h", 1000.0)
        rows = run_sweep(scn, "arm*.spdc.mean_pairs_per_pulse", [0.0012, 0.05])
    assert rows[1].visibility < rows[0].visibility


def test_sweep_rejects_non_scalar(short):
    with pytest.raises(ValueError):
        run_sweep(short, "arm1.spdc", [1.0])


def test_throughput(short):
    assert throughput_projection(short) == pytest.approx(1.0)
    # dark-count accidentals shrink with the shorter slot, photon pairs scale exactly
    assert throughput_projection(short, clock_rate_ghz=10.0) == pytest.approx(4.0, rel=1e-3)
    dark_free = short.with_value("detectors.*.dark_count_prob_per_ns", 0.0)
    assert throughput_projection(dark_free, clock_rate_ghz=10.0) == pytest.approx(4.0, rel=1e-12)
    r = throughput_projection(short, 10.0, {"apd1": 0.4, "apd2": 0.4, "apd3": 0.4, "apd4": 0.4})
    assert r == pytest.approx(4 * (0.4 / 0.2) ** 3 * (0.4 / 0.25), rel=0.01)
    with pytest.raises(ValueError):
        throughput_projection(short, clock_rate_ghz=0.0)


def _read_all(d):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir())}


def test_outputs_byte_deterministic(tmp_path):
    scn = load_preset("long_100km").with_value("scan.points", 7)
    emit_outputs(run_dip_scan(scn), tmp_path / "a")
    emit_outputs(run_dip_scan(scn), tmp_path / "b")
    a, b = _read_all(tmp_path / "a"), _read_all(tmp_path / "b")
    assert set(a) == {"dip.csv", "summary.json", "budget.json", "servo.csv"}
    assert a == b


def test_dip_csv_and_summary(tmp_path, short_run):
    paths = emit_outputs(short_run, tmp_path)
    with open(paths["dip"], newline="") as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == DIP_COLUMNS
    for r, p in zip(rows[1:], short_run.points):
        assert int(r[1]) == p.fourfolds
        assert float(r[2]) == pytest.approx(math.sqrt(p.fourfolds))
    summary = json.loads(paths["summary"].read_text())
    for key in ("visibility", "sigma_visibility", "visibility_lower_bound", "config_hash", "seed"):
        assert key in summary
    assert summary["fit"]["fwhm_ps"] == pytest.approx(summary["fit"]["fwhm_mm"] * hom.PS_PER_MM_FREE_SPACE)


def test_emit_reports_path(tmp_path, short_run):
    blocker = tmp_path / "file"
    blocker.write_text("")
    with pytest.raises(OSError, match="file"):
        emit_outputs(short_run, blocker / "sub")


def test_cli_run_and_fit(tmp_path, capsys):
    out = tmp_path / "run"
    assert cli.main(["run", "--scenario", "short_symmetric", "--seed", "4", "--out", str(out)]) == 0
    assert cli.main(["fit", "--input", str(out / "dip.csv")]) == 0
    assert json.loads(capsys.readouterr().out.split("outputs in")[-1].split("\n", 1)[1])["converged"]


def test_cli_exit_codes(tmp_path, capsys):
    assert cli.main(["run", "--scenario", str(tmp_path / "nope.toml"), "--out", str(tmp_path)]) == 2
    bad = tmp_path / "bad.toml"
    bad.write_text(TINY + "\n[relay]\nwat = 1\n")
    assert cli.main(["budget", "--scenario", str(bad)]) == 2
    few = tmp_path / "few.toml"
    few.write_text(TINY.replace("points = 13", "points = 4"))
    assert cli.main(["run", "--scenario", str(few), "--out", str(tmp_path / "few")]) == 3
    assert (tmp_path / "few" / "dip.csv").exists()
    lost = tmp_path / "lost.toml"
    lost.write_text(TINY + "\n[servo]\nenabled = true\n\n[drift]\nmax_rate_mm_per_h = 300.0\n")
    assert cli.main(["run", "--scenario", str(lost), "--out", str(tmp_path / "lost")]) == 4


def test_cli_presets_budget_sweep(tmp_path, capsys):
    assert cli.main(["presets", "list"]) == 0
    assert "long_100km" in capsys.readouterr().out
    assert cli.main(["budget", "--scenario", "long_100km"]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["arm1"]["distribution"]["output_power_mw"] == pytest.approx(0.0314, abs=2e-4)
    out = tmp_path / "sweep.csv"
    assert cli.main(["sweep", "--scenario", "short_symmetric", "--param", "relay.extra_jitter_ps",
                     "--values", "0,3", "--out", str(out)]) == 0
    assert out.read_text().splitlines()[0] == "value,visibility,sigma_visibility,converged"
    assert cli.main(["sweep", "--scenario", "short_symmetric", "--param", "arm1",
                     "--values", "1"]) == 2
