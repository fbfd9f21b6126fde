"""Scenario files: a TOML document with units in every key name.

The grammar (tables, keys, defaults) is the ``SCHEMA`` below and is
documented in ``docs/scenario-format.md``. Loading validates every physical
invariant and reports unknown keys with the line they appear on.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
import re
from dataclasses import dataclass
from importlib import resources

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .detection import CoincidenceWindow, DetectorSpec
from .optics import (
    AmplifierSpec,
    DispersionModule,
    FiberSpan,
    OpticalPulse,
    ShgSpec,
    SpectralFilter,
    Splitter,
)
from .spdc import SpdcSpec
from .stabilizer import ServoConfig, ThermalDriftModel


class ScenarioError(ValueError):
    """A scenario could not be loaded; ``line`` is 1-based when known."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line else message)


SPAN_SCHEMA = {
    "length_km": 0.0,
    "attenuation_db_per_km": 0.2,
    "dispersion_ps_per_nm_km": 17.0,
    "excess_loss_db": 0.0,
    "drift_rate_mm_per_h": 0.0,
}

ARM_SCHEMA = {
    "herald_transmission": 0.5,
    "relay_transmission": 0.15,
    "polarization_angle_deg": 0.0,
    "spans": [],
    "dcm": None,
    "edfa": {"target_power_w": 1.0, "max_gain_db": 50.0},
    "shg": {"efficiency": 0.015},
    "spdc": {
        "mean_pairs_per_pulse": 0.0012,
        "reference_pump_mw": 15.0,
        "signal_center_nm": 1543.73,
        "signal_bandwidth_ghz": 100.0,
        "idler_center_nm": 1536.27,
        "idler_bandwidth_ghz": 25.0,
    },
}

DCM_SCHEMA = {"net_dispersion_ps_per_nm": 0.0, "insertion_loss_db": 6.0}

DETECTOR_SCHEMA = {
    "efficiency": 0.2,
    "dark_count_prob_per_ns": 1e-5,
    "dead_time_us": 7.0,
    "mode": "gated",
    "saturation_rate_khz": 60.0,
    "elements": 1,
}

SCHEMA = {
    "name": "unnamed",
    "description": "",
    "seed": None,
    "clock": {
        "wavelength_nm": 1540.0,
        "duration_ps": 2.0,
        "spectral_width_nm": 1.0,
        "mean_power_mw": 2.5,
        "repetition_rate_ghz": 2.5,
        "timing_jitter_ps": 0.1,
        "coherence_length_m": 200.0,
    },
    "splitter": {"ratio": 0.5},
    "arm1": ARM_SCHEMA,
    "arm2": ARM_SCHEMA,
    "relay": {
        "delay_convention": "free_space",
        "group_index": 1.4682,
        "indistinguishability": 1.0,
        "spectral_offset_ghz": 0.0,
        "extra_jitter_ps": 0.0,
    },
    "detectors": {
        "apd1": DETECTOR_SCHEMA,
        "apd2": {**DETECTOR_SCHEMA, "efficiency": 0.25, "dark_count_prob_per_ns": 1e-6,
                 "mode": "free_running", "saturation_rate_khz": 200.0, "elements": 4},
        "apd3": DETECTOR_SCHEMA,
        "apd4": DETECTOR_SCHEMA,
    },
    "coincidence": {"window_ns": 0.4},
    "scan": {
        "positions_mm": None,
        "start_mm": -15.0,
        "stop_mm": 15.0,
        "points": 21,
        "integration_h": 1.0,
    },
    "servo": {
        "enabled": False,
        "measurement_interval_s": 60.0,
        "scan_step_mm": 0.05,
        "scan_span_mm": 1.0,
        "dither_samples": 16,
        "intensity_noise": 0.05,
        "accuracy_budget_mm": 0.3,
    },
    "drift": {"mode": "ramp", "max_rate_mm_per_h": None, "direction": 1.0},
    "micro_mc": {
        "mean_pairs_per_pulse": 0.05,
        "cycles_per_point": 1_000_000,
        "transmission": 1.0,
        "detector_efficiency": 1.0,
        "dead_time": False,
    },
}

_OPTIONAL_TABLES = {"dcm": DCM_SCHEMA}


def _line_of(text: str, key: str) -> int | None:
    if not text:
        return None
    pat = re.compile(rf"^\s*(\[+\s*)?[\w.]*\b{re.escape(key)}\b")
    for i, line in enumerate(text.splitlines(), 1):
        if pat.match(line):
            return i
    return None


def _merge(schema, user, path, text):
    """Defaults from ``schema`` overlaid with ``user``; unknown keys raise."""
    out = {}
    for key in user:
        if key not in schema:
            where = ".".join(path + [key])
            raise ScenarioError(f"unknown key {where!r}", _line_of(text, key))
    for key, default in schema.items():
        here = path + [key]
        if key in _OPTIONAL_TABLES:
            val = user.get(key)
            out[key] = None if val is None else _merge(_OPTIONAL_TABLES[key], _table(val, here, text), here, text)
        elif key == "spans":
            spans = user.get(key, [])
            if not isinstance(spans, list):
                raise ScenarioError(f"{'.'.join(here)} must be an array of tables", _line_of(text, key))
            out[key] = [_merge(SPAN_SCHEMA, _table(s, here, text), here, text) for s in spans]
        elif isinstance(default, dict):
            out[key] = _merge(default, _table(user.get(key, {}), here, text), here, text)
        else:
            out[key] = copy.deepcopy(user.get(key, default))
    return out


def _table(val, path, text):
    if not isinstance(val, dict):
        raise ScenarioError(f"{'.'.join(path)} must be a table", _line_of(text, path[-1]))
    return val


@dataclass(frozen=True)
class ArmSpec:
    name: str
    spans: tuple[FiberSpan, ...]
    dcm: DispersionModule | None
    amplifier: AmplifierSpec
    shg: ShgSpec
    spdc: SpdcSpec
    reference_pump_mw: float
    herald_transmission: float
    relay_transmission: float
    polarization_angle: float  # deg from the PBS port axis

    @property
    def length_km(self) -> float:
        return sum(s.length for s in self.spans)

    @property
    def drift_rate(self) -> float:
        return sum(s.thermal_drift_rate_max for s in self.spans)

    def distribution_chain(self, splitter: Splitter):
        chain = [splitter, *self.spans]
        if self.dcm is not None:
            chain.append(self.dcm)
        return chain

    def node_chain(self):
        return [self.amplifier, self.shg]


@dataclass(frozen=True)
class RelaySpec:
    delay_convention: str = "free_space"
    group_index: float = 1.4682
    indistinguishability: float = 1.0
    spectral_offset_ghz: float = 0.0
    extra_jitter_ps: float = 0.0


@dataclass(frozen=True)
class ScanPlan:
    positions: tuple[float, ...]
    integration_time: float  # h per point


@dataclass(frozen=True)
class MicroMcSettings:
    mean_pairs_per_pulse: float = 0.05
    cycles_per_point: int = 1_000_000
    transmission: float | None = 1.0
    detector_efficiency: float | None = 1.0
    dead_time: bool = False


@dataclass(frozen=True)
class Scenario:
    name: str
    seed: int
    clock: OpticalPulse
    splitter: Splitter
    arms: tuple[ArmSpec, ArmSpec]
    relay: RelaySpec
    detectors: tuple[DetectorSpec, DetectorSpec, DetectorSpec, DetectorSpec]
    window: CoincidenceWindow
    scan: ScanPlan
    servo_enabled: bool
    servo: ServoConfig
    drift: ThermalDriftModel
    micro_mc: MicroMcSettings
    raw: dict

    @property
    def config_hash(self) -> str:
        blob = json.dumps(self.raw, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()

    def with_seed(self, seed: int) -> "Scenario":
        raw = copy.deepcopy(self.raw)
        raw["seed"] = int(seed)
        return build_scenario(raw)

    def with_value(self, path: str, value) -> "Scenario":
        return build_scenario(set_path(self.raw, path, value))


def set_path(raw: dict, path: str, value) -> dict:
    """Copy of ``raw`` with the scalar at dotted ``path`` replaced. ``*``
    matches every key at that level (e.g. ``arm*.spdc.mean_pairs_per_pulse``)."""
    import fnmatch

    out = copy.deepcopy(raw)
    parts = path.split(".")
    hits = 0

    def walk(node, i):
        nonlocal hits
        key = parts[i]
        if isinstance(node, list):
            keys = [k for k in range(len(node)) if fnmatch.fnmatch(str(k), key)]
        elif isinstance(node, dict):
            keys = [k for k in node if fnmatch.fnmatch(k, key)]
        else:
            keys = []
        for k in keys:
            if i == len(parts) - 1:
                cur = node[k]
                if isinstance(cur, (dict, list)) or (cur is not None and isinstance(cur, str)):
                    raise ValueError(f"{path!r} does not address a numeric scalar")
                node[k] = value
                hits += 1
            else:
                walk(node[k], i + 1)

    walk(out, 0)
    if not hits:
        raise ValueError(f"{path!r} does not address any scenario field")
    return out


def _positive(val, where, text, allow_zero=False):
    ok = val >= 0 if allow_zero else val > 0
    if not isinstance(val, (int, float)) or isinstance(val, bool) or not ok or not math.isfinite(val):
        raise ScenarioError(f"{where} must be {'non-negative' if allow_zero else 'positive'}, got {val!r}",
                            _line_of(text, where.rsplit(".", 1)[-1]))


def _unit_interval(val, where, text):
    if not isinstance(val, (int, float)) or not 0.0 <= val <= 1.0:
        raise ScenarioError(f"{where} must lie in [0, 1], got {val!r}", _line_of(text, where.rsplit(".", 1)[-1]))


def _build_arm(name, raw, text) -> ArmSpec:
    spans = []
    for i, s in enumerate(raw["spans"]):
        for key in ("length_km", "attenuation_db_per_km", "excess_loss_db", "drift_rate_mm_per_h"):
            _positive(s[key], f"{name}.spans[{i}].{key}", text, allow_zero=True)
        spans.append(FiberSpan(s["length_km"], s["attenuation_db_per_km"], s["dispersion_ps_per_nm_km"],
                               s["excess_loss_db"], s["drift_rate_mm_per_h"], name=f"fiber{i + 1}" if i else "fiber"))
    dcm = None
    if raw["dcm"] is not None:
        _positive(raw["dcm"]["insertion_loss_db"], f"{name}.dcm.insertion_loss_db", text, allow_zero=True)
        dcm = DispersionModule(raw["dcm"]["net_dispersion_ps_per_nm"], raw["dcm"]["insertion_loss_db"])
    _positive(raw["edfa"]["target_power_w"], f"{name}.edfa.target_power_w", text)
    _unit_interval(raw["shg"]["efficiency"], f"{name}.shg.efficiency", text)
    sp = raw["spdc"]
    _positive(sp["mean_pairs_per_pulse"], f"{name}.spdc.mean_pairs_per_pulse", text, allow_zero=True)
    _positive(sp["reference_pump_mw"], f"{name}.spdc.reference_pump_mw", text)
    try:
        spdc = SpdcSpec(
            sp["mean_pairs_per_pulse"],
            SpectralFilter(sp["signal_center_nm"], sp["signal_bandwidth_ghz"]),
            SpectralFilter(sp["idler_center_nm"], sp["idler_bandwidth_ghz"]),
        )
    except ValueError as exc:
        raise ScenarioError(f"{name}.spdc: {exc}", _line_of(text, "spdc")) from None
    for key in ("herald_transmission", "relay_transmission"):
        _unit_interval(raw[key], f"{name}.{key}", text)
    return ArmSpec(
        name,
        tuple(spans),
        dcm,
        AmplifierSpec(raw["edfa"]["target_power_w"], raw["edfa"]["max_gain_db"]),
        ShgSpec(raw["shg"]["efficiency"]),
        spdc,
        sp["reference_pump_mw"],
        raw["herald_transmission"],
        raw["relay_transmission"],
        raw["polarization_angle_deg"],
    )


def build_scenario(raw: dict, text: str = "") -> Scenario:
    """Validate a merged scenario dictionary and build the typed tree."""
    if raw.get("seed") is None:
        raise ScenarioError("seed is mandatory", _line_of(text, "seed"))
    if not isinstance(raw["seed"], int) or raw["seed"] < 0:
        raise ScenarioError(f"seed must be a non-negative integer, got {raw['seed']!r}", _line_of(text, "seed"))
    c = raw["clock"]
    for key in ("duration_ps", "spectral_width_nm", "repetition_rate_ghz", "coherence_length_m", "wavelength_nm"):
        _positive(c[key], f"clock.{key}", text)
    for key in ("mean_power_mw", "timing_jitter_ps"):
        _positive(c[key], f"clock.{key}", text, allow_zero=True)
    clock = OpticalPulse(c["wavelength_nm"], c["duration_ps"], c["spectral_width_nm"], c["mean_power_mw"],
                         c["repetition_rate_ghz"], c["timing_jitter_ps"], c["coherence_length_m"])
    ratio = raw["splitter"]["ratio"]
    if not isinstance(ratio, (int, float)) or not 0 < ratio <= 1:
        raise ScenarioError(f"splitter.ratio must lie in (0, 1], got {ratio!r}", _line_of(text, "ratio"))
    arms = (_build_arm("arm1", raw["arm1"], text), _build_arm("arm2", raw["arm2"], text))

    r = raw["relay"]
    if r["delay_convention"] not in ("free_space", "fiber"):
        raise ScenarioError(f"relay.delay_convention must be 'free_space' or 'fiber', got {r['delay_convention']!r}",
                            _line_of(text, "delay_convention"))
    _unit_interval(r["indistinguishability"], "relay.indistinguishability", text)
    _positive(r["extra_jitter_ps"], "relay.extra_jitter_ps", text, allow_zero=True)
    _positive(r["group_index"], "relay.group_index", text)
    relay = RelaySpec(r["delay_convention"], r["group_index"], r["indistinguishability"],
                      r["spectral_offset_ghz"], r["extra_jitter_ps"])

    dets = []
    for name in ("apd1", "apd2", "apd3", "apd4"):
        d = raw["detectors"][name]
        _unit_interval(d["efficiency"], f"detectors.{name}.efficiency", text)
        _unit_interval(d["dark_count_prob_per_ns"], f"detectors.{name}.dark_count_prob_per_ns", text)
        _positive(d["dead_time_us"], f"detectors.{name}.dead_time_us", text, allow_zero=True)
        try:
            dets.append(DetectorSpec(d["efficiency"], d["dark_count_prob_per_ns"], d["dead_time_us"],
                                     d["mode"], d["saturation_rate_khz"], int(d["elements"])))
        except ValueError as exc:
            raise ScenarioError(f"detectors.{name}: {exc}", _line_of(text, name)) from None

    period_ns = 1.0 / clock.repetition_rate
    width = raw["coincidence"]["window_ns"]
    _positive(width, "coincidence.window_ns", text)
    if width > period_ns + 1e-12:
        raise ScenarioError(f"coincidence.window_ns ({width}) exceeds the clock period ({period_ns} ns)",
                            _line_of(text, "window_ns"))
    window = CoincidenceWindow(min(width, period_ns), period_ns)

    s = raw["scan"]
    if s["positions_mm"] is not None:
        positions = tuple(float(p) for p in s["positions_mm"])
    else:
        if int(s["points"]) < 1:
            raise ScenarioError("scan.points must be >= 1", _line_of(text, "points"))
        n = int(s["points"])
        positions = tuple(float(s["start_mm"] + (s["stop_mm"] - s["start_mm"]) * i / (n - 1)) if n > 1
                          else float(s["start_mm"]) for i in range(n))
    if any(b <= a for a, b in zip(positions, positions[1:])):
        raise ScenarioError("scan positions must be strictly increasing", _line_of(text, "scan"))
    _positive(s["integration_h"], "scan.integration_h", text)
    scan = ScanPlan(positions, float(s["integration_h"]))

    sv = raw["servo"]
    try:
        servo = ServoConfig(sv["measurement_interval_s"], sv["scan_step_mm"], sv["scan_span_mm"],
                            int(sv["dither_samples"]), sv["intensity_noise"], sv["accuracy_budget_mm"])
    except ValueError as exc:
        raise ScenarioError(f"servo: {exc}", _line_of(text, "servo")) from None
    clock_env_fwhm = 0.299792458 * clock.transform_limited_duration
    if servo.scan_step >= clock_env_fwhm:
        raise ScenarioError(f"servo.scan_step_mm must be below the envelope width ({clock_env_fwhm:.3f} mm)",
                            _line_of(text, "scan_step_mm"))

    dr = raw["drift"]
    rate = dr["max_rate_mm_per_h"]
    if rate is None:
        rate = arms[0].drift_rate + arms[1].drift_rate
    try:
        drift = ThermalDriftModel(dr["mode"], rate, raw["seed"], dr["direction"])
    except ValueError as exc:
        raise ScenarioError(f"drift: {exc}", _line_of(text, "drift")) from None

    m = raw["micro_mc"]
    _positive(m["mean_pairs_per_pulse"], "micro_mc.mean_pairs_per_pulse", text, allow_zero=True)
    _positive(m["cycles_per_point"], "micro_mc.cycles_per_point", text)
    micro = MicroMcSettings(m["mean_pairs_per_pulse"], int(m["cycles_per_point"]), m["transmission"],
                            m["detector_efficiency"], bool(m["dead_time"]))

    return Scenario(raw["name"], raw["seed"], clock, Splitter(ratio), arms, relay, tuple(dets), window, scan,
                    bool(sv["enabled"]), servo, drift, micro, raw)


def load_scenario(text: str) -> Scenario:
    """Parse and validate scenario text."""
    try:
        user = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        m = re.search(r"line (\d+)", str(exc))
        raise ScenarioError(f"malformed scenario: {exc}", int(m.group(1)) if m else None) from None
    raw = _merge(SCHEMA, user, [], text)
    return build_scenario(raw, text)


def load_scenario_file(path) -> Scenario:
    with open(path, encoding="utf-8") as fh:
        return load_scenario(fh.read())


def list_presets() -> list[str]:
    files = resources.files("optosync").joinpath("presets").iterdir()
    return sorted(f.name[:-5] for f in files if f.name.endswith(".toml"))


def preset_text(name: str) -> str:
    try:
        return resources.files("optosync").joinpath("presets").joinpath(f"{name}.toml").read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ScenarioError(f"unknown preset {name!r}; available: {', '.join(list_presets())}") from None


def load_preset(name: str) -> Scenario:
    return load_scenario(preset_text(name))


def resolve(spec: str) -> Scenario:
    """A preset name or a path to a scenario file."""
    if spec in list_presets():
        return load_preset(spec)
    try:
        return load_scenario_file(spec)
    except FileNotFoundError:
        raise ScenarioError(f"no preset or file named {spec!r}") from None


def mu_at_pump(arm: ArmSpec, pump_mw: float) -> float:
    """Mean pairs per pulse, scaled linearly with the delivered pump power."""
    return arm.spdc.mean_pairs_per_pulse * pump_mw / arm.reference_pump_mw


