"""End-to-end dip scans.

Two modes share one scenario:

``analytic``
    per-cycle fourfold probability by exact pair-number enumeration, scaled
    by the number of clock cycles in each point's integration time and
    Poisson-sampled. This is the only practical route at 2.5 GHz x 1 h.
``micro_mc``
    event-level simulation of individual clock cycles (pairs, losses,
    routing, dark counts, dead time) at an inflated pair rate, used to
    cross-check the analytic mode.

Random streams are derived from ``(seed, point index, purpose)`` so every
point is reproducible on its own and parallel runs match sequential ones.
"""

from __future__ import annotations

import copy
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import hom
from .detection import (
    DETECTOR_NAMES,
    CountTally,
    DetectorSpec,
    apply_dead_time,
    click_distribution,
    fourfold_coincidences,
    live_fraction,
    multiplexed_clicks,
)
from .optics import LinkBudgetReport, link_budget
from .scenario import Scenario, build_scenario, mu_at_pump
from .spdc import linear_polarization
from .stabilizer import ServoTrace, simulate_servo

# spawn-key tags for the independent random streams
_COUNTS, _MC, _PHASE, _SERVO = 0, 1, 2, 3


def stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=key)))


@dataclass(frozen=True)
class ArmBudget:
    distribution: LinkBudgetReport
    node: LinkBudgetReport

    @property
    def pump_power(self) -> float:
        return self.node.output_power


@dataclass(frozen=True)
class Physics:
    """Everything a dip scan needs, derived once from a scenario."""

    mu: tuple[float, float]
    herald_transmission: tuple[float, float]
    relay_transmission: tuple[float, float]
    detectors: tuple[DetectorSpec, ...]
    overlap: hom.OverlapParams
    ps_per_mm: float
    relative_jitter: float  # ps rms, clock part only
    same_pulse: bool
    window_ns: float
    rate_hz: float


def arm_budgets(scn: Scenario) -> tuple[ArmBudget, ArmBudget]:
    out = []
    for arm in scn.arms:
        dist = link_budget(scn.clock, arm.distribution_chain(scn.splitter))
        node = link_budget(dist.final_pulse, arm.node_chain())
        out.append(ArmBudget(dist, node))
    return tuple(out)


def physics(scn: Scenario, budgets=None) -> Physics:
    budgets = budgets or arm_budgets(scn)
    mu = tuple(mu_at_pump(a, b.pump_power) for a, b in zip(scn.arms, budgets))
    pol = []
    for i, arm in enumerate(scn.arms):
        # source 1 must leave the first PBS on H, source 2 on V
        pol.append(linear_polarization(arm.polarization_angle + 90.0 * i))
    _, p_pbs = hom.pbs_project(pol[0], np.array([0, 1], dtype=complex))
    _, p_pbs2 = hom.pbs_project(np.array([1, 0], dtype=complex), pol[1])
    relay_t = (scn.arms[0].relay_transmission * p_pbs, scn.arms[1].relay_transmission * p_pbs2)
    idl1 = scn.arms[0].spdc.idler_channel
    idl2 = scn.arms[1].spdc.idler_channel
    overlap = hom.OverlapParams(
        0.0, idl1.coherence_time, idl2.coherence_time,
        scn.relay.spectral_offset_ghz, scn.relay.indistinguishability,
    )
    # both arms pumped by the same clock pulse only if their lengths agree
    # to within half a pulse spacing in fibre
    spacing_km = 299792.458 / scn.relay.group_index / (scn.clock.repetition_rate * 1e9)
    same = abs(scn.arms[0].length_km - scn.arms[1].length_km) < spacing_km / 2
    rel = 0.0 if same else math.sqrt(2.0) * scn.clock.timing_jitter_rms
    return Physics(
        mu=mu,
        herald_transmission=(scn.arms[0].herald_transmission, scn.arms[1].herald_transmission),
        relay_transmission=relay_t,
        detectors=scn.detectors,
        overlap=overlap,
        ps_per_mm=hom.ps_per_mm(scn.relay.delay_convention, scn.relay.group_index),
        relative_jitter=rel,
        same_pulse=same,
        window_ns=scn.window.width,
        rate_hz=scn.clock.repetition_rate * 1e9,
    )


def total_jitter(ph: Physics, scn: Scenario) -> float:
    return math.hypot(ph.relative_jitter, scn.relay.extra_jitter_ps)


def micro_mc_scenario(scn: Scenario) -> Scenario:
    """The inflated-rate scenario the micro Monte Carlo simulates.

    Running the analytic mode on this scenario gives the like-for-like
    reference for a micro-MC run.
    """
    m = scn.micro_mc
    raw = copy.deepcopy(scn.raw)
    budgets = arm_budgets(scn)
    for arm, b in zip(("arm1", "arm2"), budgets):
        a = raw[arm]
        a["spdc"]["mean_pairs_per_pulse"] = m.mean_pairs_per_pulse
        # reference pump = delivered pump holds mu at the configured value
        a["spdc"]["reference_pump_mw"] = b.pump_power
        if m.transmission is not None:
            a["herald_transmission"] = m.transmission
            a["relay_transmission"] = m.transmission
    for d in raw["detectors"].values():
        if m.detector_efficiency is not None:
            d["efficiency"] = m.detector_efficiency
        if not m.dead_time:
            d["dead_time_us"] = 0.0
    raw["scan"]["integration_h"] = m.cycles_per_point / (scn.clock.repetition_rate * 1e9 * 3600.0)
    return build_scenario(raw)


@dataclass
class PointResult:
    position: float  # mm
    fourfolds: int
    expected: float  # mean fourfolds for the point
    tally: CountTally


@dataclass
class RunResult:
    scenario: Scenario
    mode: str
    points: list[PointResult]
    fit: hom.DipFit | None
    visibility: float
    sigma_visibility: float
    lower_bound: float
    budgets: tuple[ArmBudget, ArmBudget]
    servo_trace: ServoTrace | None
    dip_sigma_theory_mm: float
    visibility_ceiling: float
    fit_error: str = ""
    extras: dict = field(default_factory=dict)

    @property
    def seed(self) -> int:
        return self.scenario.seed

    @property
    def config_hash(self) -> str:
        return self.scenario.config_hash

    @property
    def fit_ok(self) -> bool:
        return self.fit is not None and self.fit.converged

    def arrays(self):
        x = np.array([p.position for p in self.points])
        n = np.array([p.fourfolds for p in self.points])
        e = np.array([p.expected for p in self.points])
        return x, n, e


def delay_offsets(scn: Scenario, rng: np.random.Generator | None = None):
    """Servo trace over the whole scan and the per-point offset samples (mm).

    Returns ``(trace, [offsets for each point])``; without drift the offsets
    are all zero and the trace is ``None``.
    """
    n = len(scn.scan.positions)
    t_point = scn.scan.integration_time * 3600.0
    if scn.drift.max_rate == 0.0:
        return None, [np.zeros(1) for _ in range(n)]
    rng = rng or stream(scn.seed, _SERVO)
    clock_at_node = arm_budgets(scn)[0].distribution.final_pulse
    trace = simulate_servo(scn.drift, scn.servo, n * t_point, clock_at_node, rng, enabled=scn.servo_enabled)
    offsets = []
    for k in range(n):
        sel = (trace.time >= k * t_point) & (trace.time < (k + 1) * t_point)
        offsets.append(trace.residual[sel] if np.any(sel) else np.zeros(1))
    return trace, offsets


def _hierarchical_tally(expected4, joint, live, cycles, n4, rng, hours) -> CountTally:
    """Twofolds and singles consistent with a sampled fourfold count."""
    e2 = {}
    for i in range(4):
        for j in range(i + 1, 4):
            axes = tuple(a for a in range(4) if a not in (i, j))
            p = joint.sum(axis=axes)[1, 1]
            e2[(i, j)] = p * live[i] * live[j] * cycles
    twofolds = {}
    for (i, j), e in e2.items():
        twofolds[f"{DETECTOR_NAMES[i]}&{DETECTOR_NAMES[j]}"] = n4 + int(rng.poisson(max(e - expected4, 0.0)))
    singles = {}
    for i in range(4):
        p1 = joint.sum(axis=tuple(a for a in range(4) if a != i))[1] * live[i] * cycles
        pairs = [(k, v) for k, v in twofolds.items() if DETECTOR_NAMES[i] in k.split("&")]
        base_key, base = max(pairs, key=lambda kv: kv[1])
        i_, j_ = (DETECTOR_NAMES.index(s) for s in base_key.split("&"))
        singles[DETECTOR_NAMES[i]] = base + int(rng.poisson(max(p1 - e2[(i_, j_)], 0.0)))
    return CountTally(singles, twofolds, n4, hours)


def live_fractions(ph: Physics, joint: np.ndarray) -> np.ndarray:
    """Dead-time live fraction of each detector from its click rate.

    Gated detectors only look inside gates opened by apd2, so their click
    rate is the rate of joint clicks with apd2.
    """
    p2 = joint.sum(axis=(0, 2, 3))[1]
    out = np.ones(4)
    for i, spec in enumerate(ph.detectors):
        if spec.dead_time == 0:
            continue
        if spec.mode == "gated" and i != 1:
            axes = tuple(a for a in range(4) if a not in (1, i))
            p = joint.sum(axis=axes)[1, 1]
        else:
            p = joint.sum(axis=tuple(a for a in range(4) if a != i))[1]
        out[i] = live_fraction(p * ph.rate_hz, spec)
    if ph.detectors[1].mode == "gated":
        out[1] = live_fraction(p2 * ph.rate_hz, ph.detectors[1])
    return out


def _analytic_points(scn, ph, offsets, workers):
    sigma_j = total_jitter(ph, scn)
    kw = dict(
        mu=ph.mu, herald_transmission=ph.herald_transmission, relay_transmission=ph.relay_transmission,
        detectors=ph.detectors, window_ns=ph.window_ns,
    )
    joint0 = click_distribution(overlap=0.0, **kw)
    joint1 = click_distribution(overlap=1.0, **kw)
    live = live_fractions(ph, joint0)
    cycles = ph.rate_hz * scn.scan.integration_time * 3600.0

    def one(k):
        x = scn.scan.positions[k]
        delays = (x + offsets[k]) * ph.ps_per_mm
        o = np.mean([hom.averaged_overlap(replace(ph.overlap, delay=float(d)), sigma_j) for d in delays])
        joint = joint0 + o * (joint1 - joint0)
        expected = float(joint[1, 1, 1, 1] * np.prod(live) * cycles)
        rng = stream(scn.seed, _COUNTS, k)
        n4 = int(rng.poisson(expected))
        tally = _hierarchical_tally(expected, joint, live, cycles, n4, rng, scn.scan.integration_time)
        return PointResult(x, n4, expected, tally)

    return _map(one, range(len(scn.scan.positions)), workers)


def _map(fn, items, workers):
    items = list(items)
    if workers and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, items))
    return [fn(i) for i in items]


def _sample_relay(a1, a2, overlap, u, rng):
    """Photons at the H port for each event (arrays), given mode overlap."""
    m = rng.binomial(a1, 0.5) + rng.binomial(a2, 0.5)
    ind = u < overlap
    if np.any(ind):
        idx = np.flatnonzero(ind)
        keys = a1[idx] * 1000 + a2[idx]
        uu = rng.random(len(idx))
        for key in np.unique(keys):
            k1, k2 = divmod(int(key), 1000)
            sel = idx[keys == key]
            cdf = np.cumsum(hom.fock_beamsplitter_distribution(k1, k2))
            m[sel] = np.minimum(np.searchsorted(cdf, uu[keys == key], side="right"), k1 + k2)
    return m


def simulate_cycles(
    ph: Physics,
    cycles: int,
    delay_ps: float,
    rng: np.random.Generator,
    phase_rng: np.random.Generator | None = None,
    offsets_ps: np.ndarray | None = None,
    extra_jitter_ps: float = 0.0,
    clock_jitter_ps: float = 0.0,
    slot0: int = 0,
    chunk: int = 1_000_000,
) -> list[np.ndarray]:
    """Event-level simulation of ``cycles`` clock cycles.

    Returns the clicked slot indices of apd1..apd4 after gating and dead
    time. ``offsets_ps`` (length ``cycles``) adds a slow delay offset per
    cycle (servo residual). Pump phases are drawn from ``phase_rng`` and
    carried into the overlap amplitude.
    """
    d = ph.detectors
    pd = np.array([s.dark_probability(ph.window_ns) for s in d])
    trains = [[] for _ in range(4)]
    sigma = hom.dip_sigma_ps(ph.overlap.coherence_time_1, ph.overlap.coherence_time_2)
    cap = ph.overlap.indistinguishability_cap * hom.spectral_factor(ph.overlap)
    for start in range(0, cycles, chunk):
        n = min(chunk, cycles - start)
        n1 = rng.poisson(ph.mu[0], n)
        n2 = rng.poisson(ph.mu[1], n)
        s1 = rng.binomial(n1, ph.herald_transmission[0] * d[0].efficiency)
        s4 = rng.binomial(n2, ph.herald_transmission[1] * d[3].efficiency)
        a1 = rng.binomial(n1, ph.relay_transmission[0])
        a2 = rng.binomial(n2, ph.relay_transmission[1])
        dark = rng.random((4, n)) < pd[:, None]
        c1 = (s1 > 0) | dark[0]
        c4 = (s4 > 0) | dark[3]
        c2 = dark[1].copy()
        c3 = dark[2].copy()
        busy = np.flatnonzero((a1 + a2) > 0)
        if len(busy):
            o1 = rng.normal(0.0, clock_jitter_ps, len(busy)) if clock_jitter_ps else np.zeros(len(busy))
            o2 = o1 if ph.same_pulse else (
                rng.normal(0.0, clock_jitter_ps, len(busy)) if clock_jitter_ps else np.zeros(len(busy)))
            extra = rng.normal(0.0, extra_jitter_ps, len(busy)) if extra_jitter_ps else 0.0
            delay = delay_ps + (o1 - o2) + extra
            if offsets_ps is not None:
                delay = delay + offsets_ps[start + busy]
            if phase_rng is not None:
                # pump phases ride on each photon as a global phase, which
                # cancels in |<psi1|psi2>|^2; drawn so the invariance is exercised
                phase_rng.uniform(0, 2 * np.pi, (2, len(busy)))
            overlap = cap * np.exp(-(delay**2) / (2.0 * sigma * sigma))
            u = rng.random(len(busy))
            m2 = _sample_relay(a1[busy], a2[busy], overlap, u, rng)
            m3 = a1[busy] + a2[busy] - m2
            c2[busy] |= rng.binomial(m2, d[1].efficiency) > 0
            c3[busy] |= rng.binomial(m3, d[2].efficiency) > 0
        for i, c in enumerate((c1, c2, c3, c4)):
            trains[i].append(np.flatnonzero(c) + start + slot0)
    trains = [np.concatenate(t) for t in trains]
    return _gate_and_dead_time(ph, trains, rng)


def _gate_and_dead_time(ph, trains, rng):
    period_ns = 1e9 / ph.rate_hz
    d = ph.detectors
    out = list(trains)
    if d[1].dead_time > 0:
        t = out[1] * period_ns
        out[1] = out[1][multiplexed_clicks(t, d[1], rng)] if d[1].elements > 1 else out[1][
            apply_dead_time(t, d[1].dead_time * 1000.0)]
    for i in (0, 2, 3):
        if d[i].mode == "gated":
            out[i] = np.intersect1d(out[i], out[1], assume_unique=True)
        if d[i].dead_time > 0:
            t = out[i] * period_ns
            out[i] = out[i][apply_dead_time(t, d[i].dead_time * 1000.0)]
    return out


def _micro_points(scn, ph, offsets, workers, phase_mode):
    cycles = scn.micro_mc.cycles_per_point
    sigma_clock = scn.clock.timing_jitter_rms

    def one(k):
        x = scn.scan.positions[k]
        rng = stream(scn.seed, _MC, k)
        phase_rng = stream(scn.seed, _PHASE, k) if phase_mode == "random" else None
        off = offsets[k]
        if len(off) > 1:
            # spread the simulated cycles evenly over the point's wall-clock window
            idx = np.minimum((np.arange(cycles) * len(off)) // cycles, len(off) - 1)
            off_ps = off[idx] * ph.ps_per_mm
        else:
            off_ps = np.full(cycles, off[0] * ph.ps_per_mm) if off[0] else None
        trains = simulate_cycles(
            ph, cycles, x * ph.ps_per_mm, rng, phase_rng, off_ps,
            scn.relay.extra_jitter_ps, sigma_clock, slot0=k * cycles,
        )
        tally = fourfold_coincidences(trains, None, scn.scan.integration_time)
        return PointResult(x, tally.fourfolds, float("nan"), tally)

    return _map(one, range(len(scn.scan.positions)), workers)


def fit_points(points) -> hom.DipFit:
    data = [(p.position, p.fourfolds, max(math.sqrt(p.fourfolds), 1.0)) for p in points]
    return hom.fit_dip(data)


def visibility_ceiling(scn: Scenario, ph: Physics | None = None) -> float:
    """Best visibility any mode of the simulator can reach for ``scn``: the
    dip depth at its centre with all noise sources, from the exact analytic
    probabilities (no drift)."""
    ph = ph or physics(scn)
    kw = dict(mu=ph.mu, herald_transmission=ph.herald_transmission, relay_transmission=ph.relay_transmission,
              detectors=ph.detectors, window_ns=ph.window_ns)
    p0 = click_distribution(overlap=0.0, **kw)[1, 1, 1, 1]
    p1 = click_distribution(overlap=1.0, **kw)[1, 1, 1, 1]
    o = hom.averaged_overlap(ph.overlap, total_jitter(ph, scn))
    return float(1.0 - (p0 + o * (p1 - p0)) / p0)


def run_dip_scan(scn: Scenario, mode: str = "analytic", workers: int = 1, phase_mode: str = "random") -> RunResult:
    """Simulate a full HOM dip scan and fit it."""
    if mode not in ("analytic", "micro_mc"):
        raise ValueError(f"unknown mode {mode!r}")
    budgets = arm_budgets(scn)
    sim = micro_mc_scenario(scn) if mode == "micro_mc" else scn
    ph = physics(sim, budgets if mode == "analytic" else None)
    trace, offsets = delay_offsets(scn)
    if mode == "analytic":
        points = _analytic_points(sim, ph, offsets, workers)
    else:
        points = _micro_points(sim, ph, offsets, workers, phase_mode)
    fit, err = None, ""
    try:
        fit = fit_points(points)
        if not fit.converged:
            err = fit.message
        v, sv, lb = hom.visibility_with_uncertainty(fit)
    except (ValueError, np.linalg.LinAlgError) as exc:
        err = str(exc)
        v = sv = lb = float("nan")
    sigma_mm = hom.dip_sigma_ps(ph.overlap.coherence_time_1, ph.overlap.coherence_time_2) / ph.ps_per_mm
    return RunResult(
        scenario=scn,
        mode=mode,
        points=points,
        fit=fit,
        visibility=v,
        sigma_visibility=sv,
        lower_bound=lb,
        budgets=budgets,
        servo_trace=trace,
        dip_sigma_theory_mm=sigma_mm,
        visibility_ceiling=visibility_ceiling(sim, ph),
        fit_error=err,
        extras={"mu": ph.mu, "relative_jitter_ps": total_jitter(ph, sim), "same_clock_pulse": ph.same_pulse,
                "ps_per_mm": ph.ps_per_mm},
    )


@dataclass(frozen=True)
class SweepRow:
    value: float
    visibility: float
    sigma_visibility: float
    converged: bool


def run_sweep(scn: Scenario, path: str, values, mode: str = "analytic") -> list[SweepRow]:
    """One dip scan per value of the scalar at ``path``."""
    rows = []
    for v in values:
        res = run_dip_scan(scn.with_value(path, v), mode)
        rows.append(SweepRow(float(v), res.visibility, res.sigma_visibility, res.fit_ok))
    return rows


def baseline_fourfold_rate(scn: Scenario, include_dead_time: bool = False) -> float:
    """Fourfolds per second far from the dip (distinguishable photons)."""
    ph = physics(scn)
    joint = click_distribution(ph.mu, ph.herald_transmission, ph.relay_transmission, ph.detectors, 0.0,
                               ph.window_ns)
    rate = joint[1, 1, 1, 1] * ph.rate_hz
    if include_dead_time:
        rate *= float(np.prod(live_fractions(ph, joint)))
    return float(rate)


def throughput_projection(scn: Scenario, clock_rate_ghz: float | None = None,
                          detector_efficiencies=None) -> float:
    """Ratio of baseline fourfold rates after an upgrade, pair statistics
    per pulse held fixed. Detector dead time is left out on both sides."""
    up = copy.deepcopy(scn.raw)
    budgets = arm_budgets(scn)
    for arm, b in zip(("arm1", "arm2"), budgets):
        # pin mu: the pump per pulse is unchanged by the upgrade
        up[arm]["spdc"]["reference_pump_mw"] = b.pump_power
        up[arm]["spdc"]["mean_pairs_per_pulse"] = mu_at_pump(scn.arms[int(arm[-1]) - 1], b.pump_power)
    if clock_rate_ghz is not None:
        if not clock_rate_ghz > 0:
            raise ValueError("clock rate must be positive")
        up["clock"]["repetition_rate_ghz"] = clock_rate_ghz
        up["coincidence"]["window_ns"] = min(up["coincidence"]["window_ns"], 1.0 / clock_rate_ghz)
    if detector_efficiencies is not None:
        if isinstance(detector_efficiencies, dict):
            items = detector_efficiencies.items()
        else:
            items = zip(DETECTOR_NAMES, detector_efficiencies)
        for name, eff in items:
            if not 0 <= eff <= 1:
                raise ValueError("detector efficiencies must lie in [0, 1]")
            up["detectors"][name]["efficiency"] = eff
    upgraded = build_scenario(up)
    return baseline_fourfold_rate(upgraded) / baseline_fourfold_rate(scn)
