"""Single-photon detection and coincidence counting.

Detectors are threshold devices: a window clicks if at least one photon is
detected or a dark count occurs, unless the detector is still dead from its
previous click. Detector order throughout is ``(apd1, apd2, apd3, apd4)``:
apd1/apd4 herald the signal photons of source 1/2, apd2/apd3 sit behind the
relay PBS.
"""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .hom import relay_port_distribution
from .spdc import poisson_pmf

DETECTOR_NAMES = ("apd1", "apd2", "apd3", "apd4")


class TruncationWarning(UserWarning):
    """The mean pair number is outside the range where the pair-number
    truncation of the analytic fourfold probability is validated."""


@dataclass(frozen=True)
class DetectorSpec:
    efficiency: float = 0.2
    dark_count_prob_per_ns: float = 1e-5
    dead_time: float = 7.0  # us
    mode: str = "gated"
    saturation_rate: float = 60.0  # kHz, nominal datasheet figure
    elements: int = 1  # >1: identical elements behind a logical OR

    def __post_init__(self):
        if not 0.0 <= self.efficiency <= 1.0:
            raise ValueError("efficiency must lie in [0, 1]")
        if not 0.0 <= self.dark_count_prob_per_ns <= 1.0:
            raise ValueError("dark_count_prob_per_ns must lie in [0, 1]")
        if self.dead_time < 0:
            raise ValueError("dead_time must be >= 0")
        if self.mode not in ("free_running", "gated"):
            raise ValueError(f"unknown detector mode {self.mode!r}")
        if self.elements < 1:
            raise ValueError("a detector needs at least one element")

    def dark_probability(self, window_ns: float) -> float:
        return min(1.0, self.dark_count_prob_per_ns * window_ns)

    def click_probability(self, photons: int, window_ns: float) -> float:
        return 1.0 - (1.0 - self.dark_probability(window_ns)) * (1.0 - self.efficiency) ** photons


FREE_RUNNING_IDQ220 = DetectorSpec(0.25, 1e-6, 7.0, "free_running", 60.0, 1)
GATED_IDQ210 = DetectorSpec(0.20, 1e-5, 7.0, "gated", 60.0, 1)
MULTIPLEXED_APD2 = DetectorSpec(0.25, 1e-6, 7.0, "free_running", 200.0, 4)


@dataclass(frozen=True)
class MultiplexedDetector:
    elements: tuple[DetectorSpec, ...]

    def __post_init__(self):
        if len(self.elements) < 1:
            raise ValueError("multiplexed detector needs at least one element")

    @classmethod
    def from_spec(cls, spec: DetectorSpec) -> "MultiplexedDetector":
        single = DetectorSpec(spec.efficiency, spec.dark_count_prob_per_ns, spec.dead_time,
                              spec.mode, spec.saturation_rate, 1)
        return cls((single,) * spec.elements)


@dataclass(frozen=True)
class CoincidenceWindow:
    width: float = 0.4  # ns
    period: float = 0.4  # ns, clock slot

    def __post_init__(self):
        if not 0 < self.width <= self.period:
            raise ValueError("coincidence window must be positive and no longer than a clock slot")


@dataclass
class DeadTimeTracker:
    """Last click time of one detector element (ns)."""

    last_click: float = -math.inf
    last_time: float = -math.inf

    def check_order(self, t: float):
        if t < self.last_time:
            raise ValueError(f"event at {t} ns precedes previous event at {self.last_time} ns")
        self.last_time = t


def detect(
    photon_present: bool,
    spec: DetectorSpec,
    tracker: DeadTimeTracker,
    rng: np.random.Generator,
    t_ns: float,
    window_ns: float = 0.4,
    gate_open: bool = True,
) -> bool:
    """Evaluate one detection window at time ``t_ns``.

    Gated detectors only look when ``gate_open``. The tracker is updated in
    place when the detector clicks.
    """
    tracker.check_order(t_ns)
    if spec.mode == "gated" and not gate_open:
        return False
    if t_ns - tracker.last_click < spec.dead_time * 1000.0:
        return False
    clicked = bool(photon_present and rng.random() < spec.efficiency)
    if not clicked:
        clicked = bool(rng.random() < spec.dark_probability(window_ns))
    if clicked:
        tracker.last_click = t_ns
    return clicked


def multiplex_or(clicks: Sequence[bool]) -> bool:
    return any(clicks)


def apply_dead_time(times: np.ndarray, dead_time_ns: float) -> np.ndarray:
    """Boolean mask of candidate clicks (sorted times) that survive a
    non-paralysable dead time."""
    times = np.asarray(times, dtype=float)
    keep = np.zeros(len(times), dtype=bool)
    if dead_time_ns <= 0:
        keep[:] = True
        return keep
    if len(times) and np.any(np.diff(times) < 0):
        raise ValueError("click times must be non-decreasing")
    last = -math.inf
    for i, t in enumerate(times):
        if t - last >= dead_time_ns:
            keep[i] = True
            last = t
    return keep


def multiplexed_clicks(
    times: np.ndarray, spec: DetectorSpec, rng: np.random.Generator
) -> np.ndarray:
    """Candidate clicks distributed at random over ``spec.elements`` elements,
    each with its own dead time, combined by OR. Returns the surviving mask."""
    times = np.asarray(times, dtype=float)
    element = rng.integers(0, spec.elements, size=len(times))
    keep = np.zeros(len(times), dtype=bool)
    for e in range(spec.elements):
        idx = np.flatnonzero(element == e)
        keep[idx] = apply_dead_time(times[idx], spec.dead_time * 1000.0)
    return keep


def live_fraction(click_rate_hz: float, spec: DetectorSpec) -> float:
    """Fraction of time a (possibly multiplexed) detector is live under a
    Poissonian candidate-click rate, non-paralysable dead time."""
    per_element = click_rate_hz / spec.elements
    return 1.0 / (1.0 + per_element * spec.dead_time * 1e-6)


def output_rate(input_rate_hz: float, spec: DetectorSpec) -> float:
    """Registered click rate for a Poissonian candidate-click rate."""
    return input_rate_hz * live_fraction(input_rate_hz, spec)


@dataclass
class CountTally:
    singles: dict = field(default_factory=dict)
    twofolds: dict = field(default_factory=dict)
    fourfolds: int = 0
    integration_time: float = 0.0  # h

    def __post_init__(self):
        for pair, n in self.twofolds.items():
            if self.fourfolds > n:
                raise ValueError(f"fourfolds exceed twofold {pair}")


def fourfold_coincidences(
    trains: Sequence[np.ndarray], window: CoincidenceWindow | None = None, integration_time: float = 0.0
) -> CountTally:
    """Tally coincidences between four click trains.

    Trains are click times in ns; each is binned onto the clock-slot grid of
    ``window`` and a coincidence requires clicks within ``window.width`` of the
    slot start. Integer trains are taken to be slot indices already.
    """
    if len(trains) != 4:
        raise ValueError("need exactly four click trains")
    slots = [_to_slots(t, window) for t in trains]
    singles = {name: int(len(s)) for name, s in zip(DETECTOR_NAMES, slots)}
    twofolds = {}
    for i, j in itertools.combinations(range(4), 2):
        key = DETECTOR_NAMES[i] + "&" + DETECTOR_NAMES[j]
        twofolds[key] = int(len(np.intersect1d(slots[i], slots[j], assume_unique=True)))
    common = slots[0]
    for s in slots[1:]:
        common = np.intersect1d(common, s, assume_unique=True)
    return CountTally(singles, twofolds, int(len(common)), integration_time)


def _to_slots(train, window):
    a = np.asarray(train)
    if a.dtype.kind in "iu" or window is None:
        return np.unique(a.astype(np.int64))
    slot = np.floor(a / window.period).astype(np.int64)
    inside = (a - slot * window.period) < window.width
    return np.unique(slot[inside])


def _pair(value):
    if np.ndim(value) == 0:
        return float(value), float(value)
    a, b = value
    return float(a), float(b)


def click_distribution(
    mu,
    herald_transmission,
    relay_transmission,
    detectors: Sequence[DetectorSpec],
    overlap: float,
    window_ns: float = 0.4,
    max_pairs: int = 2,
) -> np.ndarray:
    """Joint click probabilities per clock cycle, shape ``(2, 2, 2, 2)`` indexed
    by the click state of apd1..apd4.

    Exact enumeration of 0..``max_pairs`` pairs per source (Poisson weights,
    not renormalised), independent photon losses, relay routing with mode
    overlap ``overlap`` and independent dark counts.
    """
    mu1, mu2 = _pair(mu)
    th1, th2 = _pair(herald_transmission)
    tr1, tr2 = _pair(relay_transmission)
    d1, d2, d3, d4 = detectors
    pd = [d.dark_probability(window_ns) for d in detectors]
    joint = np.zeros((2, 2, 2, 2))
    for n1 in range(max_pairs + 1):
        w1 = poisson_pmf(n1, mu1)
        h1 = 1.0 - (1.0 - pd[0]) * (1.0 - th1 * d1.efficiency) ** n1
        for n2 in range(max_pairs + 1):
            w = w1 * poisson_pmf(n2, mu2)
            if w == 0.0:
                continue
            h4 = 1.0 - (1.0 - pd[3]) * (1.0 - th2 * d4.efficiency) ** n2
            relay = np.zeros((2, 2))
            for k1 in range(n1 + 1):
                pk1 = math.comb(n1, k1) * tr1**k1 * (1 - tr1) ** (n1 - k1)
                for k2 in range(n2 + 1):
                    pk = pk1 * math.comb(n2, k2) * tr2**k2 * (1 - tr2) ** (n2 - k2)
                    if pk == 0.0:
                        continue
                    ports = relay_port_distribution(k1, k2, overlap)
                    n = k1 + k2
                    for m, pm in enumerate(ports):
                        c2 = 1.0 - (1.0 - pd[1]) * (1.0 - d2.efficiency) ** m
                        c3 = 1.0 - (1.0 - pd[2]) * (1.0 - d3.efficiency) ** (n - m)
                        relay += pk * pm * np.outer([1 - c2, c2], [1 - c3, c3])
            herald = np.outer([1 - h1, h1], [1 - h4, h4])
            joint += w * np.einsum("ad,bc->abcd", herald, relay)
    return joint


def expected_fourfold_probability(
    mu,
    herald_transmission,
    relay_transmission,
    detectors: Sequence[DetectorSpec],
    overlap: float,
    window_ns: float = 0.4,
    max_pairs: int = 2,
    warn: bool = True,
) -> float:
    """Probability per clock cycle that all four detectors click.

    ``mu``, ``herald_transmission`` and ``relay_transmission`` are scalars or
    per-source pairs. Transmissions exclude detector efficiency. The leading
    term is ``mu1 mu2 (t1 eta1)(t4 eta4) r1 r2 eta2 eta3 (1 - overlap) / 2``;
    multi-pair terms up to ``max_pairs`` per source and dark-count
    accidentals are included exactly, so the truncation error is of order
    ``mu**(max_pairs + 1)`` relative to the leading term's ``mu**2``.
    Dead time is not included here.
    """
    mu1, mu2 = _pair(mu)
    if warn and max(mu1, mu2) > 0.01:
        warnings.warn(
            f"mean pair number {max(mu1, mu2)} exceeds the validated range (<= 0.01)",
            TruncationWarning,
            stacklevel=2,
        )
    if not 0.0 <= overlap <= 1.0:
        raise ValueError(f"overlap must lie in [0, 1], got {overlap}")
    joint = click_distribution(mu, herald_transmission, relay_transmission, detectors,
                               overlap, window_ns, max_pairs)
    return float(joint[1, 1, 1, 1])


def singles_probabilities(joint: np.ndarray) -> np.ndarray:
    return np.array([joint.sum(axis=tuple(j for j in range(4) if j != i))[1] for i in range(4)])


def sample_counts(expected_rate: float, cycles: int, rng: np.random.Generator) -> tuple[int, float]:
    """Poisson draw of the counts in ``cycles`` cycles and its sqrt(N) error."""
    if expected_rate < 0:
        raise ValueError("expected_rate must be >= 0")
    n = int(rng.poisson(expected_rate * cycles))
    return n, math.sqrt(n)
