"""Photon-pair generation at a source node."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .optics import OpticalPulse, SpectralFilter

SIGNAL_CHANNEL = SpectralFilter(center_wavelength=1543.73, bandwidth=100.0)
IDLER_CHANNEL = SpectralFilter(center_wavelength=1536.27, bandwidth=25.0)

H = np.array([1.0 + 0j, 0.0 + 0j])
V = np.array([0.0 + 0j, 1.0 + 0j])


@dataclass(frozen=True)
class SpdcSpec:
    mean_pairs_per_pulse: float = 0.0012
    signal_channel: SpectralFilter = SIGNAL_CHANNEL
    idler_channel: SpectralFilter = IDLER_CHANNEL

    def __post_init__(self):
        if self.mean_pairs_per_pulse < 0:
            raise ValueError("mean_pairs_per_pulse must be >= 0")
        s, i = self.signal_channel, self.idler_channel
        # FWHM bands may not overlap
        gap = abs(s.center_wavelength - i.center_wavelength)
        half_widths = _ghz_to_nm(s.bandwidth, s.center_wavelength) / 2 + _ghz_to_nm(
            i.bandwidth, i.center_wavelength
        ) / 2
        if gap <= half_widths:
            raise ValueError("signal and idler channels overlap")


def _ghz_to_nm(bw, wl):
    return wl**2 * bw / 299792458.0


@dataclass(frozen=True)
class PhotonWavePacket:
    center_wavelength: float  # nm
    coherence_time_fwhm: float  # ps
    emission_time_offset: float = 0.0  # ps, relative to the local clock slot
    polarization: np.ndarray = field(default_factory=lambda: H.copy())
    pump_phase: float = 0.0

    def __post_init__(self):
        if not self.coherence_time_fwhm > 0:
            raise ValueError("coherence_time_fwhm must be positive")
        pol = np.asarray(self.polarization, dtype=complex)
        norm = np.vdot(pol, pol).real
        if abs(norm - 1.0) > 1e-12:
            raise ValueError(f"polarization not normalised (|p|^2={norm})")
        object.__setattr__(self, "polarization", pol)


@dataclass(frozen=True)
class PairEmission:
    pair_count: int
    signals: tuple[PhotonWavePacket, ...] = ()
    idlers: tuple[PhotonWavePacket, ...] = ()

    def __post_init__(self):
        if not (len(self.signals) == len(self.idlers) == self.pair_count):
            raise ValueError("wave-packet lists must match pair_count")


def linear_polarization(angle_deg: float) -> np.ndarray:
    a = math.radians(angle_deg)
    return np.array([math.cos(a), math.sin(a)], dtype=complex)


def sample_pair_count(mu: float, rng: np.random.Generator, size=None):
    """Poissonian number of pairs per pump pulse."""
    if mu < 0:
        raise ValueError(f"mean pair number must be >= 0, got {mu}")
    if size is None:
        return int(rng.poisson(mu))
    return rng.poisson(mu, size=size)


def emit_pair(
    spec: SpdcSpec,
    pump: OpticalPulse,
    rng: np.random.Generator,
    clock_offset: float | None = None,
    pump_phase: float | None = None,
    polarization: np.ndarray = H,
) -> PairEmission:
    """Emit the pairs produced by one pump pulse.

    ``clock_offset`` is the timing error of the clock pulse that produced this
    pump pulse; when two sources are pumped by the same clock pulse the caller
    passes the same value to both. If omitted it is drawn from the pump's
    timing jitter.
    """
    if not 700.0 <= pump.center_wavelength <= 840.0:
        raise ValueError(f"pump at {pump.center_wavelength} nm is not in the 770 nm band")
    n = sample_pair_count(spec.mean_pairs_per_pulse, rng)
    if clock_offset is None:
        clock_offset = float(rng.normal(0.0, pump.timing_jitter_rms)) if pump.timing_jitter_rms else 0.0
    if pump_phase is None:
        pump_phase = float(rng.uniform(0.0, 2 * math.pi))
    sig = PhotonWavePacket(
        spec.signal_channel.center_wavelength,
        spec.signal_channel.coherence_time,
        clock_offset,
        polarization,
        pump_phase,
    )
    idl = PhotonWavePacket(
        spec.idler_channel.center_wavelength,
        spec.idler_channel.coherence_time,
        clock_offset,
        polarization,
        pump_phase,
    )
    return PairEmission(n, (sig,) * n, (idl,) * n)


def poisson_pmf(n: int, mu: float) -> float:
    if mu == 0:
        return 1.0 if n == 0 else 0.0
    return math.exp(-mu + n * math.log(mu) - math.lgamma(n + 1))


def multipair_visibility_penalty(
    mu: float,
    herald_efficiency: float = 1.0,
    relay_efficiency: float = 1.0,
    max_pairs: int = 2,
) -> float:
    """Visibility ceiling imposed by multi-pair emission.

    Enumerates 0..``max_pairs`` pairs at each source, heralding by a threshold
    detector on each signal arm and threshold detection behind the relay
    beam splitter, and returns ``1 - C(perfect overlap) / C(no overlap)`` for
    the resulting fourfold probability ``C``. Dark counts are excluded.
    """
    if mu < 0:
        raise ValueError(f"mean pair number must be >= 0, got {mu}")
    if mu == 0:
        return 1.0
    from .detection import DetectorSpec, expected_fourfold_probability

    herald = DetectorSpec(efficiency=herald_efficiency, dark_count_prob_per_ns=0.0)
    relay = DetectorSpec(efficiency=relay_efficiency, dark_count_prob_per_ns=0.0)
    dets = (herald, relay, relay, herald)
    kw = dict(mu=mu, herald_transmission=1.0, relay_transmission=1.0, detectors=dets,
              max_pairs=max_pairs, warn=False)
    c_dist = expected_fourfold_probability(overlap=0.0, **kw)
    c_ind = expected_fourfold_probability(overlap=1.0, **kw)
    return 1.0 - c_ind / c_dist
