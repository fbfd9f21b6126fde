"""Classical optics of the clock distribution.

Pulses are immutable values; every stage returns a new :class:`OpticalPulse`.
Dispersion is tracked as a signed accumulated group-delay spread (ps/nm) so a
compensation module can undo it exactly, and the pulse duration is always
derived from the transform-limited duration in quadrature.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Protocol, Sequence

SPEED_OF_LIGHT_MM_PER_PS = 0.299792458
#: Gaussian FWHM time-bandwidth product.
TIME_BANDWIDTH_GAUSSIAN = 0.441


def db_to_ratio(db: float) -> float:
    return 10.0 ** (db / 10.0)


def ratio_to_db(ratio: float) -> float:
    return 10.0 * math.log10(ratio)


@dataclass(frozen=True)
class OpticalPulse:
    """A classical clock pulse train.

    ``duration_fwhm`` is derived: ``sqrt(tl**2 + (accumulated_dispersion *
    spectral_width)**2)``.
    """

    center_wavelength: float = 1540.0  # nm
    transform_limited_duration: float = 2.0  # ps
    spectral_width: float = 1.0  # nm
    mean_power: float = 2.5  # mW
    repetition_rate: float = 2.5  # GHz
    timing_jitter_rms: float = 0.1  # ps
    train_coherence_length: float = 200.0  # m
    accumulated_dispersion: float = 0.0  # ps/nm, signed

    def __post_init__(self):
        if not self.transform_limited_duration > 0:
            raise ValueError("pulse duration must be positive")
        if not self.spectral_width > 0:
            raise ValueError("spectral_width must be positive")
        if self.mean_power < 0:
            raise ValueError("mean_power must be non-negative")
        if self.timing_jitter_rms < 0:
            raise ValueError("timing_jitter_rms must be non-negative")
        if not self.repetition_rate > 0:
            raise ValueError("repetition_rate must be positive")

    @property
    def duration_fwhm(self) -> float:
        spread = self.accumulated_dispersion * self.spectral_width
        return math.hypot(self.transform_limited_duration, spread)

    @property
    def period(self) -> float:
        """Pulse spacing in ps."""
        return 1000.0 / self.repetition_rate


@dataclass(frozen=True)
class FiberSpan:
    length: float  # km
    attenuation: float = 0.2  # dB/km
    dispersion_parameter: float = 17.0  # ps/(nm km)
    excess_loss: float = 0.0  # dB
    thermal_drift_rate_max: float = 0.0  # mm/h of optical path
    name: str = "fiber"

    def __post_init__(self):
        if self.length < 0 or self.attenuation < 0 or self.excess_loss < 0:
            raise ValueError("fiber length, attenuation and excess_loss must be >= 0")

    @property
    def loss_db(self) -> float:
        return self.length * self.attenuation + self.excess_loss

    def apply(self, pulse: OpticalPulse) -> OpticalPulse:
        return disperse(pulse, self)


@dataclass(frozen=True)
class DispersionModule:
    net_dispersion: float  # ps/nm removed from the accumulated spread
    insertion_loss: float = 6.0  # dB
    name: str = "dcm"

    def __post_init__(self):
        if self.insertion_loss < 0:
            raise ValueError("insertion_loss must be >= 0")

    @property
    def loss_db(self) -> float:
        return self.insertion_loss

    def apply(self, pulse: OpticalPulse) -> OpticalPulse:
        return compensate_dispersion(pulse, self.net_dispersion, self.insertion_loss)


@dataclass(frozen=True)
class Splitter:
    """Passive power splitter; ``ratio`` is the fraction sent down this arm."""

    ratio: float = 0.5
    name: str = "splitter"

    def __post_init__(self):
        if not 0 < self.ratio <= 1:
            raise ValueError("splitter ratio must be in (0, 1]")

    @property
    def loss_db(self) -> float:
        return -ratio_to_db(self.ratio)

    def apply(self, pulse: OpticalPulse) -> OpticalPulse:
        return replace(pulse, mean_power=pulse.mean_power * self.ratio)


@dataclass(frozen=True)
class Attenuator:
    loss: float  # dB
    name: str = "attenuator"

    @property
    def loss_db(self) -> float:
        return self.loss

    def apply(self, pulse: OpticalPulse) -> OpticalPulse:
        return attenuate(pulse, self.loss)


@dataclass(frozen=True)
class AmplifierSpec:
    target_output_power: float = 1.0  # W
    max_gain: float = 50.0  # dB
    name: str = "edfa"

    def __post_init__(self):
        if not self.target_output_power > 0:
            raise ValueError("target_output_power must be positive")

    def apply(self, pulse: OpticalPulse) -> OpticalPulse:
        return amplify(pulse, self)


@dataclass(frozen=True)
class ShgSpec:
    conversion_efficiency: float = 0.015
    name: str = "shg"

    def __post_init__(self):
        if not 0 <= self.conversion_efficiency <= 1:
            raise ValueError("conversion_efficiency must lie in [0, 1]")

    def apply(self, pulse: OpticalPulse) -> OpticalPulse:
        return shg_convert(pulse, self)


@dataclass(frozen=True)
class SpectralFilter:
    center_wavelength: float  # nm
    bandwidth: float  # GHz, FWHM
    shape: str = "gaussian"

    def __post_init__(self):
        if not self.bandwidth > 0:
            raise ValueError("filter bandwidth must be positive")
        if self.shape != "gaussian":
            raise ValueError(f"unsupported filter shape {self.shape!r}")

    @property
    def coherence_time(self) -> float:
        return bandwidth_to_coherence_time(self.bandwidth)


class Stage(Protocol):
    name: str

    def apply(self, pulse: OpticalPulse) -> OpticalPulse: ...


def attenuate(pulse: OpticalPulse, loss_db: float) -> OpticalPulse:
    if loss_db < 0:
        raise ValueError(f"loss_db must be non-negative, got {loss_db}")
    return replace(pulse, mean_power=pulse.mean_power * db_to_ratio(-loss_db))


def disperse(pulse: OpticalPulse, span: FiberSpan) -> OpticalPulse:
    """Propagate through a fibre span: Gaussian broadening plus loss."""
    out = attenuate(pulse, span.loss_db)
    return replace(
        out,
        accumulated_dispersion=pulse.accumulated_dispersion
        + span.dispersion_parameter * span.length,
    )


def compensate_dispersion(
    pulse: OpticalPulse, module_net_dispersion: float, insertion_loss_db: float
) -> OpticalPulse:
    out = attenuate(pulse, insertion_loss_db)
    return replace(
        out, accumulated_dispersion=pulse.accumulated_dispersion - module_net_dispersion
    )


def amplify(pulse: OpticalPulse, amp: AmplifierSpec) -> OpticalPulse:
    """Ideal clamped amplifier (no ASE). Powers: pulse in mW, target in W."""
    if pulse.mean_power <= 0:
        raise ValueError("amplifier input power is zero; nothing to amplify")
    gain_limited = pulse.mean_power * db_to_ratio(amp.max_gain)
    return replace(pulse, mean_power=min(amp.target_output_power * 1000.0, gain_limited))


def shg_convert(pulse: OpticalPulse, spec: ShgSpec) -> OpticalPulse:
    # all-optical: timing jitter passes through untouched
    return replace(
        pulse,
        center_wavelength=pulse.center_wavelength / 2.0,
        mean_power=pulse.mean_power * spec.conversion_efficiency,
    )


def bandwidth_to_coherence_time(bandwidth_ghz: float) -> float:
    """Gaussian FWHM coherence time in ps for a FWHM bandwidth in GHz."""
    if not bandwidth_ghz > 0:
        raise ValueError(f"bandwidth must be positive, got {bandwidth_ghz}")
    return TIME_BANDWIDTH_GAUSSIAN / bandwidth_ghz * 1000.0


def bandwidth_ghz_to_nm(bandwidth_ghz: float, wavelength_nm: float) -> float:
    c_nm_ghz = 299792458.0  # nm * GHz
    return wavelength_nm**2 * bandwidth_ghz / c_nm_ghz


@dataclass(frozen=True)
class BudgetEntry:
    stage: str
    input_power: float  # mW
    output_power: float  # mW
    gain_db: float
    duration_fwhm: float  # ps, after the stage


@dataclass(frozen=True)
class LinkBudgetReport:
    entries: tuple[BudgetEntry, ...]
    final_pulse: OpticalPulse = field(repr=False)

    @property
    def input_power(self) -> float:
        return self.entries[0].input_power

    @property
    def output_power(self) -> float:
        return self.entries[-1].output_power

    @property
    def total_gain_db(self) -> float:
        return sum(e.gain_db for e in self.entries)

    @property
    def final_duration(self) -> float:
        return self.entries[-1].duration_fwhm

    def stage(self, name: str) -> BudgetEntry:
        for e in self.entries:
            if e.stage == name:
                return e
        raise KeyError(name)

    def as_dict(self) -> dict:
        return {
            "stages": [
                {
                    "stage": e.stage,
                    "input_power_mw": e.input_power,
                    "output_power_mw": e.output_power,
                    "gain_db": e.gain_db,
                    "duration_fwhm_ps": e.duration_fwhm,
                }
                for e in self.entries
            ],
            "input_power_mw": self.input_power,
            "output_power_mw": self.output_power,
            "total_gain_db": self.total_gain_db,
            "final_duration_ps": self.final_duration,
        }


def link_budget(source: OpticalPulse, chain: Sequence[Stage]) -> LinkBudgetReport:
    """Push ``source`` through ``chain`` and account for every stage."""
    if not chain:
        raise ValueError("link budget chain is empty")
    entries = []
    pulse = source
    for stage in chain:
        out = stage.apply(pulse)
        if pulse.mean_power > 0 and out.mean_power > 0:
            gain = ratio_to_db(out.mean_power / pulse.mean_power)
        elif out.mean_power == pulse.mean_power:
            gain = 0.0
        else:
            gain = -math.inf
        entries.append(
            BudgetEntry(stage.name, pulse.mean_power, out.mean_power, gain, out.duration_fwhm)
        )
        pulse = out
    return LinkBudgetReport(tuple(entries), pulse)
