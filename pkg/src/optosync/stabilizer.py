"""Thermal drift of the long fibre arms and the envelope-tracking servo.

The two clock arms form a Mach-Zehnder interferometer. A short micro-scan of
delay line dL1 around the last known balance point samples the classical
interferogram; the fringe-contrast envelope is located and the opposite of
the measured path drift is applied to the HOM delay line dL2.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .optics import SPEED_OF_LIGHT_MM_PER_PS, OpticalPulse

FWHM_PER_SIGMA = 2.0 * math.sqrt(2.0 * math.log(2.0))


class TrackingLostError(RuntimeError):
    """No interference contrast was found within the micro-scan."""


@dataclass(frozen=True)
class ThermalDriftModel:
    mode: str = "ramp"
    max_rate: float = 5.0  # mm/h
    seed: int = 0
    direction: float = 1.0

    def __post_init__(self):
        if self.mode not in ("ramp", "random_walk"):
            raise ValueError(f"unknown drift mode {self.mode!r}")
        if self.max_rate < 0:
            raise ValueError("max_rate must be >= 0")


def drift_step(model: ThermalDriftModel, dt: float, rng: np.random.Generator | None = None) -> float:
    """Optical-path increment (mm) accumulated over ``dt`` seconds."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    if model.mode == "ramp":
        return math.copysign(model.max_rate, model.direction) * dt / 3600.0
    if rng is None:
        rng = np.random.default_rng(model.seed)
    return float(rng.normal(0.0, model.max_rate * math.sqrt(dt / 3600.0)))


def drift_path(model: ThermalDriftModel, times_s: np.ndarray, rng: np.random.Generator | None = None) -> np.ndarray:
    """Accumulated drift at each of the (increasing) ``times_s``, zero at t=0."""
    t = np.asarray(times_s, dtype=float)
    if model.mode == "ramp":
        return math.copysign(model.max_rate, model.direction) * t / 3600.0
    if rng is None:
        rng = np.random.default_rng(model.seed)
    dt = np.diff(np.concatenate([[0.0], t]))
    steps = rng.normal(0.0, 1.0, size=len(t)) * model.max_rate * np.sqrt(np.clip(dt, 0, None) / 3600.0)
    return np.cumsum(steps)


@dataclass(frozen=True)
class ServoConfig:
    measurement_interval: float = 60.0  # s
    scan_step: float = 0.05  # mm between dither windows
    scan_span: float = 1.0  # mm, half-width of the micro-scan
    dither_samples: int = 16  # samples across one fringe per window
    intensity_noise: float = 0.05  # rms, relative to full scale
    accuracy_budget: float = 0.3  # mm

    def __post_init__(self):
        if not self.accuracy_budget > 0:
            raise ValueError("accuracy_budget must be positive")
        if not self.measurement_interval > 0 or not self.scan_step > 0:
            raise ValueError("interval and scan step must be positive")
        if self.dither_samples < 3:
            raise ValueError("need at least 3 dither samples per window")


@dataclass(frozen=True)
class InterferogramSample:
    path_difference: float  # mm
    intensity: float


def envelope_fwhm_mm(clock: OpticalPulse) -> float:
    return SPEED_OF_LIGHT_MM_PER_PS * clock.duration_fwhm


def fringe_contrast(delta_l, clock: OpticalPulse) -> np.ndarray:
    """Envelope of the classical fringes at path difference ``delta_l`` (mm).

    Pulse overlap repeats at every multiple of the pulse spacing; the
    pulse-train coherence scales each replica by ``exp(-(dL / L_c)**2)``.
    """
    d = np.asarray(delta_l, dtype=float)
    spacing = SPEED_OF_LIGHT_MM_PER_PS * clock.period
    m = np.round(d / spacing)
    local = d - m * spacing
    sigma = envelope_fwhm_mm(clock) / FWHM_PER_SIGMA
    pulse = np.exp(-(local**2) / (2.0 * sigma * sigma))
    lc = clock.train_coherence_length * 1000.0
    train = np.exp(-((m * spacing / lc) ** 2))
    return pulse * train


def classical_interferogram(delta_l: float, clock: OpticalPulse) -> InterferogramSample:
    wavelength_mm = clock.center_wavelength * 1e-6
    gamma = float(fringe_contrast(delta_l, clock))
    intensity = 0.5 * (1.0 + gamma * math.cos(2.0 * math.pi * delta_l / wavelength_mm))
    return InterferogramSample(delta_l, intensity)


def interferogram(delta_l: np.ndarray, clock: OpticalPulse) -> np.ndarray:
    """Vectorised normalised intensity."""
    d = np.asarray(delta_l, dtype=float)
    wavelength_mm = clock.center_wavelength * 1e-6
    return 0.5 * (1.0 + fringe_contrast(d, clock) * np.cos(2.0 * np.pi * d / wavelength_mm))


def micro_scan(
    drift_mm: float,
    center_mm: float,
    config: ServoConfig,
    clock: OpticalPulse,
    rng: np.random.Generator | None = None,
) -> list[InterferogramSample]:
    """Dither dL1 over one fringe at each coarse step around ``center_mm``.

    The interferometer is balanced when dL1 equals the accumulated drift.
    """
    wavelength_mm = clock.center_wavelength * 1e-6
    n_win = int(round(config.scan_span / config.scan_step))
    coarse = center_mm + config.scan_step * np.arange(-n_win, n_win + 1)
    n = config.dither_samples
    dither = wavelength_mm * (np.arange(n) - (n - 1) / 2.0) / n
    pos = (coarse[:, None] + dither[None, :]).ravel()
    inten = interferogram(drift_mm - pos, clock)
    if rng is not None and config.intensity_noise > 0:
        inten = inten + rng.normal(0.0, config.intensity_noise, size=inten.shape)
    return [InterferogramSample(float(p), float(i)) for p, i in zip(pos, inten)]


def _windows(x: np.ndarray, window_mm: float | None):
    order = np.argsort(x, kind="stable")
    x = x[order]
    if window_mm is None:
        gaps = np.diff(x)
        if len(gaps) == 0:
            return [order]
        cut = 10.0 * np.median(gaps)
        breaks = np.flatnonzero(gaps > cut) + 1
    else:
        breaks = np.flatnonzero(np.diff(np.floor((x - x[0]) / window_mm)) > 0) + 1
    return np.split(order, breaks)


def locate_envelope_peak(
    samples,
    wavelength_nm: float = 1540.0,
    window_mm: float | None = None,
    min_contrast: float = 0.1,
) -> tuple[float, float]:
    """Locate the fringe-envelope maximum of a micro-scan.

    Each local window gets its fringe contrast from a linear least-squares
    sinusoid at the known wavelength; the peak is refined with a weighted
    parabola through log-contrast around the best window (exact for a
    Gaussian envelope). Returns ``(position_mm, uncertainty_mm)``.
    """
    x = np.array([s.path_difference for s in samples], dtype=float)
    y = np.array([s.intensity for s in samples], dtype=float)
    if len(x) < 7:
        raise ValueError("need at least 7 interferogram samples")
    k = 2.0 * np.pi / (wavelength_nm * 1e-6)
    centers, contrasts, errs = [], [], []
    for idx in _windows(x, window_mm):
        if len(idx) < 3:
            continue
        xi, yi = x[idx], y[idx]
        design = np.column_stack([np.ones_like(xi), np.cos(k * xi), np.sin(k * xi)])
        coef, res, *_ = np.linalg.lstsq(design, yi, rcond=None)
        dof = len(xi) - 3
        noise = math.sqrt(res[0] / dof) if dof > 0 and len(res) else 0.0
        mean = coef[0] if coef[0] > 0 else 1e-12
        centers.append(xi.mean())
        contrasts.append(math.hypot(coef[1], coef[2]) / mean)
        errs.append(noise * math.sqrt(2.0 / len(xi)) / mean)
    c = np.array(contrasts)
    xc = np.array(centers)
    e = np.array(errs)
    # 5 sigma: pure noise over ~40 windows stays below this with high probability
    if len(c) < 3 or c.max() < max(min_contrast, 5.0 * float(np.median(e))):
        raise TrackingLostError("no interference contrast within the scan")
    best = int(np.argmax(c))
    # windows above half the peak, at least the three around the maximum
    sel = np.flatnonzero(c > 0.5 * c[best])
    sel = np.union1d(sel, np.clip([best - 1, best, best + 1], 0, len(c) - 1))
    sel = sel[(sel >= best - 6) & (sel <= best + 6)]
    if len(sel) < 3:
        return float(xc[best]), float(np.ptp(xc) / len(xc))
    xs = xc[sel] - xc[best]
    logc = np.log(np.clip(c[sel], 1e-12, None))
    sig = np.where(e[sel] > 0, e[sel] / np.clip(c[sel], 1e-12, None), 1.0)
    if np.all(e[sel] == 0):
        sig = np.ones_like(sig)
    design = np.column_stack([xs**2, xs, np.ones_like(xs)]) / sig[:, None]
    coef, *_ = np.linalg.lstsq(design, logc / sig, rcond=None)
    a, b, _ = coef
    if a >= 0:
        return float(xc[best]), float(np.median(np.diff(xc)))
    peak = -b / (2.0 * a)
    cov = np.linalg.pinv(design.T @ design)
    grad = np.array([b / (2.0 * a * a), -1.0 / (2.0 * a), 0.0])
    unc = math.sqrt(max(float(grad @ cov @ grad), 0.0))
    if np.all(e[sel] == 0):
        unc = 0.0
    return float(xc[best] + peak), unc


@dataclass
class ServoState:
    correction: float = 0.0  # mm applied on dL2
    scan_center: float = 0.0  # mm, last dL1 balance point
    holds: int = 0


def servo_update(state: ServoState, measurement: float | None) -> float:
    """Apply a measured drift to dL2. ``None`` (tracking lost) holds the last
    correction. Returns the correction now applied."""
    if measurement is None:
        state.holds += 1
        return state.correction
    state.correction = -measurement
    state.scan_center = measurement
    return state.correction


@dataclass(frozen=True)
class ServoTrace:
    time: np.ndarray  # s
    drift: np.ndarray  # mm
    measured: np.ndarray  # mm, NaN when not measured or lost
    correction: np.ndarray  # mm
    residual: np.ndarray  # mm, drift + correction
    lost: int = 0

    def rms_residual(self) -> float:
        return float(np.sqrt(np.mean(self.residual**2)))

    def rows(self):
        for row in zip(self.time, self.measured, self.correction, self.residual):
            yield tuple(float(v) for v in row)


def simulate_servo(
    drift: ThermalDriftModel,
    config: ServoConfig,
    duration_s: float,
    clock: OpticalPulse,
    rng: np.random.Generator,
    enabled: bool = True,
    substeps: int = 4,
) -> ServoTrace:
    """Closed- (or open-) loop run sampled ``substeps`` times per interval.

    Measurements happen at the start of each interval; the correction is held
    until the next one.
    """
    n_int = int(math.ceil(duration_s / config.measurement_interval))
    dt = config.measurement_interval / substeps
    times = dt * np.arange(n_int * substeps + 1)
    drift_rng = np.random.default_rng(drift.seed) if drift.mode == "random_walk" else None
    path = drift_path(drift, times, drift_rng)
    state = ServoState()
    measured = np.full(len(times), np.nan)
    correction = np.zeros(len(times))
    lost = 0
    for i, t in enumerate(times):
        if enabled and i % substeps == 0:
            samples = micro_scan(path[i], state.scan_center, config, clock, rng)
            try:
                est, _ = locate_envelope_peak(samples, clock.center_wavelength)
            except TrackingLostError:
                est = None
                lost += 1
            servo_update(state, est)
            if est is not None:
                measured[i] = est
        correction[i] = state.correction
    return ServoTrace(times, path, measured, correction, path + correction, lost)
