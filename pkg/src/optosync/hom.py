"""Two-photon interference at the relay station.

The relay is a polarisation-based HOM setup: a fibre PBS combines the two
heralded photons into ``|H>|V>``, a polarisation controller rotates both by
45 degrees and a second PBS routes H and V to the two relay detectors. The
module covers the polarisation algebra, Gaussian mode overlap, jitter
convolution, dip fitting and the jitter bound derived from a visibility.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .optics import SPEED_OF_LIGHT_MM_PER_PS, TIME_BANDWIDTH_GAUSSIAN

FWHM_PER_SIGMA = 2.0 * math.sqrt(2.0 * math.log(2.0))
#: ps of delay per mm of delay-line travel, free-space convention.
PS_PER_MM_FREE_SPACE = 1.0 / SPEED_OF_LIGHT_MM_PER_PS
FIBER_GROUP_INDEX = 1.4682

BASIS = ("HH", "HV", "VH", "VV")


def ps_per_mm(convention: str = "free_space", group_index: float = FIBER_GROUP_INDEX) -> float:
    if convention == "free_space":
        return PS_PER_MM_FREE_SPACE
    if convention == "fiber":
        return group_index * PS_PER_MM_FREE_SPACE
    raise ValueError(f"unknown delay-line convention {convention!r}")


@dataclass(frozen=True)
class TwoPhotonPolarizationState:
    """Amplitudes over the ordered basis HH, HV, VH, VV.

    The first letter is the photon from source 1, the second from source 2.
    """

    amplitudes: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.amplitudes, dtype=complex).reshape(4)
        norm = float(np.vdot(a, a).real)
        if abs(norm - 1.0) > 1e-12:
            raise ValueError(f"state not normalised (norm^2={norm})")
        a.setflags(write=False)
        object.__setattr__(self, "amplitudes", a)

    @property
    def norm(self) -> float:
        return math.sqrt(float(np.vdot(self.amplitudes, self.amplitudes).real))

    def equals_up_to_phase(self, other: "TwoPhotonPolarizationState", tol=1e-12) -> bool:
        return abs(abs(np.vdot(self.amplitudes, other.amplitudes)) - 1.0) <= tol


HV_STATE = TwoPhotonPolarizationState(np.array([0, 1, 0, 0], dtype=complex))


def pbs_project(photon_a, photon_b) -> tuple[TwoPhotonPolarizationState, float]:
    """Polarisation clean-up at the first fibre PBS.

    Photon a (source 1) is kept on H and photon b (source 2) on V. The output
    state is always ``|H>|V>``; only the success probability depends on the
    input polarisations.
    """
    pa = np.asarray(getattr(photon_a, "polarization", photon_a), dtype=complex)
    pb = np.asarray(getattr(photon_b, "polarization", photon_b), dtype=complex)
    prob = float(abs(pa[0]) ** 2 * abs(pb[1]) ** 2)
    return HV_STATE, prob


def _cos_sin(angle_deg: float) -> tuple[float, float]:
    # exact values on the 45 degree grid keep the interference identities exact
    q, r = divmod(angle_deg, 45.0)
    if r == 0.0:
        root = math.sqrt(0.5)
        table = [(1.0, 0.0), (root, root), (0.0, 1.0), (-root, root),
                 (-1.0, 0.0), (-root, -root), (0.0, -1.0), (root, -root)]
        return table[int(q) % 8]
    a = math.radians(angle_deg)
    return math.cos(a), math.sin(a)


def rotation_matrix(angle_deg: float) -> np.ndarray:
    c, s = _cos_sin(angle_deg)
    return np.array([[c, -s], [s, c]], dtype=complex)


def rotate(state: TwoPhotonPolarizationState, angle_deg: float) -> TwoPhotonPolarizationState:
    """Rotate the polarisation of both photons by ``angle_deg``."""
    if angle_deg % 360.0 == 0.0:
        return state
    r = rotation_matrix(angle_deg)
    a = np.kron(r, r) @ state.amplitudes
    # renormalise away rounding so chained rotations keep the invariant
    a = a / math.sqrt(float(np.vdot(a, a).real))
    return TwoPhotonPolarizationState(a)


def coincidence_probability(state: TwoPhotonPolarizationState, overlap: float) -> float:
    """Probability that the second PBS sends one photon to each relay detector.

    ``overlap`` is the mode indistinguishability in [0, 1]. The HV and VH
    amplitudes describe the same detection event; they add coherently for
    the indistinguishable fraction and incoherently for the rest.
    """
    if not 0.0 <= overlap <= 1.0:
        raise ValueError(f"overlap must lie in [0, 1], got {overlap}")
    a_hv = state.amplitudes[1]
    a_vh = state.amplitudes[2]
    distinguishable = abs(a_hv) ** 2 + abs(a_vh) ** 2
    coherent = abs(a_hv + a_vh) ** 2
    return float((1.0 - overlap) * distinguishable + overlap * coherent)


def no_coincidence_state(state: TwoPhotonPolarizationState) -> TwoPhotonPolarizationState:
    """State conditioned on both photons leaving by the same PBS port."""
    a = np.array(state.amplitudes)
    a[1] = a[2] = 0.0
    n = math.sqrt(float(np.vdot(a, a).real))
    if n == 0:
        raise ValueError("no bunched component in state")
    return TwoPhotonPolarizationState(a / n)


@dataclass(frozen=True)
class OverlapParams:
    delay: float = 0.0  # ps
    coherence_time_1: float = 17.64  # ps FWHM
    coherence_time_2: float = 17.64
    spectral_center_offset: float = 0.0  # GHz
    indistinguishability_cap: float = 1.0

    def __post_init__(self):
        if not (self.coherence_time_1 > 0 and self.coherence_time_2 > 0):
            raise ValueError("coherence times must be positive")
        if not 0.0 <= self.indistinguishability_cap <= 1.0:
            raise ValueError("indistinguishability_cap must lie in [0, 1]")


def dip_sigma_ps(coherence_time_1: float, coherence_time_2: float | None = None) -> float:
    """Gaussian sigma (ps) of the HOM dip for two Gaussian wave packets."""
    if coherence_time_2 is None:
        coherence_time_2 = coherence_time_1
    s1 = coherence_time_1 / FWHM_PER_SIGMA
    s2 = coherence_time_2 / FWHM_PER_SIGMA
    return math.hypot(s1, s2)


def spectral_factor(params: OverlapParams) -> float:
    # intensity-spectrum sigmas of transform-limited packets, GHz
    s1 = TIME_BANDWIDTH_GAUSSIAN / (params.coherence_time_1 * 1e-3) / FWHM_PER_SIGMA
    s2 = TIME_BANDWIDTH_GAUSSIAN / (params.coherence_time_2 * 1e-3) / FWHM_PER_SIGMA
    ssum = s1 * s1 + s2 * s2
    width_match = 2.0 * s1 * s2 / ssum
    return width_match * math.exp(-params.spectral_center_offset**2 / (2.0 * ssum))


def temporal_overlap(params: OverlapParams) -> float:
    """Mode overlap of the two interfering photons at relative delay ``delay``."""
    sigma = dip_sigma_ps(params.coherence_time_1, params.coherence_time_2)
    temporal = math.exp(-params.delay**2 / (2.0 * sigma * sigma))
    return params.indistinguishability_cap * spectral_factor(params) * temporal


def averaged_overlap(params: OverlapParams, jitter_sigma: float) -> float:
    """Overlap averaged over Gaussian relative timing jitter (ps rms)."""
    sigma = dip_sigma_ps(params.coherence_time_1, params.coherence_time_2)
    s2 = sigma * sigma + jitter_sigma * jitter_sigma
    return (
        params.indistinguishability_cap
        * spectral_factor(params)
        * sigma
        / math.sqrt(s2)
        * math.exp(-params.delay**2 / (2.0 * s2))
    )


@lru_cache(maxsize=None)
def fock_beamsplitter_distribution(k1: int, k2: int) -> tuple[float, ...]:
    """Output photon-number distribution of the 45-degree rotation + PBS.

    ``k1`` photons enter on H (source 1) and ``k2`` on V (source 2), all in the
    same spatio-temporal mode. Returns ``P[p]`` for ``p`` photons at the H port
    (and ``k1 + k2 - p`` at the V port).
    """
    c, s = _cos_sin(45.0)
    # (c a + s b)^k1 (-s a + c b)^k2 as polynomial coefficients in a
    first = np.zeros(k1 + 1)
    for j in range(k1 + 1):
        first[j] = math.comb(k1, j) * c**j * s ** (k1 - j)
    second = np.zeros(k2 + 1)
    for j in range(k2 + 1):
        second[j] = math.comb(k2, j) * (-s) ** j * c ** (k2 - j)
    coef = np.convolve(first, second)
    n = k1 + k2
    norm = math.factorial(k1) * math.factorial(k2)
    probs = tuple(
        float(coef[p] ** 2 * math.factorial(p) * math.factorial(n - p) / norm)
        for p in range(n + 1)
    )
    return probs


def relay_port_distribution(k1: int, k2: int, overlap: float) -> np.ndarray:
    """Distribution of photons at the H port, mixing indistinguishable and
    distinguishable propagation with weight ``overlap``."""
    n = k1 + k2
    dist = np.zeros(n + 1)
    b1 = np.array([math.comb(k1, j) for j in range(k1 + 1)]) * 0.5**k1
    b2 = np.array([math.comb(k2, j) for j in range(k2 + 1)]) * 0.5**k2
    dist += (1.0 - overlap) * np.convolve(b1, b2)
    if overlap:
        dist += overlap * np.asarray(fock_beamsplitter_distribution(k1, k2))
    return dist


@dataclass(frozen=True)
class DipModel:
    baseline: float
    visibility: float
    center: float  # mm
    width_sigma: float  # mm

    def __post_init__(self):
        if not 0.0 <= self.visibility <= 1.0:
            raise ValueError(f"visibility must lie in [0, 1], got {self.visibility}")
        if not self.width_sigma > 0:
            raise ValueError("width_sigma must be positive")

    @property
    def fwhm(self) -> float:
        return self.width_sigma * FWHM_PER_SIGMA

    def __call__(self, x):
        return dip_profile(x, self.baseline, self.visibility, self.center, self.width_sigma)


def dip_profile(x, baseline, visibility, center, sigma):
    x = np.asarray(x, dtype=float)
    return baseline * (1.0 - visibility * np.exp(-((x - center) ** 2) / (2.0 * sigma * sigma)))


@dataclass(frozen=True)
class JitterModel:
    sigma_j: float  # ps

    def __post_init__(self):
        if self.sigma_j < 0:
            raise ValueError("sigma_j must be >= 0")


def convolve_jitter(dip: DipModel, jitter: JitterModel, mm_to_ps: float = PS_PER_MM_FREE_SPACE) -> DipModel:
    """Smear a Gaussian dip by Gaussian relative timing jitter."""
    sigma_j_mm = jitter.sigma_j / mm_to_ps
    s = math.hypot(dip.width_sigma, sigma_j_mm)
    return DipModel(dip.baseline, dip.visibility * dip.width_sigma / s, dip.center, s)


def infer_jitter_bound(visibility_lower_bound: float, dip_sigma: float) -> float:
    """Largest Gaussian jitter (same units as ``dip_sigma``) compatible with a
    measured visibility, assuming unit intrinsic visibility."""
    v = visibility_lower_bound
    if not 0.0 < v <= 1.0:
        raise ValueError(f"visibility must lie in (0, 1], got {v}")
    return dip_sigma * math.sqrt(1.0 / (v * v) - 1.0)


class FitError(RuntimeError):
    """Raised by :func:`fit_dip` when ``strict`` and the fit did not converge."""

    def __init__(self, message, result):
        super().__init__(message)
        self.result = result


@dataclass(frozen=True)
class DipFit:
    """Weighted least-squares dip fit.

    ``params`` is ``(baseline, visibility, center, sigma)`` as fitted (the
    visibility is not clipped); ``covariance`` is the unscaled inverse of the
    weighted normal matrix.
    """

    params: np.ndarray
    covariance: np.ndarray
    chi2: float
    dof: int
    iterations: int
    converged: bool
    message: str = ""
    data: tuple = field(default=(), repr=False)

    @property
    def errors(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.covariance), 0.0, None))

    @property
    def model(self) -> DipModel:
        b, v, c, s = self.params
        return DipModel(float(b), float(min(max(v, 0.0), 1.0)), float(c), float(abs(s)))


def _initial_guess(x, y):
    order = np.argsort(x)
    x, y = x[order], y[order]
    n = len(x)
    q = max(1, n // 4)
    baseline = float(np.mean(np.concatenate([y[:q], y[-q:]])))
    if baseline <= 0:
        baseline = float(np.max(y)) or 1.0
    center = float(x[np.argmin(y)])
    sigma = float(x[-1] - x[0]) / 6.0
    vis = 1.0 - float(np.min(y)) / baseline
    return np.array([baseline, vis, center, sigma])


def _jacobian(x, p):
    b, v, c, s = p
    g = np.exp(-((x - c) ** 2) / (2.0 * s * s))
    return np.column_stack(
        [
            1.0 - v * g,
            -b * g,
            -b * v * g * (x - c) / (s * s),
            -b * v * g * (x - c) ** 2 / (s**3),
        ]
    )


def fit_dip(points, max_iterations: int = 200, rtol: float = 1e-8, strict: bool = False) -> DipFit:
    """Fit ``B (1 - V exp(-(x - x0)^2 / 2 s^2))`` by Levenberg-Marquardt.

    ``points`` is an iterable of ``(position_mm, counts, count_error)``.
    Convergence is declared when every parameter changes by less than
    ``rtol`` relative to its magnitude. A non-converged fit is returned with
    ``converged=False`` carrying the best parameters found, or raised as
    :class:`FitError` when ``strict``.
    """
    arr = np.asarray(list(points), dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError("points must be (position, counts, error) triples")
    if len(arr) < 5:
        raise ValueError("at least 5 points are needed to fit a dip")
    x, y, err = arr.T
    if np.any(err <= 0):
        raise ValueError("count errors must be positive")
    w = 1.0 / err

    def residuals(p):
        return (y - dip_profile(x, *p)) * w

    p = _initial_guess(x, y)
    r = residuals(p)
    chi2 = float(r @ r)
    lam = 1e-3
    converged = False
    it = 0
    delta = np.zeros(4)
    for it in range(1, max_iterations + 1):
        jac = _jacobian(x, p) * w[:, None]
        jtj = jac.T @ jac
        grad = jac.T @ r
        step_taken = False
        while lam < 1e12:
            a = jtj + lam * np.diag(np.diag(jtj) + 1e-12)
            try:
                delta = np.linalg.solve(a, grad)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            trial = p + delta
            if trial[3] == 0:
                lam *= 10.0
                continue
            r_new = residuals(trial)
            chi2_new = float(r_new @ r_new)
            if chi2_new <= chi2:
                p, r, chi2 = trial, r_new, chi2_new
                lam = max(lam / 10.0, 1e-12)
                step_taken = True
                break
            lam *= 10.0
        scale = np.maximum(np.abs(p), 1e-12)
        if not step_taken or np.all(np.abs(delta) <= rtol * scale):
            converged = True
            break
    p[3] = abs(p[3])
    jac = _jacobian(x, p) * w[:, None]
    cov = np.linalg.pinv(jac.T @ jac)
    result = DipFit(
        params=p,
        covariance=cov,
        chi2=chi2,
        dof=len(x) - 4,
        iterations=it,
        converged=converged,
        message="" if converged else f"no convergence after {max_iterations} iterations",
        data=(x, y, err),
    )
    if strict and not converged:
        raise FitError(result.message, result)
    return result


def visibility_with_uncertainty(fit) -> tuple[float, float, float]:
    """``(V, sigma_V, V - sigma_V)`` with V and the bound clamped to [0, 1].

    Accepts a :class:`DipFit` or a ``(visibility, sigma)`` pair.
    """
    if isinstance(fit, DipFit):
        v, sv = float(fit.params[1]), float(fit.errors[1])
    else:
        v, sv = fit
    v_c = min(max(v, 0.0), 1.0)
    return v_c, sv, min(max(v_c - sv, 0.0), 1.0)
