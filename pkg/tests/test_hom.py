import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, linalg

from optosync import hom
from optosync.spdc import linear_polarization

SQ = 1 / math.sqrt(2)


def _rand_state(seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=4) + 1j * rng.normal(size=4)
    return hom.TwoPhotonPolarizationState(a / np.linalg.norm(a))


# polarisation algebra


def test_pbs_projection():
    st_, p = hom.pbs_project(linear_polarization(0), linear_polarization(90))
    assert st_.equals_up_to_phase(hom.HV_STATE) and p == pytest.approx(1.0)
    st_, p = hom.pbs_project(linear_polarization(45), linear_polarization(45))
    assert p == pytest.approx(0.25)  # Malus: cos^2 45 * sin^2 45
    assert np.allclose(st_.amplitudes, [0, 1, 0, 0])


def test_rotate_45_matches_unitary_state():
    out = hom.rotate(hom.HV_STATE, 45.0)
    assert np.allclose(out.amplitudes, 0.5 * np.array([-1, 1, -1, 1]), atol=1e-15)
    assert np.vdot(out.amplitudes, out.amplitudes).real == pytest.approx(1.0, abs=1e-12)


@given(st.integers(0, 10_000), st.floats(-360, 360))
def test_rotation_unitary_and_invertible(seed, angle):
    s = _rand_state(seed)
    r = hom.rotate(s, angle)
    assert abs(np.linalg.norm(r.amplitudes) - 1) < 1e-12
    back = hom.rotate(r, -angle)
    assert np.max(np.abs(back.amplitudes - s.amplitudes)) < 1e-12
    assert np.array_equal(hom.rotate(s, 0.0).amplitudes, s.amplitudes)


def test_coincidence_probability_points():
    s = hom.rotate(hom.HV_STATE, 45.0)
    assert hom.coincidence_probability(s, 1.0) == 0.0
    assert hom.coincidence_probability(s, 0.0) == pytest.approx(0.5)
    assert hom.coincidence_probability(s, 0.5) == pytest.approx(0.25)


def _amplitude_oracle(overlap):
    """Brute force over a two-mode (early/late) model: photon 2 occupies
    sqrt(O)|a> + sqrt(1-O)|b> with photon 1 in |a>. Coincidence = both PBS
    ports fire, summed over all temporal-mode assignments."""
    c = s = SQ
    u = np.array([[c, -s], [s, c]])  # H, V output amplitudes per input pol
    amp = {}
    modes = [(np.sqrt(overlap), "a"), (np.sqrt(1 - overlap), "b")]
    for w, m2 in modes:
        for p1 in (0, 1):
            for p2 in (0, 1):
                a = u[p1, 0] * u[p2, 1] * w
                key = tuple(sorted([(p1, "a"), (p2, m2)]))
                amp[key] = amp.get(key, 0) + a
    # bosonic normalisation of identical occupations
    prob = 0.0
    for (q1, q2), a in amp.items():
        norm = 2.0 if q1 == q2 else 1.0
        if q1[0] != q2[0]:
            prob += abs(a) ** 2 * norm
    return prob


@pytest.mark.parametrize("o", [0.0, 0.25, 0.5, 0.9, 1.0])
def test_coincidence_probability_amplitude_oracle(o):
    s = hom.rotate(hom.HV_STATE, 45.0)
    assert hom.coincidence_probability(s, o) == pytest.approx(_amplitude_oracle(o), abs=1e-12)


def test_no_coincidence_state():
    s = hom.no_coincidence_state(hom.rotate(hom.HV_STATE, 45.0))
    target = hom.TwoPhotonPolarizationState(np.array([-SQ, 0, 0, SQ], dtype=complex))
    assert s.equals_up_to_phase(target)


@given(st.floats(0, 360), st.floats(0, 360), st.floats(0, 1))
def test_input_rotation_changes_rate_only(a1, a2, o):
    """Rotating the input polarisations scales the PBS pass probability but the
    conditional coincidence probability is unchanged."""
    state, p = hom.pbs_project(linear_polarization(a1), linear_polarization(a2))
    ref = hom.coincidence_probability(hom.rotate(hom.HV_STATE, 45.0), o)
    if p > 1e-9:
        assert hom.coincidence_probability(hom.rotate(state, 45.0), o) == pytest.approx(ref, abs=1e-12)


@given(st.floats(0, 2 * math.pi), st.floats(0, 1))
def test_pump_phase_invariance(phi, o):
    s = hom.rotate(hom.HV_STATE, 45.0)
    shifted = hom.TwoPhotonPolarizationState(s.amplitudes * np.exp(1j * phi))
    assert hom.coincidence_probability(shifted, o) == hom.coincidence_probability(s, o) or \
        abs(hom.coincidence_probability(shifted, o) - hom.coincidence_probability(s, o)) < 1e-15


def test_state_norm_checked():
    with pytest.raises(ValueError):
        hom.TwoPhotonPolarizationState(np.array([1, 1, 0, 0], dtype=complex))


# Fock-space routing


def _fock_oracle(k1, k2):
    """Propagate |k1, k2> through exp(-i theta (a^dag b + b^dag a)) built in a
    truncated Fock space with scipy's expm, theta set for a 50:50 splitter."""
    n = k1 + k2
    dim = n + 1
    a = np.diag(np.sqrt(np.arange(1, dim)), 1)
    eye = np.eye(dim)
    A = np.kron(a, eye)
    B = np.kron(eye, a)
    gen = A.conj().T @ B - B.conj().T @ A
    u = linalg.expm(math.pi / 4 * gen)
    vec = np.zeros(dim * dim)
    vec[k1 * dim + k2] = 1
    out = u @ vec
    probs = np.zeros(n + 1)
    for p in range(n + 1):
        probs[p] = abs(out[p * dim + (n - p)]) ** 2
    return probs


@pytest.mark.parametrize("k1,k2", [(0, 0), (1, 0), (1, 1), (2, 1), (2, 2), (3, 1), (3, 3), (4, 2)])
def test_fock_distribution_matches_expm(k1, k2):
    ours = np.array(hom.fock_beamsplitter_distribution(k1, k2))
    assert np.allclose(ours, _fock_oracle(k1, k2), atol=1e-12)
    assert ours.sum() == pytest.approx(1.0)


def test_relay_routing_mixture():
    assert np.allclose(hom.relay_port_distribution(1, 1, 1.0), [0.5, 0, 0.5])
    assert np.allclose(hom.relay_port_distribution(1, 1, 0.0), [0.25, 0.5, 0.25])


# overlap model


def _wave_packet_overlap(tau1, tau2, delay):
    """|<psi1|psi2(delay)>|^2 by quadrature of Gaussian amplitude envelopes
    whose intensity FWHMs are the coherence times."""
    def env(t, tau):
        s = tau / hom.FWHM_PER_SIGMA  # intensity sigma
        return (2 * math.pi * s * s) ** -0.25 * np.exp(-t * t / (4 * s * s))

    val, _ = integrate.quad(lambda t: env(t, tau1) * env(t - delay, tau2), -400, 400, limit=400)
    return val * val


@pytest.mark.parametrize("tau1,tau2", [(17.64, 17.64), (17.64, 4.41), (10.0, 12.0)])
@pytest.mark.parametrize("delay", [0.0, 5.0, 14.9])
def test_temporal_overlap_quadrature(tau1, tau2, delay):
    p = hom.OverlapParams(delay, tau1, tau2)
    assert hom.temporal_overlap(p) == pytest.approx(_wave_packet_overlap(tau1, tau2, delay), rel=1e-7)


def test_overlap_examples():
    assert hom.temporal_overlap(hom.OverlapParams()) == pytest.approx(1.0)
    sigma = hom.dip_sigma_ps(17.64)
    assert hom.temporal_overlap(hom.OverlapParams(delay=sigma)) == pytest.approx(math.exp(-0.5))
    same = hom.OverlapParams(0.0, 17.64, 17.64, spectral_center_offset=0.0)
    assert hom.spectral_factor(same) == 1.0


def test_averaged_overlap_numeric():
    p = hom.OverlapParams(delay=4.0)
    sj = 3.0
    val, _ = integrate.quad(
        lambda d: hom.temporal_overlap(hom.OverlapParams(delay=4.0 + d)) * math.exp(-d * d / (2 * sj * sj)),
        -60, 60,
    )
    assert hom.averaged_overlap(p, sj) == pytest.approx(val / (sj * math.sqrt(2 * math.pi)), rel=1e-9)


# jitter convolution


def _numeric_convolution(dip, sigma_j_mm):
    x = np.linspace(-80, 80, 32001)
    h = x[1] - x[0]
    depth = dip.visibility * np.exp(-((x - dip.center) ** 2) / (2 * dip.width_sigma**2))
    if sigma_j_mm == 0:
        return depth.max()
    kern = np.exp(-(x**2) / (2 * sigma_j_mm**2))
    kern /= kern.sum()
    conv = np.convolve(depth, kern, mode="same")
    return conv[np.argmin(np.abs(x - dip.center))]


@pytest.mark.parametrize("ratio", [0.0, 0.3, 1.0, 2.0, 3.0])
def test_convolve_jitter_numeric(ratio):
    dip = hom.DipModel(50.0, 0.97, 0.0, 2.548)
    sigma_j_ps = ratio * dip.width_sigma * hom.PS_PER_MM_FREE_SPACE
    out = hom.convolve_jitter(dip, hom.JitterModel(sigma_j_ps))
    assert abs(out.visibility - _numeric_convolution(dip, ratio * dip.width_sigma)) <= 1e-6


def test_convolve_jitter_reference_point():
    sigma_mm = 6.0 / hom.FWHM_PER_SIGMA
    dip = hom.DipModel(1.0, 1.0, 0.0, sigma_mm)
    out = hom.convolve_jitter(dip, hom.JitterModel(3.0))
    assert out.visibility == pytest.approx(0.943, abs=5e-4)
    assert hom.convolve_jitter(dip, hom.JitterModel(0.0)) == dip


@given(st.floats(0, 30), st.floats(0.01, 10))
def test_convolve_jitter_monotone(sj, extra):
    dip = hom.DipModel(1.0, 1.0, 0.0, 2.5)
    a = hom.convolve_jitter(dip, hom.JitterModel(sj))
    b = hom.convolve_jitter(dip, hom.JitterModel(sj + extra))
    assert b.visibility < a.visibility and b.width_sigma > a.width_sigma


def test_infer_jitter_bound():
    sigma_ps = 6.0 / hom.FWHM_PER_SIGMA * hom.PS_PER_MM_FREE_SPACE
    assert sigma_ps == pytest.approx(8.49, abs=0.01)
    assert hom.infer_jitter_bound(1.0, sigma_ps) == 0.0
    bound = hom.infer_jitter_bound(0.955, sigma_ps)
    assert bound == pytest.approx(2.64, abs=0.01)
    # round trip through the convolution
    dip = hom.DipModel(1.0, 1.0, 0.0, 6.0 / hom.FWHM_PER_SIGMA)
    assert hom.convolve_jitter(dip, hom.JitterModel(bound)).visibility == pytest.approx(0.955, rel=1e-12)


# fitting


def _dip_points(b, v, c, s, x, counts=None):
    y = hom.dip_profile(x, b, v, c, s) if counts is None else counts
    return [(xi, yi, max(math.sqrt(yi), 1.0)) for xi, yi in zip(x, y)]


X21 = np.linspace(-15, 15, 21)


def test_fit_noiseless_round_trip():
    fit = hom.fit_dip(_dip_points(40, 1.0, 0.0, 2.5, X21))
    assert fit.converged
    assert np.allclose(fit.params, [40, 1.0, 0.0, 2.5], atol=1e-6)
    fit = hom.fit_dip(_dip_points(40, 0.8, 1.3, 3.1, X21))
    assert np.allclose(fit.params, [40, 0.8, 1.3, 3.1], atol=1e-6)


def test_fit_flat_data():
    fit = hom.fit_dip([(x, 40.0, math.sqrt(40)) for x in X21])
    v, sv, _ = hom.visibility_with_uncertainty(fit)
    assert abs(fit.params[1]) <= 3 * max(sv, 1e-9) or abs(fit.params[1]) < 1e-6


def test_fit_input_validation():
    with pytest.raises(ValueError):
        hom.fit_dip([(0, 1, 1)] * 3)
    with pytest.raises(ValueError):
        hom.fit_dip([(x, 1, 0) for x in X21])


def test_fit_strict_raises():
    pts = _dip_points(40, 1.0, 0.0, 2.5, X21)
    with pytest.raises(hom.FitError):
        hom.fit_dip(pts, max_iterations=1, rtol=0.0, strict=True)


@pytest.mark.slow
def test_fit_pulls_unit_variance():
    rng = np.random.default_rng(11)
    truth = np.array([400.0, 0.9, 0.5, 3.0])
    lam = hom.dip_profile(X21, *truth)
    pulls = []
    for _ in range(1000):
        n = rng.poisson(lam).astype(float)
        fit = hom.fit_dip(_dip_points(*truth, X21, counts=n))
        if fit.converged:
            pulls.append((fit.params - truth) / fit.errors)
    pulls = np.array(pulls)
    assert len(pulls) > 990
    assert np.allclose(pulls.std(axis=0), 1.0, atol=0.1)


def test_bootstrap_sigma_v():
    rng = np.random.default_rng(5)
    lam = hom.dip_profile(X21, 200.0, 0.9, 0.0, 2.5)
    n = rng.poisson(lam).astype(float)
    fit = hom.fit_dip(_dip_points(0, 0, 0, 1, X21, counts=n))
    _, sv, _ = hom.visibility_with_uncertainty(fit)
    boots = []
    for _ in range(300):
        nb = rng.poisson(n).astype(float)
        boots.append(hom.fit_dip(_dip_points(0, 0, 0, 1, X21, counts=nb)).params[1])
    assert np.std(boots) == pytest.approx(sv, rel=0.2)


def test_visibility_with_uncertainty():
    assert hom.visibility_with_uncertainty((1.0, 0.045)) == pytest.approx((1.0, 0.045, 0.955))
    assert hom.visibility_with_uncertainty((0.97, 0.0))[2] == 0.97
    v, _, lb = hom.visibility_with_uncertainty((1.02, 0.01))
    assert v == 1.0 and lb == pytest.approx(0.99)


@settings(max_examples=50)
@given(st.floats(1, 1e4), st.floats(0, 1), st.floats(-10, 10), st.floats(0.1, 10))
def test_dip_model_non_negative(b, v, c, s):
    m = hom.DipModel(b, v, c, s)
    assert np.all(m(np.linspace(-30, 30, 101)) >= 0)
    assert m.fwhm == pytest.approx(s * hom.FWHM_PER_SIGMA)
