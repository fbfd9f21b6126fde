import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from optosync.optics import OpticalPulse
from optosync.stabilizer import (
    InterferogramSample,
    ServoConfig,
    ServoState,
    ThermalDriftModel,
    TrackingLostError,
    classical_interferogram,
    drift_path,
    drift_step,
    envelope_fwhm_mm,
    fringe_contrast,
    interferogram,
    locate_envelope_peak,
    micro_scan,
    servo_update,
    simulate_servo,
)

CLOCK = OpticalPulse()


def test_drift_ramp():
    m = ThermalDriftModel("ramp", 5.0)
    assert drift_step(m, 3600.0) == pytest.approx(5.0)
    assert drift_step(m, 1e-9) == pytest.approx(0.0, abs=1e-11)
    assert drift_step(ThermalDriftModel("ramp", 5.0, direction=-1), 3600.0) == pytest.approx(-5.0)
    with pytest.raises(ValueError):
        drift_step(m, 0.0)


def test_drift_random_walk_rms():
    rng = np.random.default_rng(0)
    m = ThermalDriftModel("random_walk", 5.0)
    steps = np.array([drift_step(m, 3600.0, rng) for _ in range(10_000)])
    assert np.sqrt(np.mean(steps**2)) == pytest.approx(5.0, rel=0.05)
    paths = np.array([drift_path(m, np.linspace(0, 3600, 7)[1:], rng)[-1] for _ in range(10_000)])
    assert np.sqrt(np.mean(paths**2)) == pytest.approx(5.0, rel=0.05)


@given(st.floats(0, 20), st.floats(0, 3600 * 24))
def test_ramp_window_bound(rate, t0):
    m = ThermalDriftModel("ramp", rate)
    p = drift_path(m, np.array([t0, t0 + 3600.0]))
    assert abs(p[1] - p[0]) <= rate * (1 + 1e-12)


def test_drift_model_validation():
    with pytest.raises(ValueError):
        ThermalDriftModel("sine", 1.0)
    with pytest.raises(ValueError):
        ThermalDriftModel("ramp", -1.0)


def test_interferogram_max_at_zero():
    s = classical_interferogram(0.0, CLOCK)
    assert s.intensity == pytest.approx(1.0)
    assert interferogram(np.array([0.0]), CLOCK)[0] == pytest.approx(1.0)


def test_envelope_fwhm():
    assert envelope_fwhm_mm(CLOCK) == pytest.approx(0.6, abs=0.01)
    x = np.linspace(-1, 1, 200001)
    env = fringe_contrast(x, CLOCK)
    above = x[env >= 0.5]
    assert above[-1] - above[0] == pytest.approx(envelope_fwhm_mm(CLOCK), abs=1e-4)


def test_contrast_vanishes_beyond_train_coherence():
    spacing = 0.299792458 * CLOCK.period  # mm between pulse replicas
    far = round(400e3 / spacing) * spacing  # ~400 m, on a pulse replica
    assert fringe_contrast(far, CLOCK) == pytest.approx(math.exp(-4.0), rel=1e-3)
    assert fringe_contrast(spacing, CLOCK) > 0.99
    with pytest.raises(TrackingLostError):
        locate_envelope_peak(micro_scan(far, 0.0, ServoConfig(), CLOCK, np.random.default_rng(0)),
                             CLOCK.center_wavelength)


def test_locate_noiseless_and_symmetric():
    cfg = ServoConfig(intensity_noise=0.0)
    est, unc = locate_envelope_peak(micro_scan(0.2, 0.0, cfg, CLOCK), CLOCK.center_wavelength)
    assert abs(est - 0.2) < 0.05
    est0, _ = locate_envelope_peak(micro_scan(0.0, 0.0, cfg, CLOCK), CLOCK.center_wavelength)
    assert abs(est0) < 1e-9


def test_locate_noisy_rms():
    cfg = ServoConfig()
    rng = np.random.default_rng(1)
    err = []
    for _ in range(1000):
        truth = rng.uniform(-0.4, 0.4)
        est, _ = locate_envelope_peak(micro_scan(truth, 0.0, cfg, CLOCK, rng), CLOCK.center_wavelength)
        err.append(est - truth)
    assert np.sqrt(np.mean(np.square(err))) <= 0.3


def test_tracking_lost():
    cfg = ServoConfig(intensity_noise=0.0)
    with pytest.raises(TrackingLostError):
        locate_envelope_peak(micro_scan(50.0, 0.0, cfg, CLOCK), CLOCK.center_wavelength)
    with pytest.raises(ValueError):
        locate_envelope_peak([InterferogramSample(0.0, 1.0)] * 3)


def test_servo_update_and_hold():
    st_ = ServoState()
    assert servo_update(st_, 0.0) == 0.0
    assert servo_update(st_, 0.4) == -0.4
    assert servo_update(st_, None) == -0.4 and st_.holds == 1


def test_zero_drift_zero_correction():
    tr = simulate_servo(ThermalDriftModel("ramp", 0.0), ServoConfig(intensity_noise=0.0), 3600.0, CLOCK,
                        np.random.default_rng(0))
    assert np.allclose(tr.correction, 0.0, atol=1e-9)


def test_closed_loop_5h():
    tr = simulate_servo(ThermalDriftModel("ramp", 5.0), ServoConfig(), 5 * 3600.0, CLOCK,
                        np.random.default_rng(2))
    assert tr.rms_residual() <= 0.3
    assert tr.lost == 0


def test_open_loop_tracks_drift():
    tr = simulate_servo(ThermalDriftModel("ramp", 5.0), ServoConfig(), 3600.0, CLOCK,
                        np.random.default_rng(3), enabled=False)
    assert np.array_equal(tr.residual, tr.drift)
    assert tr.residual[-1] == pytest.approx(5.0)
    assert np.all(np.isnan(tr.measured))


def test_servo_config_validation():
    with pytest.raises(ValueError):
        ServoConfig(accuracy_budget=0.0)
    with pytest.raises(ValueError):
        ServoConfig(dither_samples=2)
    assert math.isclose(ServoConfig().measurement_interval, 60.0)
