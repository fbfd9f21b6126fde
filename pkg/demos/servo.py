"""
Keeping two 50 km arms the same length
======================================

A 5 mm/h thermal ramp is tracked by locating the white-light envelope of
the clock interferogram once a minute.
"""

import numpy as np

from optosync.optics import OpticalPulse
from optosync.stabilizer import ServoConfig, ThermalDriftModel, simulate_servo

clock = OpticalPulse()
ramp = ThermalDriftModel("ramp", 5.0)
rng = np.random.default_rng(1)

closed = simulate_servo(ramp, ServoConfig(), 5 * 3600.0, clock, rng)
opened = simulate_servo(ramp, ServoConfig(), 5 * 3600.0, clock, rng, enabled=False)

# Residual path difference, sampled every half hour
every = np.searchsorted(closed.time, np.arange(0, 5 * 3600 + 1, 1800))
for t, c, o in zip(closed.time[every], closed.residual[every], opened.residual[every]):
    print(f"{t / 3600:4.1f} h  locked {c:+7.3f} mm   free {o:+7.2f} mm")
print(f"closed-loop rms residual: {closed.rms_residual():.3f} mm")
