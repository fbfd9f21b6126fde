"""Simulation of all-optical clock distribution to two photon-pair sources,
qualified by two-photon (HOM) interference."""

from .scenario import Scenario, ScenarioError, list_presets, load_preset, load_scenario, resolve
from .simulate import RunResult, run_dip_scan, run_sweep, throughput_projection

__version__ = "0.1.0"

__all__ = [
    "RunResult",
    "Scenario",
    "ScenarioError",
    "list_presets",
    "load_preset",
    "load_scenario",
    "resolve",
    "run_dip_scan",
    "run_sweep",
    "throughput_projection",
]
