"""Privacy-preserving IoT data marketplace simulator."""

from .sim import ScenarioConfig, Simulation, SimulationResult, run_scenario

__all__ = ["ScenarioConfig", "Simulation", "SimulationResult", "run_scenario"]
__version__ = "0.1.0"
