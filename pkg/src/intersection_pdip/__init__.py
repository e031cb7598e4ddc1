"""Hierarchical primal-dual interior-point solver for distributed intersection coordination."""
from __future__ import annotations

from .coordination_net import CommLedger, airtime_microseconds, expected_floats, run_distributed_solve
from .pdip_solver import SolveResult, SolverConfig, solve
from .problem import Problem
from .reca_param import RecaMode, suboptimality
from .scenario_io import generate_random_scenario, load_scenario, reference_scenario, save_scenario, scenario_from_dict
from .transcription import Scenario, ScenarioError
from .vehicle_model import DEFAULT_PARAMS, VehicleParams

__all__ = [
    "CommLedger", "DEFAULT_PARAMS", "Problem", "RecaMode", "Scenario", "ScenarioError", "SolveResult",
    "SolverConfig", "VehicleParams", "airtime_microseconds", "expected_floats", "generate_random_scenario",
    "load_scenario", "reference_scenario", "run_distributed_solve", "save_scenario", "scenario_from_dict",
    "solve", "suboptimality",
]
