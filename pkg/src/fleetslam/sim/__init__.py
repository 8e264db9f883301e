"""Synthetic multi-robot sonar SLAM missions."""

from .config import CASES, MissionConfig, apply_scenario, load_config, save_config, scenario_preset
from .mission import MetricsReport, MissionResult, merge_maps, run_mission, write_outputs
from .scenario import Scenario, build_scenario
from .world import SonarParams, World, generate_world, simulate_scan

__all__ = [
    "CASES",
    "MetricsReport",
    "MissionConfig",
    "MissionResult",
    "Scenario",
    "SonarParams",
    "World",
    "apply_scenario",
    "build_scenario",
    "generate_world",
    "load_config",
    "merge_maps",
    "run_mission",
    "save_config",
    "scenario_preset",
    "simulate_scan",
    "write_outputs",
]
