"""Configuration-driven scenario runner."""

from .config import REGISTRY, ScenarioConfig, from_dict, load, registry_config
from .runner import main, run_scenario, sweep_compare

__all__ = ["REGISTRY", "ScenarioConfig", "from_dict", "load", "registry_config", "main", "run_scenario",
           "sweep_compare"]
