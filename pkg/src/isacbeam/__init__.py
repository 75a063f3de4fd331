"""Temporal-assisted ISAC beamforming: radar-aided sum-rate beam design over N slots."""

from .config import (ConfigError, DeviceGroundTruth, SolverSettings, SystemConfig, default_scenario_path,
                     load_config)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DeviceGroundTruth",
    "SolverSettings",
    "SystemConfig",
    "default_scenario_path",
    "load_config",
    "__version__",
]
