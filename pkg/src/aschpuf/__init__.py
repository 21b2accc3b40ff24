"""Behavioral simulator and protocol stack for a self-checking, self-healing PUF."""

from .cell import (
    NOMINAL,
    CellConfig,
    CellModel,
    ChipModel,
    ConfigError,
    Environment,
    ModelConfig,
    apply_aging,
    ground_truth_unstable,
    load_config,
    sample_chip,
)
from .maps import MapSource, StabilizationMap
from .keygen import BitPlane, Key, KeyTooLong, generate_key, golden_plane, stabilize_readout
from .asch import (
    CheckSettings,
    DacModel,
    TargetOutOfRange,
    asc_only,
    run_d_asch_powerup,
    run_s_asch,
    self_check,
)

__version__ = "0.1.0"

__all__ = [
    "NOMINAL", "CellConfig", "CellModel", "ChipModel", "ConfigError", "Environment", "ModelConfig",
    "apply_aging", "ground_truth_unstable", "load_config", "sample_chip",
    "MapSource", "StabilizationMap",
    "BitPlane", "Key", "KeyTooLong", "generate_key", "golden_plane", "stabilize_readout",
    "CheckSettings", "DacModel", "TargetOutOfRange", "asc_only", "run_d_asch_powerup", "run_s_asch",
    "self_check",
]
