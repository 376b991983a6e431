"""Cascaded channel estimation for RIS-aided multi-user MIMO-OFDM.

Library + CLI implementing the DS-MDT estimator (dual-structure features,
multi-dimensional transformations): ground-truth channel synthesis, the
subspace estimation pipeline, and a Monte-Carlo benchmark harness.
"""

__version__ = "0.1.0"

from .channel import (
    BsRisPaths,
    CascadedParams,
    ChannelScenario,
    UeRisPaths,
    map_cascaded,
    steer_ula,
    steer_upa,
)
from .estimator import EstimateReport, PipelineOptions, run_ds_mdt
from .scenario import MeasurementSet, ScenarioConfig, build_measurement_set

__all__ = [
    "BsRisPaths",
    "CascadedParams",
    "ChannelScenario",
    "EstimateReport",
    "MeasurementSet",
    "PipelineOptions",
    "ScenarioConfig",
    "UeRisPaths",
    "build_measurement_set",
    "map_cascaded",
    "run_ds_mdt",
    "steer_ula",
    "steer_upa",
]
