"""Orchestration: configuration, calibration, campaigns and reporting."""

from .config import LinkConfig, load_config, dump_config, config_digest
from .calibrate import calibrate, CalibrationResult, CalibrationError
from .campaign import LinkMetrics, CampaignSummary, SweepRow, run_stability, run_attenuation_sweep
from .outputs import emit_stability_outputs, emit_sweep_outputs, metrics_to_csv, sweep_to_csv

__all__ = [
    "LinkConfig",
    "load_config",
    "dump_config",
    "config_digest",
    "calibrate",
    "CalibrationResult",
    "CalibrationError",
    "LinkMetrics",
    "CampaignSummary",
    "SweepRow",
    "run_stability",
    "run_attenuation_sweep",
    "emit_stability_outputs",
    "emit_sweep_outputs",
    "metrics_to_csv",
    "sweep_to_csv",
]
