"""Toy two-backbone re-identification model with stacked fusion layers."""

from ._core import (
    ConfigError,
    DataError,
    DimensionError,
    Error,
    IoError,
    NumericalError,
    Session,
    UsageError,
    ablate,
    ablation_presets,
    average_precision,
    dmf_param_counts,
    evaluate,
    evaluate_distances,
    lr_schedule,
    resolve_config,
    synth_data,
    train,
)

__all__ = [
    "ConfigError",
    "DataError",
    "DimensionError",
    "Error",
    "IoError",
    "NumericalError",
    "Session",
    "UsageError",
    "ablate",
    "ablation_presets",
    "average_precision",
    "dmf_param_counts",
    "evaluate",
    "evaluate_distances",
    "lr_schedule",
    "resolve_config",
    "synth_data",
    "train",
]
