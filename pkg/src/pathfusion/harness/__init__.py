"""Training, evaluation, ablation and lighting experiments, and reports."""

from .metrics import Metrics, empirical_cdf, evaluate, rmse
from .report import emit_report, parse_ablation_csv
from .suites import (
    DEFAULT_COMBOS,
    AblationReport,
    AblationResult,
    AblationRow,
    LightingReport,
    ablation_suite,
    combo_name,
    lighting_suite,
)
from .training import PreparedData, TrainConfig, TrainHistory, predict, prepare, train

__all__ = [
    "DEFAULT_COMBOS",
    "AblationReport",
    "AblationResult",
    "AblationRow",
    "LightingReport",
    "Metrics",
    "PreparedData",
    "TrainConfig",
    "TrainHistory",
    "ablation_suite",
    "combo_name",
    "emit_report",
    "empirical_cdf",
    "evaluate",
    "lighting_suite",
    "parse_ablation_csv",
    "predict",
    "prepare",
    "rmse",
    "train",
]
