from .config import ALL_SCHEMES, ExperimentConfig, Scheme, config_from_dict, load_config
from .metrics import write_metrics
from .runner import (
    Cell,
    Comparison,
    CurvePoint,
    EpochRecord,
    SchemeResult,
    accuracy_vs_institutions,
    compare_schemes,
    prepare_data,
    run_scheme,
)

__all__ = [
    "ALL_SCHEMES", "Cell", "Comparison", "CurvePoint", "EpochRecord", "ExperimentConfig", "Scheme",
    "SchemeResult", "accuracy_vs_institutions", "compare_schemes", "config_from_dict", "load_config",
    "prepare_data", "run_scheme", "write_metrics",
]
