"""Evaluation toolkit for out-of-distribution detectors on precomputed features and logits."""

__version__ = "0.1.0"

from .arraystore import EvalBundle, load_bundle, read_matrix, write_matrix
from .detectors import METHODS, ScoreVector, score_method
from .errors import DataError, DegenerateError, FormatError, OODEvalError
from .fitstats import FittedState, fit_state, load_state, save_state
from .metrics import EvalReport, auroc, aupr, fpr_at_tpr, per_class_report, threshold_at_tpr

__all__ = [
    "METHODS",
    "DataError",
    "DegenerateError",
    "EvalBundle",
    "EvalReport",
    "FittedState",
    "FormatError",
    "OODEvalError",
    "ScoreVector",
    "aupr",
    "auroc",
    "fit_state",
    "fpr_at_tpr",
    "load_bundle",
    "load_state",
    "per_class_report",
    "read_matrix",
    "save_state",
    "score_method",
    "threshold_at_tpr",
    "write_matrix",
]
