"""Semi-supervised distributionally robust learning over finite supports."""

from .data import Dataset, DataError, SupportSet, build_support, load_csv, split, write_csv
from .losses import LogisticLoss, SquaredLoss, get_loss
from .mlmc import MLMCGradient, unbiased_gradient
from .objective import DualObjective, SmoothingConfig, dual_value, inner_max_exact
from .solver import (
    SgdConfig, TrainedModel, cross_validate_delta, exact_train, regularized_logistic_baseline, sgd_train,
)
from .transport import TransportCost, discrepancy, optimal_plan
from .rwp import RwpInstance, rwp_value, select_delta

__version__ = "0.1.0"

__all__ = [
    "Dataset", "DataError", "SupportSet", "build_support", "load_csv", "split", "write_csv",
    "LogisticLoss", "SquaredLoss", "get_loss", "MLMCGradient", "unbiased_gradient",
    "DualObjective", "SmoothingConfig", "dual_value", "inner_max_exact",
    "SgdConfig", "TrainedModel", "cross_validate_delta", "exact_train", "regularized_logistic_baseline", "sgd_train",
    "TransportCost", "discrepancy", "optimal_plan", "RwpInstance", "rwp_value", "select_delta",
]
