"""Unexpectedness-aware recommendation: interest clustering, hybrid utility, evaluation."""

from .data import InteractionEvent, Schema, parse_interactions, split_time_stratified
from .engine import EvalConfig, PursModel, TrainConfig, VariantId, evaluate, recommend_topk, train, utility
from .metrics import MetricsReport
from .unexpectedness import InterestCluster, MeanShiftConfig, mean_shift, unexp_activation, unexpectedness

__version__ = "0.1.0"

__all__ = [
    "EvalConfig", "InteractionEvent", "InterestCluster", "MeanShiftConfig", "MetricsReport", "PursModel",
    "Schema", "TrainConfig", "VariantId", "evaluate", "mean_shift", "parse_interactions", "recommend_topk",
    "split_time_stratified", "train", "unexp_activation", "unexpectedness", "utility",
]
