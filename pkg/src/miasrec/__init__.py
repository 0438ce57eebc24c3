"""Multi-intent session recommendation with sparse intent selection."""

from .entmax import entmax, entmax_bisect
from .estimator import MiaSRec
from .evaluation import MetricsReport, aggregate_seeds, evaluate, popularity_baseline
from .model import MiaSRecNetwork, ModelConfig, load_checkpoint, save_checkpoint
from .sessions import SessionCorpus, chronological_split, expand_prefixes, load_events, preprocess
from .training import TrainConfig, set_seed, train

__version__ = "0.1.0"

__all__ = [
    "MetricsReport",
    "MiaSRec",
    "MiaSRecNetwork",
    "ModelConfig",
    "SessionCorpus",
    "TrainConfig",
    "aggregate_seeds",
    "chronological_split",
    "entmax",
    "entmax_bisect",
    "evaluate",
    "expand_prefixes",
    "load_checkpoint",
    "load_events",
    "popularity_baseline",
    "preprocess",
    "save_checkpoint",
    "set_seed",
    "train",
]
