"""Fixed networks, the weight-sharing supernet and their training loops."""

from seqnas.neural.network import EvalReport, FixedNet, TrainSettings, build_fixed, train_fixed
from seqnas.neural.supernet import (
    ArchParams,
    SuperNet,
    alternating_search,
    discretize,
    enforce_budget,
    warmup,
)

__all__ = [
    "ArchParams",
    "EvalReport",
    "FixedNet",
    "SuperNet",
    "TrainSettings",
    "alternating_search",
    "build_fixed",
    "discretize",
    "enforce_budget",
    "train_fixed",
    "warmup",
]
