"""Search controllers and evaluation backends."""

from seqnas.search.backends import BACKEND_REGISTRY, CandidateScore, evaluate_candidates
from seqnas.search.engine import (
    SearchResult,
    SearchRun,
    beta_sweep,
    decoupling_check,
    random_search,
    step1_path_search,
    step2_op_search,
    two_step_search,
)

__all__ = [
    "BACKEND_REGISTRY",
    "CandidateScore",
    "SearchResult",
    "SearchRun",
    "beta_sweep",
    "decoupling_check",
    "evaluate_candidates",
    "random_search",
    "step1_path_search",
    "step2_op_search",
    "two_step_search",
]
