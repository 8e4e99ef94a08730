"""Evaluation backends and the concurrent candidate dispatcher."""

import asyncio
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Type, Union

from seqnas.cost import arch_cost
from seqnas.data import SeqDataset
from seqnas.errors import (
    EXIT_DIVERGENCE,
    CandidateFailure,
    CandidateOutcome,
    ConfigError,
    ErrorCode,
    SeqNASError,
)
from seqnas.neural.network import TrainSettings, build_fixed, train_fixed
from seqnas.space import Architecture
from seqnas.surrogate import SurrogateSpec, surrogate_train_curve

logger = logging.getLogger(__name__)


@dataclass
class CandidateScore:
    """One row of a score table."""

    candidate_id: int
    stage: str
    arch: str
    path: str
    epochs: int
    score: float
    macs: int
    params: int
    val_loss: Optional[float] = None
    frame_acc: Optional[float] = None
    seq_acc: Optional[float] = None
    curve: List[float] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


class SurrogateBackend:
    """Closed-form scorer; an epoch count only shapes the training curve."""

    name = "surrogate"

    def __init__(self, spec: SurrogateSpec):
        self.spec = spec

    def evaluate(
        self, arch: Architecture, epochs: int, seed: int, candidate_id: int, stage: str
    ) -> CandidateScore:
        curve = surrogate_train_curve(arch, self.spec, epochs)
        cost = arch_cost(arch)
        return CandidateScore(
            candidate_id=candidate_id,
            stage=stage,
            arch=str(arch),
            path=str(arch.path),
            epochs=epochs,
            score=curve[-1],
            macs=cost.total_macs,
            params=cost.total_params,
            curve=curve,
        )


class NeuralBackend:
    """Trains each candidate from scratch on the synthetic task."""

    name = "neural"

    def __init__(
        self,
        train: SeqDataset,
        val: SeqDataset,
        settings: TrainSettings,
        num_classes: int,
        checkpoint_dir: Optional[Path] = None,
    ):
        self.train = train
        self.val = val
        self.settings = settings
        self.num_classes = num_classes
        self.checkpoint_dir = checkpoint_dir

    def evaluate(
        self, arch: Architecture, epochs: int, seed: int, candidate_id: int, stage: str
    ) -> CandidateScore:
        net = build_fixed(arch, seed, self.num_classes)
        report = train_fixed(
            net, self.train, epochs, self.settings.batch, seed, val=self.val, settings=self.settings
        )
        if self.checkpoint_dir is not None:
            net.store.save(self.checkpoint_dir / f"{stage}-{candidate_id:03d}")
        cost = arch_cost(arch)
        return CandidateScore(
            candidate_id=candidate_id,
            stage=stage,
            arch=str(arch),
            path=str(arch.path),
            epochs=epochs,
            score=report.frame_accuracy,
            macs=cost.total_macs,
            params=cost.total_params,
            val_loss=report.val_loss,
            frame_acc=report.frame_accuracy,
            seq_acc=report.seq_accuracy,
            curve=[r.val_loss for r in report.train_curve],
        )


Backend = Union[SurrogateBackend, NeuralBackend]

BACKEND_REGISTRY: Dict[str, Type] = {
    SurrogateBackend.name: SurrogateBackend,
    NeuralBackend.name: NeuralBackend,
}


def get_backend_class(name: str) -> Type:
    if name not in BACKEND_REGISTRY:
        raise ConfigError(
            f"Unknown backend: {name}",
            suggestion=f"Available backends: {', '.join(BACKEND_REGISTRY)}",
        )
    return BACKEND_REGISTRY[name]


async def dispatch_candidate(
    backend: Backend,
    candidate_id: int,
    arch: Architecture,
    epochs: int,
    seed: int,
    stage: str,
    executor: Optional[ThreadPoolExecutor] = None,
) -> CandidateOutcome:
    """Evaluate one candidate in the executor, never raising."""
    start_time = time.time()
    metadata = {"candidate_id": candidate_id, "arch": str(arch), "backend": backend.name}
    try:
        loop = asyncio.get_running_loop()
        score = await loop.run_in_executor(
            executor, lambda: backend.evaluate(arch, epochs, seed, candidate_id, stage)
        )
        metadata["duration_ms"] = int((time.time() - start_time) * 1000)
        return CandidateOutcome.success_result(score, metadata=metadata)

    except SeqNASError as e:
        metadata["duration_ms"] = int((time.time() - start_time) * 1000)
        return CandidateOutcome.error_result(
            code=e.code,
            message=e.message,
            suggestion=e.suggestion,
            details=e.details or None,
            metadata=metadata,
        )

    except Exception as e:
        logger.exception(f"Unexpected error evaluating candidate {candidate_id}")
        metadata["duration_ms"] = int((time.time() - start_time) * 1000)
        return CandidateOutcome.error_result(
            code=ErrorCode.UNKNOWN,
            message=f"Unexpected error: {e}",
            metadata=metadata,
        )


async def evaluate_candidates(
    backend: Backend,
    archs: Sequence[Architecture],
    epochs: int,
    seed: int,
    threads: int = 1,
    stage: str = "step1",
) -> List[CandidateOutcome]:
    """Evaluate candidates concurrently; outcomes come back in candidate order."""
    with ThreadPoolExecutor(max_workers=max(1, threads)) as executor:
        outcomes = await asyncio.gather(
            *(
                dispatch_candidate(backend, i, arch, epochs, seed, stage, executor)
                for i, arch in enumerate(archs)
            )
        )
    return list(outcomes)


def run_candidates(
    backend: Backend,
    archs: Sequence[Architecture],
    epochs: int,
    seed: int,
    threads: int = 1,
    stage: str = "step1",
) -> List[CandidateScore]:
    """Synchronous wrapper that aborts on the first failed candidate (lowest id)."""
    outcomes = asyncio.run(evaluate_candidates(backend, archs, epochs, seed, threads, stage))
    for i, outcome in enumerate(outcomes):
        if not outcome.success:
            error = outcome.error
            logger.error(f"Candidate {i} ({archs[i]}) failed: {error.message}")
            raise CandidateFailure(
                f"Candidate {i} ({archs[i]}) failed: [{error.code}] {error.message}",
                candidate_id=i,
                exit_code=EXIT_DIVERGENCE,
                suggestion=error.suggestion,
                details={"candidate": outcome.to_dict()},
            )
    return [outcome.result for outcome in outcomes]
