"""Two-step path-then-operation search, the random baseline and related experiments.

Step 1 fixes every layer to the 3x3 residual convolution and ranks the
candidate downsampling paths. Step 2 keeps the winning path and searches one
op per layer under the FLOPS regularizer: by relaxation on the neural backend,
by exhaustive scan or coordinate ascent on the surrogate.
"""

import itertools
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from seqnas.cost import (
    MIN_HARD_MACS,
    CostReport,
    RegularizerConfig,
    arch_cost,
    flops_table,
    hard_regularizer,
    uniform_cost,
)
from seqnas.data import DataSettings, SeqDataset, build_datasets
from seqnas.errors import ConfigError, InfeasibleError
from seqnas.neural.network import TrainSettings
from seqnas.neural.supernet import (
    SuperNet,
    alternating_search,
    discretize,
    enforce_budget,
    warmup,
)
from seqnas.persistence import RANDOM_FILE, STEP1_FILE, STEP2_FILE, RunArtifacts
from seqnas.search.backends import (
    Backend,
    CandidateScore,
    NeuralBackend,
    SurrogateBackend,
    get_backend_class,
    run_candidates,
)
from seqnas.space import (
    MB3E1,
    RES3,
    Architecture,
    SpaceSpec,
    StridePath,
    enumerate_paths,
    legal_mask,
)
from seqnas.surrogate import SurrogateSpec, affinity, layer_stages, path_penalty

logger = logging.getLogger(__name__)

DEFAULT_OP = RES3
STEP1_PATH_MODES = ("typical", "all")
MAX_RANDOM_TRIES = 1000
MAX_SWEEPS = 1000

Datasets = Tuple[SeqDataset, SeqDataset]


def step1_paths(space: SpaceSpec, mode: str = "typical") -> List[StridePath]:
    """Typical stage-aligned paths, or every path of the space."""
    if mode not in STEP1_PATH_MODES:
        raise ConfigError(f"step1_paths must be one of {STEP1_PATH_MODES}, got {mode!r}")
    if mode == "all" or space.ds_positions is not None:
        return enumerate_paths(space)
    return enumerate_paths(space.typical())


def default_budget(space: SpaceSpec, paths: Sequence[StridePath]) -> int:
    """Twice the all-mb3e1 cost of the most expensive candidate path."""
    return 2 * max(uniform_cost(space, path, MB3E1) for path in paths)


@dataclass(frozen=True)
class SearchRun:
    space: SpaceSpec
    backend: str = "surrogate"
    step1_epochs: int = 5
    step2_warmup_epochs: int = 1
    step2_epochs: int = 2
    reg: Optional[RegularizerConfig] = None
    budget_macs: Optional[float] = None
    seed: int = 0
    output_dir: Optional[Path] = None
    surrogate: SurrogateSpec = field(default_factory=SurrogateSpec)
    train: TrainSettings = field(default_factory=TrainSettings)
    data: DataSettings = field(default_factory=DataSettings)
    step1_paths: str = "typical"
    restarts: int = 8
    exhaustive_limit: int = 4096
    random_candidates: int = 10
    threads: int = 1

    def __post_init__(self):
        get_backend_class(self.backend)
        if min(self.step1_epochs, self.step2_warmup_epochs, self.step2_epochs) < 1:
            raise ConfigError("All epoch counts must be at least 1")
        if self.step1_paths not in STEP1_PATH_MODES:
            raise ConfigError(f"step1_paths must be one of {STEP1_PATH_MODES}")
        if self.restarts < 1 or self.random_candidates < 1 or self.threads < 1:
            raise ConfigError("restarts, random_candidates and threads must be at least 1")
        if self.exhaustive_limit < 0:
            raise ConfigError("exhaustive_limit must be non-negative")
        if self.budget_macs is None:
            object.__setattr__(
                self, "budget_macs", default_budget(self.space, self.candidate_paths())
            )
        if not self.budget_macs > 0:
            raise ConfigError(f"budget_macs must be positive, got {self.budget_macs}")
        if self.reg is None:
            # the pivot sits at the budget, so r == 1 there
            G = max(float(self.budget_macs), MIN_HARD_MACS)
            object.__setattr__(self, "reg", RegularizerConfig(G=G))

    def candidate_paths(self) -> List[StridePath]:
        return step1_paths(self.space, self.step1_paths)

    def artifacts(self) -> Optional[RunArtifacts]:
        return RunArtifacts(self.output_dir) if self.output_dir is not None else None


@dataclass
class SearchResult:
    best_path: StridePath
    best_arch: Architecture
    scores: List[CandidateScore]
    cost: CostReport
    backend: str
    seed: int
    score: float
    val_loss: Optional[float] = None
    epochs_used: Dict[str, int] = field(default_factory=dict)
    wall_time: float = 0.0

    @property
    def effective_depth(self) -> int:
        return self.best_arch.effective_depth

    def to_dict(self) -> Dict[str, Any]:
        """JSON form; wall time is left out so repeated runs serialize identically."""
        return {
            "backend": self.backend,
            "seed": self.seed,
            "best_path": str(self.best_path),
            "best_arch": str(self.best_arch),
            "score": self.score,
            "val_loss": self.val_loss,
            "cost": self.cost.to_dict(),
            "effective_depth": self.effective_depth,
            "epochs_used": self.epochs_used,
            "scores": [row.to_dict() for row in self.scores],
        }


def make_backend(run: SearchRun, datasets: Optional[Datasets] = None) -> Backend:
    if run.backend == SurrogateBackend.name:
        return SurrogateBackend(run.surrogate)
    train, val = datasets or build_datasets(run.space, run.data)
    checkpoint_dir = run.output_dir / "checkpoints" if run.output_dir is not None else None
    return NeuralBackend(train, val, run.train, run.data.K, checkpoint_dir)


def _rank_key(row: CandidateScore, backend: str) -> float:
    return row.val_loss if backend == NeuralBackend.name else -row.score


def _regularized_key(row: CandidateScore, run: SearchRun) -> float:
    if run.backend == NeuralBackend.name:
        return row.val_loss
    return hard_regularizer(row.macs, run.reg) * (1.0 - row.score)


def _select(rows: Sequence[CandidateScore], key) -> int:
    """Index of the smallest key; ties go to the lower candidate index."""
    return min(range(len(rows)), key=lambda i: (key(rows[i]), i))


def step1_path_search(
    run: SearchRun,
    backend: Optional[Backend] = None,
    artifacts: Optional[RunArtifacts] = None,
) -> Tuple[StridePath, List[CandidateScore]]:
    """Rank candidate paths with every layer fixed to the residual 3x3 convolution."""
    backend = backend or make_backend(run)
    paths = run.candidate_paths()
    archs = [Architecture.uniform(run.space, path, DEFAULT_OP) for path in paths]
    logger.info(f"Step 1: {len(paths)} candidate paths, {run.step1_epochs} epochs each")
    scores = run_candidates(backend, archs, run.step1_epochs, run.seed, run.threads, "step1")
    best = _select(scores, lambda row: _rank_key(row, backend.name))
    if artifacts is not None:
        artifacts.write_jsonl(STEP1_FILE, (row.to_dict() for row in scores))
    logger.info(f"Step 1 winner: {paths[best]} (score {scores[best].score:.4f})")
    return paths[best], scores


class PathScorer:
    """Surrogate objective r(M) * (1 - score) for op assignments on one path."""

    def __init__(self, run: SearchRun, path: StridePath):
        space, spec = run.space, run.surrogate
        self.run = run
        self.path = path
        self.table = flops_table(space, path)
        mask = legal_mask(space, path)
        self.choices = [[j for j, ok in enumerate(row) if ok] for row in mask]
        stages = layer_stages(path)
        self.affinity = [
            [affinity(spec.seed, layer, op.code, stage) for op in space.op_vocab]
            for layer, stage in enumerate(stages, start=1)
        ]
        self.penalty = path_penalty(path, spec.seed, space.a, space.b)

    @property
    def assignment_count(self) -> int:
        return math.prod(len(c) for c in self.choices)

    def macs(self, assign: Sequence[int]) -> int:
        return int(sum(self.table[l, j] for l, j in enumerate(assign)))

    def score(self, assign: Sequence[int]) -> float:
        spec = self.run.surrogate
        macs = self.macs(assign)
        aff = sum(self.affinity[l][j] for l, j in enumerate(assign))
        raw = (
            0.9
            - spec.w_cost * abs(macs - spec.target_macs) / spec.target_macs
            - spec.w_path * self.penalty
            + spec.affinity_scale * aff
        )
        return min(1.0, max(0.0, raw))

    def objective(self, assign: Sequence[int]) -> float:
        """Infinite when over budget."""
        macs = self.macs(assign)
        if macs > self.run.budget_macs:
            return math.inf
        return hard_regularizer(macs, self.run.reg) * (1.0 - self.score(assign))

    def architecture(self, assign: Sequence[int]) -> Architecture:
        space = self.run.space
        return Architecture(space, self.path, tuple(space.op_vocab[j] for j in assign))

    def record(self, assign: Sequence[int], **extra: Any) -> Dict[str, Any]:
        return {
            **extra,
            "ops": [self.run.space.op_vocab[j].code for j in assign],
            "objective": self.objective(assign),
            "macs": self.macs(assign),
            "score": self.score(assign),
        }


def _better(value: float, assign: List[int], best_value: float, best: Optional[List[int]]) -> bool:
    return value < best_value or (value == best_value and best is not None and assign < best)


def _pair_moves(scorer: PathScorer, assign: List[int]) -> Iterator[List[int]]:
    for l1, l2 in itertools.combinations(range(len(assign)), 2):
        for j1 in scorer.choices[l1]:
            if j1 == assign[l1]:
                continue
            for j2 in scorer.choices[l2]:
                if j2 == assign[l2]:
                    continue
                candidate = list(assign)
                candidate[l1], candidate[l2] = j1, j2
                yield candidate


def _ascend(scorer: PathScorer, assign: List[int]) -> Tuple[List[int], float, int]:
    """First-improvement sweeps over single-layer changes, falling back to two-layer changes.

    Stops at an assignment that no single or pair change improves, or after MAX_SWEEPS.
    """
    value = scorer.objective(assign)
    for sweep in range(1, MAX_SWEEPS + 1):
        improved = False
        for l, options in enumerate(scorer.choices):
            for j in options:
                if j == assign[l]:
                    continue
                candidate = assign[:l] + [j] + assign[l + 1:]
                cand_value = scorer.objective(candidate)
                if cand_value < value:
                    assign, value, improved = candidate, cand_value, True
        if not improved:
            for candidate in _pair_moves(scorer, assign):
                cand_value = scorer.objective(candidate)
                if cand_value < value:
                    assign, value, improved = candidate, cand_value, True
                    break
        if not improved:
            break
    return assign, value, sweep


def surrogate_op_search(
    run: SearchRun, path: StridePath
) -> Tuple[Architecture, List[Dict[str, Any]]]:
    """Exhaustive scan when small, coordinate ascent with seeded restarts otherwise.

    The ascent is a heuristic: every restart ends at a single- and pair-move local
    optimum, and the best restart wins, but the global optimum is not guaranteed.
    """
    scorer = PathScorer(run, path)
    history: List[Dict[str, Any]] = []
    best: Optional[List[int]] = None
    best_value = math.inf

    if scorer.assignment_count <= run.exhaustive_limit:
        for combo in itertools.product(*scorer.choices):
            assign = list(combo)
            value = scorer.objective(assign)
            if value < best_value:
                best, best_value = assign, value
                history.append(scorer.record(assign, method="exhaustive"))
    else:
        rng = np.random.default_rng(run.seed)
        for restart in range(run.restarts):
            if restart == 0:
                assign = [c[0] for c in scorer.choices]
            else:
                assign = [int(rng.choice(c)) for c in scorer.choices]
            assign, value, sweep = _ascend(scorer, assign)
            history.append(
                scorer.record(assign, method="coordinate_ascent", restart=restart, sweeps=sweep)
            )
            if _better(value, assign, best_value, best):
                best, best_value = assign, value

    if best is None or math.isinf(best_value):
        raise InfeasibleError(
            f"No legal architecture on {path} fits the budget of {run.budget_macs:.0f} MACs",
            suggestion="Raise run.budget_macs.",
        )
    logger.info(f"Surrogate step 2 on {path}: objective {best_value:.6f}")
    return scorer.architecture(best), history


def neural_op_search(
    run: SearchRun,
    path: StridePath,
    datasets: Datasets,
    artifacts: Optional[RunArtifacts] = None,
) -> Tuple[Architecture, List[Dict[str, Any]]]:
    """Warm-up, alternating weight/alpha updates, discretization and budget check."""
    train, val = datasets
    net = SuperNet(
        run.space, path, run.seed, num_classes=run.data.K, temperature=run.train.temperature
    )
    warmup(net, train, run.step2_warmup_epochs, run.seed, run.train)
    alpha, history = alternating_search(
        net, train, val, run.step2_epochs, run.reg, run.seed, run.train
    )
    arch = enforce_budget(discretize(alpha, path, run.space), alpha, run.budget_macs)
    if artifacts is not None:
        net.store.save(artifacts.checkpoint_dir / "supernet")
        artifacts.write_json("checkpoints/alpha.json", alpha.to_dict())
    return arch, history


def _op_search(
    run: SearchRun,
    path: StridePath,
    datasets: Optional[Datasets],
    artifacts: Optional[RunArtifacts],
) -> Tuple[Architecture, List[Dict[str, Any]]]:
    if run.backend == SurrogateBackend.name:
        arch, history = surrogate_op_search(run, path)
    else:
        arch, history = neural_op_search(
            run, path, datasets or build_datasets(run.space, run.data), artifacts
        )
    if artifacts is not None:
        artifacts.write_jsonl(STEP2_FILE, history)
    return arch, history


def step2_op_search(
    run: SearchRun,
    path: StridePath,
    datasets: Optional[Datasets] = None,
    artifacts: Optional[RunArtifacts] = None,
) -> Architecture:
    """Search one op per layer on a fixed path under the FLOPS regularizer."""
    arch, _ = _op_search(run, path, datasets, artifacts)
    return arch


def _check_budget(arch: Architecture, run: SearchRun) -> CostReport:
    cost = arch_cost(arch)
    if cost.total_macs > run.budget_macs:
        raise InfeasibleError(
            f"{arch} costs {cost.total_macs} MACs, over the budget of {run.budget_macs:.0f}"
        )
    return cost


def _step2_epochs(run: SearchRun) -> int:
    if run.backend == SurrogateBackend.name:
        return 0
    return run.step2_warmup_epochs + run.step2_epochs


def two_step_search(
    run: SearchRun,
    datasets: Optional[Datasets] = None,
    path: Optional[StridePath] = None,
) -> SearchResult:
    """Step 1 picks the path (skipped when ``path`` is given), step 2 picks the ops."""
    start = time.perf_counter()
    artifacts = run.artifacts()
    if run.backend == NeuralBackend.name and datasets is None:
        datasets = build_datasets(run.space, run.data)
    backend = make_backend(run, datasets)

    scores: List[CandidateScore] = []
    epochs_used: Dict[str, int] = {"step1": 0}
    if path is None:
        path, scores = step1_path_search(run, backend, artifacts)
        epochs_used["step1"] = len(scores) * run.step1_epochs

    arch, _ = _op_search(run, path, datasets, artifacts)
    epochs_used["step2"] = _step2_epochs(run)
    epochs_used["total"] = epochs_used["step1"] + epochs_used["step2"]
    cost = _check_budget(arch, run)

    final = run_candidates(backend, [arch], run.step1_epochs, run.seed, 1, "final")[0]
    final.candidate_id = len(scores)
    scores.append(final)
    logger.info(
        f"Two-step result: {arch} ({cost.total_macs} MACs, effective depth {arch.effective_depth})"
    )
    return SearchResult(
        best_path=path,
        best_arch=arch,
        scores=scores,
        cost=cost,
        backend=run.backend,
        seed=run.seed,
        score=final.score,
        val_loss=final.val_loss,
        epochs_used=epochs_used,
        wall_time=time.perf_counter() - start,
    )


def sample_architecture(run: SearchRun, rng: np.random.Generator) -> Architecture:
    """Uniform candidate path, then uniform legal op per layer, rejected until within budget."""
    paths = run.candidate_paths()
    for _ in range(MAX_RANDOM_TRIES):
        path = paths[int(rng.integers(len(paths)))]
        mask = legal_mask(run.space, path)
        ops = []
        for row in mask:
            legal = [j for j, ok in enumerate(row) if ok]
            ops.append(run.space.op_vocab[int(rng.choice(legal))])
        arch = Architecture(run.space, path, tuple(ops))
        if arch_cost(arch).total_macs <= run.budget_macs:
            return arch
    raise InfeasibleError(
        f"No random architecture within {run.budget_macs:.0f} MACs after {MAX_RANDOM_TRIES} draws"
    )


def random_search(
    run: SearchRun,
    n_candidates: Optional[int] = None,
    epochs: Optional[int] = None,
    datasets: Optional[Datasets] = None,
) -> SearchResult:
    """Evaluate n random legal architectures and keep the best."""
    start = time.perf_counter()
    n_candidates = run.random_candidates if n_candidates is None else n_candidates
    epochs = run.step1_epochs if epochs is None else epochs
    if n_candidates < 1 or epochs < 1:
        raise ConfigError("random search needs at least one candidate and one epoch")
    rng = np.random.default_rng(run.seed)
    archs = [sample_architecture(run, rng) for _ in range(n_candidates)]
    backend = make_backend(run, datasets)
    scores = run_candidates(backend, archs, epochs, run.seed, run.threads, "random")
    artifacts = run.artifacts()
    if artifacts is not None:
        artifacts.write_jsonl(RANDOM_FILE, (row.to_dict() for row in scores))
    best = _select(scores, lambda row: _regularized_key(row, run))
    arch = archs[best]
    logger.info(f"Random search: best of {n_candidates} is candidate {best}: {arch}")
    return SearchResult(
        best_path=arch.path,
        best_arch=arch,
        scores=scores,
        cost=arch_cost(arch),
        backend=run.backend,
        seed=run.seed,
        score=scores[best].score,
        val_loss=scores[best].val_loss,
        epochs_used={"random": n_candidates * epochs, "total": n_candidates * epochs},
        wall_time=time.perf_counter() - start,
    )


def beta_sweep(
    run: SearchRun,
    path: StridePath,
    betas: Sequence[float] = (0.0, 0.3, 0.6, 0.9),
    datasets: Optional[Datasets] = None,
) -> List[Dict[str, Any]]:
    """Step 2 once per regularizer exponent on a fixed path."""
    if run.backend == NeuralBackend.name and datasets is None:
        datasets = build_datasets(run.space, run.data)
    rows = []
    for beta in betas:
        swept = replace(run, reg=RegularizerConfig(beta=beta, G=run.reg.G), output_dir=None)
        arch = step2_op_search(swept, path, datasets)
        cost = arch_cost(arch)
        rows.append(
            {
                "beta": beta,
                "arch": str(arch),
                "total_macs": cost.total_macs,
                "total_params": cost.total_params,
                "effective_depth": arch.effective_depth,
            }
        )
        logger.info(f"beta={beta}: {cost.total_macs} MACs ({arch})")
    return rows


@dataclass
class DecouplingReport:
    default_op_path: StridePath
    optimal_path: StridePath
    optimum: Architecture
    optimum_objective: float
    per_path: List[Dict[str, Any]]

    @property
    def agree(self) -> bool:
        return self.default_op_path == self.optimal_path

    def to_dict(self) -> Dict[str, Any]:
        return {
            "agree": self.agree,
            "default_op_path": str(self.default_op_path),
            "optimal_path": str(self.optimal_path),
            "optimum": str(self.optimum),
            "optimum_objective": self.optimum_objective,
            "per_path": self.per_path,
        }


def decoupling_check(run: SearchRun) -> DecouplingReport:
    """Compare the best path under the default op with the best path under per-path-optimal ops."""
    if run.backend != SurrogateBackend.name:
        raise ConfigError("The decoupling check brute-forces the surrogate backend only")
    default_path, step1_scores = step1_path_search(run, SurrogateBackend(run.surrogate))
    per_path = []
    best: Optional[Tuple[float, int, Architecture]] = None
    for i, path in enumerate(run.candidate_paths()):
        try:
            arch, _ = surrogate_op_search(run, path)
        except InfeasibleError:
            per_path.append({"path": str(path), "feasible": False})
            continue
        value = PathScorer(run, path).objective(
            [run.space.op_vocab.index(op) for op in arch.ops]
        )
        per_path.append(
            {
                "path": str(path),
                "feasible": True,
                "arch": str(arch),
                "objective": value,
                "default_op_score": step1_scores[i].score,
            }
        )
        if best is None or value < best[0]:
            best = (value, i, arch)
    if best is None:
        raise InfeasibleError("No candidate path has an architecture within the budget")
    value, _, optimum = best
    report = DecouplingReport(default_path, optimum.path, optimum, value, per_path)
    if not report.agree:
        logger.warning(
            f"Decoupling counterexample: default-op path {default_path} but the optimum "
            f"{optimum} lies on {optimum.path}"
        )
    return report
