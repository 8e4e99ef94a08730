import itertools
import json

import numpy as np
import pytest

from seqnas.cost import RegularizerConfig, arch_cost
from seqnas.data import DataSettings
from seqnas.errors import (
    EXIT_DIVERGENCE,
    CandidateFailure,
    ConfigError,
    DivergenceError,
    ErrorCode,
    InfeasibleError,
)
from seqnas.neural.network import TrainSettings
from seqnas.persistence import STEP1_FILE, STEP2_FILE
from seqnas.search.backends import (
    CandidateScore,
    SurrogateBackend,
    evaluate_candidates,
    get_backend_class,
    run_candidates,
)
from seqnas.search.engine import (
    PathScorer,
    SearchRun,
    beta_sweep,
    decoupling_check,
    default_budget,
    random_search,
    sample_architecture,
    step1_path_search,
    step1_paths,
    surrogate_op_search,
    two_step_search,
)
from seqnas.space import (
    MB3E1,
    MB3E3,
    MB5E1,
    RES3,
    SKIP,
    Architecture,
    SpaceSpec,
    enumerate_paths,
    reference_path,
)
from seqnas.surrogate import SurrogateSpec, ideal_stage_string, surrogate_score

PATH_DOMINATED = dict(target_macs=10**12, w_cost=0.02, w_path=0.5, affinity_scale=0.01)


def surrogate_run(space, seed=0, beta=0.0, **kwargs) -> SearchRun:
    """Surrogate run where the path term outweighs every other term of the score."""
    return SearchRun(
        space=space,
        seed=seed,
        reg=RegularizerConfig(beta=beta),
        budget_macs=10**12,
        surrogate=SurrogateSpec(seed=seed, **PATH_DOMINATED),
        **kwargs,
    )


def all_scores(run: SearchRun):
    """Surrogate score of every architecture in the space, by brute force."""
    scores = {}
    for path in enumerate_paths(run.space):
        scorer = PathScorer(run, path)
        for assign in itertools.product(*scorer.choices):
            scores[str(scorer.architecture(assign))] = scorer.score(assign)
    return scores


class FlakyBackend:
    """Fails the candidates it is told to fail."""

    name = "flaky"

    def __init__(self, failing, error=None):
        self.failing = set(failing)
        self.error = error or DivergenceError("loss is nan", epoch=2)

    def evaluate(self, arch, epochs, seed, candidate_id, stage):
        if candidate_id in self.failing:
            raise self.error
        return CandidateScore(candidate_id, stage, str(arch), str(arch.path), epochs, 0.5, 0, 0)


class TestPaths:
    def test_typical_paths_of_the_large_space(self, large_space):
        paths = step1_paths(large_space)
        assert len(paths) == 10
        assert all(p.ds_positions == (1, 4, 7, 10, 13) for p in paths)

    def test_all_paths(self, desk_space):
        assert step1_paths(desk_space, "all") == enumerate_paths(desk_space)

    def test_unknown_mode(self, desk_space):
        with pytest.raises(ConfigError):
            step1_paths(desk_space, "some")

    def test_default_budget(self, desk_space):
        paths = step1_paths(desk_space)
        run = SearchRun(space=desk_space)
        assert run.budget_macs == default_budget(desk_space, paths)


class TestSearchRun:
    def test_unknown_backend(self, desk_space):
        with pytest.raises(ConfigError):
            SearchRun(space=desk_space, backend="oracle")

    def test_epochs_must_be_positive(self, desk_space):
        with pytest.raises(ConfigError):
            SearchRun(space=desk_space, step1_epochs=0)

    def test_budget_must_be_positive(self, desk_space):
        with pytest.raises(ConfigError):
            SearchRun(space=desk_space, budget_macs=0)

    def test_regularizer_pivot_follows_the_budget(self, desk_space):
        run = SearchRun(space=desk_space)
        assert run.reg.G == float(run.budget_macs)
        assert run.reg.beta == RegularizerConfig().beta
        assert SearchRun(space=desk_space, budget_macs=50_000).reg.G == 50_000.0
        assert SearchRun(space=desk_space, budget_macs=1).reg.G == 2.0

    def test_explicit_regularizer_is_kept(self, desk_space):
        reg = RegularizerConfig(beta=0.3, G=1e6)
        assert SearchRun(space=desk_space, reg=reg).reg is reg

    def test_backend_registry(self):
        assert get_backend_class("surrogate") is SurrogateBackend
        with pytest.raises(ConfigError):
            get_backend_class("oracle")


class TestStep1:
    def test_ranks_every_typical_path(self, large_space):
        run = SearchRun(
            space=large_space,
            seed=4,
            budget_macs=10**12,
            surrogate=SurrogateSpec(seed=4, **{**PATH_DOMINATED, "affinity_scale": 0.0}),
        )
        best, scores = step1_path_search(run)
        assert [row.candidate_id for row in scores] == list(range(10))
        assert all(row.epochs == run.step1_epochs for row in scores)
        assert all(row.arch.endswith(",".join([RES3.code] * 15)) for row in scores)
        assert best.stage_string == ideal_stage_string(4, 2, 3)

    def test_ties_go_to_the_first_candidate(self, small_space):
        run = SearchRun(
            space=small_space,
            budget_macs=10**12,
            surrogate=SurrogateSpec(target_macs=1, w_cost=1.0),
        )
        best, scores = step1_path_search(run)
        assert all(row.score == 0.0 for row in scores)
        assert best == run.candidate_paths()[0]


class TestSurrogateOpSearch:
    def test_exhaustive_matches_brute_force(self, small_space):
        run = surrogate_run(small_space, beta=0.6)
        path = enumerate_paths(small_space)[3]
        arch, history = surrogate_op_search(run, path)
        scorer = PathScorer(run, path)
        best = min(scorer.objective(a) for a in itertools.product(*scorer.choices))
        index = [small_space.op_vocab.index(op) for op in arch.ops]
        assert scorer.objective(index) == best
        assert history[-1]["method"] == "exhaustive"
        assert history[-1]["objective"] == best

    def test_coordinate_ascent_ends_at_a_local_optimum(self, small_space):
        run = surrogate_run(small_space, beta=0.6, exhaustive_limit=0, restarts=4)
        path = enumerate_paths(small_space)[0]
        arch, history = surrogate_op_search(run, path)
        assert len(history) == 4
        assert all(row["method"] == "coordinate_ascent" for row in history)
        scorer = PathScorer(run, path)
        assign = [small_space.op_vocab.index(op) for op in arch.ops]
        value = scorer.objective(assign)
        assert value == min(row["objective"] for row in history)
        for l, options in enumerate(scorer.choices):
            for j in options:
                assert scorer.objective(assign[:l] + [j] + assign[l + 1:]) >= value
        for l1, l2 in itertools.combinations(range(len(assign)), 2):
            for j1, j2 in itertools.product(scorer.choices[l1], scorer.choices[l2]):
                pair = list(assign)
                pair[l1], pair[l2] = j1, j2
                assert scorer.objective(pair) >= value

    @pytest.mark.parametrize("seed", range(5))
    def test_coordinate_ascent_is_exact_on_two_layers(self, seed):
        space = SpaceSpec.from_counts(2, 1, 1)
        run = surrogate_run(space, seed=seed, beta=0.6, exhaustive_limit=0, restarts=2)
        for path in enumerate_paths(space):
            arch, _ = surrogate_op_search(run, path)
            scorer = PathScorer(run, path)
            best = min(scorer.objective(a) for a in itertools.product(*scorer.choices))
            assert scorer.objective([space.op_vocab.index(op) for op in arch.ops]) == best

    @pytest.mark.parametrize(
        "space",
        [
            SpaceSpec.from_counts(5, 2, 3, op_vocab=(MB3E1, MB3E3, MB5E1)),
            SpaceSpec.from_counts(5, 2, 3, op_vocab=(MB3E1, MB5E1)),
            SpaceSpec.from_counts(6, 1, 2, op_vocab=(MB3E1, MB3E3, SKIP)),
        ],
        ids=["five-layers-three-ops", "five-layers-two-ops", "six-layers-with-skip"],
    )
    def test_coordinate_ascent_usually_matches_brute_force(self, space):
        hits = trials = 0
        for seed in range(20):
            run = surrogate_run(space, seed=seed, beta=0.6, exhaustive_limit=0, restarts=8)
            for path in enumerate_paths(space)[:3]:
                arch, _ = surrogate_op_search(run, path)
                scorer = PathScorer(run, path)
                best = min(scorer.objective(a) for a in itertools.product(*scorer.choices))
                found = scorer.objective([space.op_vocab.index(op) for op in arch.ops])
                assert found >= best
                hits += found == best
                trials += 1
        assert hits >= 0.9 * trials

    def test_score_agrees_with_surrogate(self, small_space):
        run = surrogate_run(small_space, seed=3)
        rng = np.random.default_rng(0)
        for path in enumerate_paths(small_space):
            scorer = PathScorer(run, path)
            assign = [int(rng.choice(c)) for c in scorer.choices]
            arch = scorer.architecture(assign)
            assert scorer.score(assign) == surrogate_score(arch, run.surrogate)
            assert scorer.macs(assign) == arch_cost(arch).total_macs

    def test_nothing_fits_the_budget(self, small_space):
        run = SearchRun(space=small_space, budget_macs=1)
        with pytest.raises(InfeasibleError) as exc:
            surrogate_op_search(run, enumerate_paths(small_space)[0])
        assert exc.value.exit_code == 3


class TestTwoStep:
    @pytest.mark.parametrize("seed", range(20))
    def test_finds_the_global_optimum(self, small_space, seed):
        run = surrogate_run(small_space, seed=seed)
        result = two_step_search(run)
        scores = all_scores(run)
        found = surrogate_score(result.best_arch, run.surrogate)
        ranked = sorted(scores.values(), reverse=True)
        assert found == pytest.approx(ranked[0], abs=1e-12)
        assert ranked.index(found) < 0.02 * len(ranked)
        assert len(scores) == 2430

    def test_beats_random_search(self, small_space):
        wins = 0
        for trial in range(10):
            run = surrogate_run(small_space, seed=100 + trial, random_candidates=10)
            two_step = surrogate_score(two_step_search(run).best_arch, run.surrogate)
            baseline = surrogate_score(random_search(run).best_arch, run.surrogate)
            assert two_step >= baseline - 1e-12
            wins += two_step > baseline
        assert wins >= 9

    def test_result_fields(self, small_space):
        run = surrogate_run(small_space, seed=1)
        result = two_step_search(run)
        assert result.best_arch.path == result.best_path
        assert result.cost.total_macs <= run.budget_macs
        assert result.epochs_used == {"step1": 10 * run.step1_epochs, "step2": 0, "total": 50}
        assert result.scores[-1].stage == "final"
        assert result.scores[-1].candidate_id == 10
        assert set(result.to_dict()) >= {"best_arch", "cost", "effective_depth", "scores"}

    def test_repeatable(self, small_space, tmp_path):
        first = two_step_search(surrogate_run(small_space, seed=2, output_dir=tmp_path / "a"))
        second = two_step_search(surrogate_run(small_space, seed=2, output_dir=tmp_path / "b"))
        assert json.dumps(first.to_dict()) == json.dumps(second.to_dict())
        for name in (STEP1_FILE, STEP2_FILE):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_given_path_skips_step1(self, small_space):
        run = surrogate_run(small_space)
        path = enumerate_paths(small_space)[5]
        result = two_step_search(run, path=path)
        assert result.best_path == path
        assert result.epochs_used["step1"] == 0
        assert len(result.scores) == 1

    def test_neural_backend_end_to_end(self, tiny_space, tiny_datasets, tmp_path):
        run = SearchRun(
            space=tiny_space,
            backend="neural",
            step1_epochs=1,
            step2_warmup_epochs=1,
            step2_epochs=1,
            train=TrainSettings(batch=6),
            data=DataSettings(K=4),
            output_dir=tmp_path,
        )
        result = two_step_search(run, datasets=tiny_datasets)
        assert len(result.scores) == len(run.candidate_paths()) + 1
        assert result.val_loss is not None and np.isfinite(result.val_loss)
        assert result.epochs_used["step2"] == 2
        assert result.cost.total_macs <= run.budget_macs
        assert (tmp_path / "checkpoints" / "alpha.json").exists()
        assert (tmp_path / "checkpoints" / "supernet.bin").exists()

    def test_neural_backend_is_repeatable_across_threads(
        self, tiny_space, tiny_datasets, tmp_path
    ):
        results = []
        for name in ("a", "b"):
            run = SearchRun(
                space=tiny_space,
                backend="neural",
                seed=3,
                threads=2,
                step1_epochs=1,
                step2_warmup_epochs=1,
                step2_epochs=1,
                train=TrainSettings(batch=6),
                data=DataSettings(K=4),
                output_dir=tmp_path / name,
            )
            results.append(two_step_search(run, datasets=tiny_datasets))
        assert json.dumps(results[0].to_dict()) == json.dumps(results[1].to_dict())
        for name in (STEP1_FILE, STEP2_FILE):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


class TestRandomSearch:
    def test_candidates_fit_the_budget(self, desk_space):
        run = SearchRun(space=desk_space)
        rng = np.random.default_rng(0)
        for _ in range(20):
            assert arch_cost(sample_architecture(run, rng)).total_macs <= run.budget_macs

    def test_infeasible_budget(self, desk_space):
        run = SearchRun(space=desk_space, budget_macs=1)
        with pytest.raises(InfeasibleError):
            sample_architecture(run, np.random.default_rng(0))

    def test_needs_a_candidate(self, small_space):
        with pytest.raises(ConfigError):
            random_search(surrogate_run(small_space), n_candidates=0)

    def test_reports_every_candidate(self, small_space):
        result = random_search(surrogate_run(small_space, seed=5), n_candidates=7, epochs=2)
        assert [row.candidate_id for row in result.scores] == list(range(7))
        assert result.epochs_used["total"] == 14
        assert result.score == max(row.score for row in result.scores)


class TestDispatch:
    @pytest.mark.asyncio
    async def test_outcomes_keep_candidate_order(self, small_space):
        archs = [Architecture.uniform(small_space, p, MB3E1) for p in enumerate_paths(small_space)]
        backend = SurrogateBackend(SurrogateSpec(**PATH_DOMINATED))
        outcomes = await evaluate_candidates(backend, archs, 3, seed=0, threads=4)
        assert all(o.success for o in outcomes)
        assert [o.result.candidate_id for o in outcomes] == list(range(len(archs)))
        assert [o.metadata["arch"] for o in outcomes] == [str(a) for a in archs]

    @pytest.mark.asyncio
    async def test_failures_become_outcomes(self, small_space):
        archs = [Architecture.uniform(small_space, p, MB3E1) for p in enumerate_paths(small_space)]
        outcomes = await evaluate_candidates(FlakyBackend({1}), archs[:3], 1, seed=0)
        assert [o.success for o in outcomes] == [True, False, True]
        assert outcomes[1].error.code == ErrorCode.DIVERGENCE

    @pytest.mark.asyncio
    async def test_unexpected_errors_are_unknown(self, small_space):
        archs = [Architecture.uniform(small_space, enumerate_paths(small_space)[0], MB3E1)]
        outcomes = await evaluate_candidates(FlakyBackend({0}, RuntimeError("boom")), archs, 1, 0)
        assert outcomes[0].error.code == ErrorCode.UNKNOWN

    def test_threads_do_not_change_results(self, small_space):
        archs = [Architecture.uniform(small_space, p, MB3E1) for p in enumerate_paths(small_space)]
        backend = SurrogateBackend(SurrogateSpec(**PATH_DOMINATED))
        serial = run_candidates(backend, archs, 2, seed=0, threads=1)
        parallel = run_candidates(backend, archs, 2, seed=0, threads=4)
        assert [r.to_dict() for r in serial] == [r.to_dict() for r in parallel]

    def test_lowest_failing_candidate_aborts(self, small_space):
        archs = [Architecture.uniform(small_space, p, MB3E1) for p in enumerate_paths(small_space)]
        with pytest.raises(CandidateFailure) as exc:
            run_candidates(FlakyBackend({4, 2}), archs, 1, seed=0, threads=3)
        assert exc.value.candidate_id == 2
        assert exc.value.exit_code == EXIT_DIVERGENCE


class TestExperiments:
    def test_beta_sweep_is_monotone(self, small_space):
        run = surrogate_run(small_space)
        rows = beta_sweep(run, enumerate_paths(small_space)[2], betas=(0.0, 0.3, 0.6, 0.9, 2.0))
        assert [row["beta"] for row in rows] == [0.0, 0.3, 0.6, 0.9, 2.0]
        macs = [row["total_macs"] for row in rows]
        assert all(later <= earlier for earlier, later in zip(macs, macs[1:]))

    def test_decoupling_agrees_when_the_path_term_dominates(self, small_space):
        report = decoupling_check(surrogate_run(small_space, seed=6))
        assert report.agree
        assert len(report.per_path) == 10
        assert all(row["feasible"] for row in report.per_path)
        assert report.optimum.path == report.optimal_path
        data = report.to_dict()
        assert data["agree"] is True and data["optimal_path"] == str(report.default_op_path)

    def test_decoupling_needs_the_surrogate(self, tiny_space):
        with pytest.raises(ConfigError):
            decoupling_check(SearchRun(space=tiny_space, backend="neural"))


@pytest.mark.slow
def test_neural_beta_sweep_trades_accuracy_for_macs(desk_space):
    run = SearchRun(
        space=desk_space,
        backend="neural",
        data=DataSettings(n=400),
        step2_warmup_epochs=1,
        step2_epochs=2,
        seed=0,
    )
    rows = beta_sweep(run, reference_path(desk_space), betas=(0.0, 0.3, 0.6, 0.9))
    macs = [row["total_macs"] for row in rows]
    assert all(later <= earlier for earlier, later in zip(macs, macs[1:]))
    assert macs[-1] < macs[0]
