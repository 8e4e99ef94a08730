import numpy as np
import pytest

from seqnas.cost import arch_cost
from seqnas.errors import ConfigError
from seqnas.space import MB3E1, Architecture, StridePath, reference_path, stage_strings
from seqnas.surrogate import (
    SurrogateSpec,
    affinity,
    fnv1a64,
    ideal_stage_string,
    layer_stages,
    path_penalty,
    splitmix64,
    surrogate_score,
    surrogate_train_curve,
)
from tests.test_space import random_arch


def test_splitmix64_vectors():
    assert splitmix64(0) == 0xE220A8397B1DCDAF
    assert splitmix64(1234567) == 6457827717110365317


def test_fnv1a64_vectors():
    assert fnv1a64("") == 0xCBF29CE484222325
    assert fnv1a64("a") == 0xAF63DC4C8601EC8C


def test_affinity_range_and_determinism():
    values = [affinity(7, layer, "mb3e3", stage) for layer in range(1, 16) for stage in range(6)]
    assert all(-1.0 <= v < 1.0 for v in values)
    assert values == [affinity(7, l, "mb3e3", s) for l in range(1, 16) for s in range(6)]
    assert affinity(7, 1, "mb3e3", 1) != affinity(8, 1, "mb3e3", 1)


def test_layer_stages():
    path = StridePath.from_stages("AB", (2, 4), 5)
    assert layer_stages(path) == [0, 1, 1, 2, 2]


def test_ideal_stage_string_and_penalty(large_space):
    ideal = ideal_stage_string(3, 2, 3)
    assert ideal in stage_strings(2, 3)
    path = StridePath.from_stages(ideal, (1, 4, 7, 10, 13), 15)
    assert path_penalty(path, 3, 2, 3) == 0.0
    flipped = "".join("B" if c == "A" else "A" for c in ideal[:2]) + ideal[2:]
    if flipped != ideal and sorted(flipped) == sorted(ideal):
        other = StridePath.from_stages(flipped, (1, 4, 7, 10, 13), 15)
        assert path_penalty(other, 3, 2, 3) == pytest.approx(2 / 5)


def test_constant_when_weights_are_zero(desk_space):
    spec = SurrogateSpec(seed=5, target_macs=1000, w_cost=0.0, w_path=0.0, affinity_scale=0.0)
    rng = np.random.default_rng(0)
    for _ in range(20):
        assert surrogate_score(random_arch(desk_space, rng), spec) == 0.9


def test_on_target_scores_base(desk_space):
    arch = Architecture.uniform(desk_space, reference_path(desk_space), MB3E1)
    macs = arch_cost(arch).total_macs
    spec = SurrogateSpec(seed=1, target_macs=macs, w_cost=0.5, w_path=0.0, affinity_scale=0.0)
    assert surrogate_score(arch, spec) == 0.9


def test_score_is_clamped(desk_space):
    arch = Architecture.uniform(desk_space, reference_path(desk_space), MB3E1)
    spec = SurrogateSpec(seed=1, target_macs=1, w_cost=1.0)
    assert surrogate_score(arch, spec) == 0.0


def test_deterministic_across_calls(desk_space):
    spec = SurrogateSpec(seed=11, target_macs=50_000)
    rng = np.random.default_rng(4)
    archs = [random_arch(desk_space, rng) for _ in range(200)]
    first = [surrogate_score(a, spec) for a in archs]
    second = [surrogate_score(a, SurrogateSpec(seed=11, target_macs=50_000)) for a in archs]
    assert first == second


class TestTrainCurve:
    def test_first_epoch_is_half(self, desk_space):
        arch = Architecture.uniform(desk_space, reference_path(desk_space), MB3E1)
        spec = SurrogateSpec(seed=0, target_macs=40_000)
        assert surrogate_train_curve(arch, spec, 1) == [surrogate_score(arch, spec) / 2]

    def test_converges(self, desk_space):
        arch = Architecture.uniform(desk_space, reference_path(desk_space), MB3E1)
        spec = SurrogateSpec(seed=0, target_macs=40_000)
        curve = surrogate_train_curve(arch, spec, 20)
        assert curve == sorted(curve)
        assert abs(curve[-1] - surrogate_score(arch, spec)) < 1e-6

    def test_ordering_preserved(self, desk_space):
        spec = SurrogateSpec(seed=2, target_macs=40_000)
        rng = np.random.default_rng(9)
        a, b = random_arch(desk_space, rng), random_arch(desk_space, rng)
        sa, sb = surrogate_score(a, spec), surrogate_score(b, spec)
        if sa != sb:
            ca = surrogate_train_curve(a, spec, 6)
            cb = surrogate_train_curve(b, spec, 6)
            assert all((x > y) == (sa > sb) for x, y in zip(ca, cb))

    def test_needs_an_epoch(self, desk_space):
        arch = Architecture.uniform(desk_space, reference_path(desk_space), MB3E1)
        with pytest.raises(ConfigError):
            surrogate_train_curve(arch, SurrogateSpec(), 0)


def test_invalid_spec():
    with pytest.raises(ConfigError):
        SurrogateSpec(target_macs=0)
    with pytest.raises(ConfigError):
        SurrogateSpec(w_cost=-1.0)
