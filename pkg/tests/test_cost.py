import math

import numpy as np
import pytest

from seqnas.cost import (
    RegularizerConfig,
    arch_cost,
    expected_flops,
    flops_table,
    hard_regularizer,
    op_cost,
    regularizer,
    regularizer_grad,
    regularizer_value,
    uniform_cost,
)
from seqnas.errors import IllegalOperationError, RegularizerDomainError, ShapeError
from seqnas.space import (
    MB3E1,
    MB3E6,
    MB5E6,
    RES3,
    SKIP,
    Architecture,
    OpFamily,
    SpaceSpec,
    StridePath,
    enumerate_paths,
    layer_io,
    legal_mask,
    reference_path,
)
from tests.test_space import random_arch


def oracle_cost(arch: Architecture):
    """Count multiply-accumulates conv by conv, written out per op family."""
    macs = params = 0
    for step, op, (in_ch, out_ch, h, w, _) in zip(
        arch.path.steps, arch.ops, layer_io(arch.path, arch.space)
    ):
        sh, sw = step.stride
        out_px, in_px = h * w, (h * sh) * (w * sw)
        convs = []  # (weights, output pixels)
        if op.family is OpFamily.RESIDUAL:
            convs.append((out_ch * in_ch * 3 * 3, out_px))
            if step.stride != (1, 1) or in_ch != out_ch:
                convs.append((out_ch * in_ch, out_px))
        elif op.family is OpFamily.MBCONV:
            mid = op.expansion * in_ch
            if op.expansion > 1:
                convs.append((mid * in_ch, in_px))
            convs.append((mid * op.kernel * op.kernel, out_px))
            convs.append((out_ch * mid, out_px))
        for weights, pixels in convs:
            macs += weights * pixels
            params += weights
    return macs, params


class TestOpCost:
    def test_skip_is_free(self):
        cost = op_cost(SKIP, 8, 8, 16, 16, (1, 1))
        assert (cost.macs, cost.params) == (0, 0)

    def test_skip_cannot_change_shape(self):
        with pytest.raises(IllegalOperationError):
            op_cost(SKIP, 8, 16, 16, 16, (1, 1))
        with pytest.raises(IllegalOperationError):
            op_cost(SKIP, 8, 8, 8, 8, (2, 2))

    def test_mbconv_without_expansion(self):
        cost = op_cost(MB3E1, 8, 8, 16, 16, (1, 1))
        assert cost.macs == 9 * 8 * 256 + 8 * 8 * 256 == 34816
        assert cost.params == 9 * 8 + 8 * 8

    def test_mbconv_with_expansion_and_stride(self):
        cost = op_cost(MB5E6, 8, 16, 8, 8, (2, 2))
        assert cost.macs == 8 * 48 * 256 + 25 * 48 * 64 + 48 * 16 * 64 == 224256
        assert cost.params == 8 * 48 + 25 * 48 + 48 * 16

    def test_residual(self):
        same = op_cost(RES3, 8, 8, 4, 4, (1, 1))
        assert same.macs == 9 * 8 * 8 * 16
        changed = op_cost(RES3, 8, 16, 4, 4, (2, 1))
        assert changed.macs == 9 * 8 * 16 * 16 + 8 * 16 * 16
        assert changed.params == 9 * 8 * 16 + 8 * 16

    def test_non_positive_dimensions(self):
        with pytest.raises(ShapeError):
            op_cost(MB3E1, 0, 8, 4, 4, (1, 1))


class TestArchCost:
    def test_all_skip_on_flat_path(self):
        space = SpaceSpec.from_counts(3, 0, 0, op_vocab=(SKIP,))
        path = enumerate_paths(space)[0]
        assert arch_cost(Architecture.uniform(space, path, SKIP)).total_macs == 0

    def test_matches_counting_oracle(self, desk_space):
        rng = np.random.default_rng(1)
        for _ in range(100):
            arch = random_arch(desk_space, rng)
            report = arch_cost(arch)
            assert (report.total_macs, report.total_params) == oracle_cost(arch)
            assert report.total_macs == sum(c.macs for c in report.per_layer)
            assert report.total_params == sum(c.params for c in report.per_layer)

    def test_residual_default_matches_counting_oracle(self, desk_space):
        for path in enumerate_paths(desk_space.typical()):
            arch = Architecture.uniform(desk_space, path, RES3)
            report = arch_cost(arch)
            assert (report.total_macs, report.total_params) == oracle_cost(arch)

    def test_larger_expansion_costs_more(self, desk_space):
        path = reference_path(desk_space)
        base = Architecture.uniform(desk_space, path, MB3E1)
        for layer in range(desk_space.L):
            ops = list(base.ops)
            ops[layer] = MB3E6
            bigger = Architecture(desk_space, path, tuple(ops))
            assert arch_cost(bigger).total_macs > arch_cost(base).total_macs

    def test_largest_choice_is_most_expensive(self, large_space):
        path = StridePath.from_stages("ABABB", (1, 4, 7, 10, 13), large_space.L)
        largest = Architecture.uniform(large_space, path, MB5E6)
        top = arch_cost(largest).total_macs
        mask = legal_mask(large_space, path)
        table = flops_table(large_space, path)
        big = large_space.op_vocab.index(MB5E6)
        for l in range(large_space.L):
            for j, op in enumerate(large_space.op_vocab):
                if mask[l][j] and table[l, j] < table[l, big]:
                    ops = list(largest.ops)
                    ops[l] = op
                    cheaper = Architecture(large_space, path, tuple(ops))
                    assert arch_cost(cheaper).total_macs < top

    def test_to_dict_schema(self, desk_space):
        report = arch_cost(Architecture.uniform(desk_space, reference_path(desk_space), MB3E1))
        data = report.to_dict()
        assert set(data) == {"per_layer", "total_macs", "total_params"}
        assert set(data["per_layer"][0]) == {"macs", "params"}

    def test_flops_table_matches_arch_cost(self, desk_space):
        path = reference_path(desk_space)
        table = flops_table(desk_space, path)
        j = desk_space.op_vocab.index(MB3E1)
        assert table[:, j].sum() == uniform_cost(desk_space, path, MB3E1)
        skip = desk_space.op_vocab.index(SKIP)
        assert table[0, skip] == 0


class TestExpectedFlops:
    def test_linear_combination(self):
        assert expected_flops([[0.25, 0.75]], [[100, 200]]) == pytest.approx(175.0)

    def test_one_hot(self):
        table = np.array([[10.0, 20.0], [30.0, 40.0]])
        assert expected_flops([[0, 1], [1, 0]], table) == 50.0

    def test_uniform(self):
        table = np.array([[10.0, 20.0, 30.0], [1.0, 2.0, 3.0]])
        assert expected_flops(np.full((2, 3), 1 / 3), table) == pytest.approx(20.0 + 2.0)

    def test_linearity(self):
        rng = np.random.default_rng(0)
        table = rng.uniform(1e3, 1e6, size=(5, 4))
        a = rng.dirichlet(np.ones(4), size=5)
        b = rng.dirichlet(np.ones(4), size=5)
        lam = 0.3
        mixed = expected_flops(lam * a + (1 - lam) * b, table)
        parts = lam * expected_flops(a, table) + (1 - lam) * expected_flops(b, table)
        assert mixed == pytest.approx(parts, rel=1e-9)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            expected_flops([[0.5, 0.5]], [[1.0, 2.0, 3.0]])

    def test_rows_must_be_distributions(self):
        with pytest.raises(RegularizerDomainError):
            expected_flops([[0.5, 0.6]], [[1.0, 2.0]])


class TestRegularizer:
    def test_beta_zero_is_one(self):
        cfg = RegularizerConfig(beta=0.0, G=1e6)
        assert regularizer([[0.5, 0.5]], [[10.0, 1e9]], cfg) == 1.0
        assert regularizer_grad(123.0, cfg) == 0.0

    def test_pivot_is_one(self):
        for beta in (0.3, 0.6, 0.9, 2.0):
            cfg = RegularizerConfig(beta=beta, G=4e5)
            assert regularizer([[0.5, 0.5]], [[3e5, 5e5]], cfg) == pytest.approx(1.0, abs=1e-9)

    def test_strictly_increasing(self):
        rng = np.random.default_rng(2)
        cfg = RegularizerConfig(beta=0.6, G=1e6)
        table = rng.uniform(1e3, 1e7, size=(4, 3))
        pairs = []
        for _ in range(1000):
            alpha = rng.dirichlet(np.ones(3), size=4)
            pairs.append((expected_flops(alpha, table), regularizer(alpha, table, cfg)))
        pairs.sort()
        for (f0, r0), (f1, r1) in zip(pairs, pairs[1:]):
            if f1 > f0:
                assert r1 > r0

    def test_domain(self):
        cfg = RegularizerConfig(beta=0.6, G=1e6)
        with pytest.raises(RegularizerDomainError):
            regularizer([[1.0, 0.0]], [[0.0, 5.0]], cfg)

    def test_invalid_config(self):
        with pytest.raises(RegularizerDomainError):
            RegularizerConfig(beta=-0.1)
        with pytest.raises(RegularizerDomainError):
            RegularizerConfig(G=1.0)

    def test_gradient_matches_finite_difference(self):
        cfg = RegularizerConfig(beta=0.6, G=1e6)
        f, h = 2.5e5, 1.0
        numeric = (regularizer_value(f + h, cfg) - regularizer_value(f - h, cfg)) / (2 * h)
        assert regularizer_grad(f, cfg) == pytest.approx(numeric, rel=1e-5)

    def test_one_hot_matches_hard_cost(self, desk_space):
        cfg = RegularizerConfig(beta=0.6, G=1e6)
        path = reference_path(desk_space)
        table = flops_table(desk_space, path)
        j = desk_space.op_vocab.index(MB3E6)
        alpha = np.zeros(table.shape)
        alpha[:, j] = 1.0
        macs = uniform_cost(desk_space, path, MB3E6)
        assert regularizer(alpha, table, cfg) == pytest.approx(
            hard_regularizer(macs, cfg), rel=1e-12
        )
        assert hard_regularizer(macs, cfg) == pytest.approx(
            (math.log(macs) / math.log(1e6)) ** 0.6
        )

    def test_hard_regularizer_limits(self):
        cfg = RegularizerConfig(beta=0.6, G=1e6)
        floor = (math.log(2.0) / math.log(1e6)) ** 0.6
        assert hard_regularizer(0, cfg) == pytest.approx(floor)
        assert hard_regularizer(1, cfg) == hard_regularizer(2, cfg) > 0.0
        assert hard_regularizer(0, RegularizerConfig(beta=0.0, G=1e6)) == 1.0
        with pytest.raises(RegularizerDomainError):
            hard_regularizer(-5, cfg)

    def test_beta_zero_still_validates_inputs(self):
        cfg = RegularizerConfig(beta=0.0, G=1e6)
        with pytest.raises(ShapeError):
            regularizer([[0.5, 0.5]], [[1.0, 2.0, 3.0]], cfg)
        with pytest.raises(RegularizerDomainError):
            regularizer([[0.9, 0.9]], [[1.0, 2.0]], cfg)
