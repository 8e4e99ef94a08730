"""Shared fixtures: spaces of several sizes and tiny generated datasets."""

import numpy as np
import pytest

from seqnas.data import gen_dataset, make_glyphs, split_dataset
from seqnas.kernel.params import ParamStore
from seqnas.space import MB3E1, MB3E3, MB5E1, SKIP, SpaceSpec


@pytest.fixture
def large_space() -> SpaceSpec:
    return SpaceSpec.large()


@pytest.fixture
def desk_space() -> SpaceSpec:
    return SpaceSpec.desk()


@pytest.fixture
def small_space() -> SpaceSpec:
    """L=5, a=2, b=3 with three ops: 10 paths x 3^5 = 2430 architectures."""
    return SpaceSpec.from_counts(5, 2, 3, op_vocab=(MB3E1, MB3E3, MB5E1))


@pytest.fixture
def tiny_space() -> SpaceSpec:
    """Three layers, one A and one B step, 4x2 input collapsed to 1x1."""
    return SpaceSpec.from_counts(3, 1, 1, op_vocab=(MB3E1, MB3E3, SKIP))


def make_dataset(space: SpaceSpec, n: int = 24, seed: int = 0, K: int = 4, noise: float = 0.05):
    glyphs = make_glyphs(K, 2**space.a, seed)
    return gen_dataset(space, glyphs, n, noise, seed)


@pytest.fixture
def tiny_datasets(tiny_space):
    return split_dataset(make_dataset(tiny_space, n=24), 0.25, seed=0)


def to_float64(store: ParamStore) -> ParamStore:
    """Same values in a float64 store, for finite-difference checks."""
    wide = ParamStore(dtype=np.float64)
    wide.update(store.copy_values())
    return wide
