"""Deterministic closed-form architecture scorer.

Stands in for trained validation accuracy so that search experiments can be
checked against exhaustive scans. Every random quantity comes from a
splitmix64 mixer keyed by the seed, so independent implementations agree
bit for bit.

Test vectors (splitmix64(x) is the first output of a generator seeded with x):
    splitmix64(0)       == 0xE220A8397B1DCDAF
    splitmix64(1234567) == 6457827717110365317
    fnv1a64("")         == 0xCBF29CE484222325
    fnv1a64("a")        == 0xAF63DC4C8601EC8C
"""

import logging
from dataclasses import asdict, dataclass
from typing import Dict, List, Tuple

from seqnas.cost import arch_cost
from seqnas.errors import ConfigError
from seqnas.space import Architecture, StridePath, stage_strings

logger = logging.getLogger(__name__)

MASK64 = (1 << 64) - 1
IDEAL_SALT = 0x5EED


def splitmix64(x: int) -> int:
    """One round of the splitmix64 finalizer."""
    z = (x + 0x9E3779B97F4A7C15) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def fnv1a64(text: str) -> int:
    h = 0xCBF29CE484222325
    for byte in text.encode("utf-8"):
        h ^= byte
        h = (h * 0x100000001B3) & MASK64
    return h


def unit_interval(h: int) -> float:
    """Top 53 bits of a 64-bit hash as a float in [0, 1)."""
    return (h >> 11) / float(1 << 53)


@dataclass(frozen=True)
class SurrogateSpec:
    seed: int = 0
    target_macs: int = 1
    w_cost: float = 0.1
    w_path: float = 0.2
    affinity_scale: float = 0.02

    def __post_init__(self):
        if self.target_macs < 1:
            raise ConfigError(f"surrogate.target_macs must be positive, got {self.target_macs}")
        if min(self.w_cost, self.w_path, self.affinity_scale) < 0:
            raise ConfigError("surrogate weights must be non-negative")

    def to_dict(self) -> Dict[str, float]:
        return asdict(self)


def affinity(seed: int, layer: int, code: str, stage: int) -> float:
    """Seeded affinity of an op at a layer and stage, uniform in [-1, 1)."""
    h = splitmix64(seed & MASK64)
    h = splitmix64(h ^ layer)
    h = splitmix64(h ^ fnv1a64(code))
    h = splitmix64(h ^ stage)
    return 2.0 * unit_interval(h) - 1.0


def layer_stages(path: StridePath) -> List[int]:
    """Stage index per layer: downsampling layers seen up to and including it."""
    stages, seen = [], 0
    for step in path.steps:
        if step.downsamples:
            seen += 1
        stages.append(seen)
    return stages


def ideal_stage_string(seed: int, a: int, b: int) -> str:
    candidates = stage_strings(a, b)
    return candidates[splitmix64((seed ^ IDEAL_SALT) & MASK64) % len(candidates)]


def path_penalty(path: StridePath, seed: int, a: int, b: int) -> float:
    """Normalized Hamming distance of the stage string to the seeded ideal."""
    if a + b == 0:
        return 0.0
    ideal = ideal_stage_string(seed, a, b)
    return sum(x != y for x, y in zip(path.stage_string, ideal)) / (a + b)


def score_terms(arch: Architecture, spec: SurrogateSpec) -> Tuple[int, float, float]:
    """(total MACs, path penalty, affinity sum) of an architecture."""
    macs = arch_cost(arch).total_macs
    pen = path_penalty(arch.path, spec.seed, arch.space.a, arch.space.b)
    aff = sum(
        affinity(spec.seed, layer, op.code, stage)
        for layer, (op, stage) in enumerate(zip(arch.ops, layer_stages(arch.path)), start=1)
    )
    return macs, pen, aff


def surrogate_score(arch: Architecture, spec: SurrogateSpec) -> float:
    """Closed-form quality in [0, 1]."""
    macs, pen, aff = score_terms(arch, spec)
    raw = (
        0.9
        - spec.w_cost * abs(macs - spec.target_macs) / spec.target_macs
        - spec.w_path * pen
        + spec.affinity_scale * aff
    )
    return min(1.0, max(0.0, raw))


def surrogate_train_curve(arch: Architecture, spec: SurrogateSpec, epochs: int) -> List[float]:
    """Per-epoch value score * (1 - 2^-t), converging geometrically to the score."""
    if epochs < 1:
        raise ConfigError(f"epochs must be at least 1, got {epochs}")
    score = surrogate_score(arch, spec)
    return [score * (1.0 - 2.0**-t) for t in range(1, epochs + 1)]
