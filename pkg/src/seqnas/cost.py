"""Analytic MAC and parameter accounting, and the FLOPS regularizer.

FLOPS here means multiply-accumulate count of the backbone convolutions.
Activations, residual additions and biases are not counted.
"""

import logging
import math
from dataclasses import dataclass
from typing import Any, Dict, Sequence, Tuple, Union

import numpy as np

from seqnas.errors import IllegalOperationError, RegularizerDomainError, ShapeError
from seqnas.space import (
    Architecture,
    OpFamily,
    OperationSpec,
    SpaceSpec,
    StridePath,
    is_legal,
    layer_io,
)

logger = logging.getLogger(__name__)

MIN_HARD_MACS = 2.0


@dataclass(frozen=True)
class LayerCost:
    macs: int
    params: int

    def to_dict(self) -> Dict[str, int]:
        return {"macs": self.macs, "params": self.params}


@dataclass(frozen=True)
class CostReport:
    per_layer: Tuple[LayerCost, ...]
    total_macs: int
    total_params: int

    def to_dict(self) -> Dict[str, Any]:
        return {
            "per_layer": [c.to_dict() for c in self.per_layer],
            "total_macs": self.total_macs,
            "total_params": self.total_params,
        }


@dataclass(frozen=True)
class RegularizerConfig:
    """Exponent ``beta`` and pivot ``G`` of the FLOPS regularizer."""

    beta: float = 0.6
    G: float = 450e6

    def __post_init__(self):
        if self.beta < 0:
            raise RegularizerDomainError(f"beta must be non-negative, got {self.beta}")
        if not self.G > 1:
            raise RegularizerDomainError(f"G must exceed 1, got {self.G}")


def op_cost(
    op: OperationSpec,
    in_ch: int,
    out_ch: int,
    out_h: int,
    out_w: int,
    stride: Tuple[int, int],
) -> LayerCost:
    """MACs and weights of one operation, given its output geometry."""
    if min(in_ch, out_ch, out_h, out_w) < 1:
        raise ShapeError(f"Dimensions must be positive: {in_ch}, {out_ch}, {out_h}x{out_w}")
    sh, sw = stride
    in_h, in_w = out_h * sh, out_w * sw
    out_px = out_h * out_w

    if op.family is OpFamily.SKIP:
        if stride != (1, 1) or in_ch != out_ch:
            raise IllegalOperationError(
                f"skip cannot change shape (stride {stride}, {in_ch}->{out_ch} channels)"
            )
        return LayerCost(0, 0)

    if op.family is OpFamily.RESIDUAL:
        macs = 9 * in_ch * out_ch * out_px
        params = 9 * in_ch * out_ch
        if stride != (1, 1) or in_ch != out_ch:
            macs += in_ch * out_ch * out_px
            params += in_ch * out_ch
        return LayerCost(macs, params)

    k, e = op.kernel, op.expansion
    mid = e * in_ch
    macs = k * k * mid * out_px + mid * out_ch * out_px
    params = k * k * mid + mid * out_ch
    if e > 1:
        macs += in_ch * mid * in_h * in_w
        params += in_ch * mid
    return LayerCost(macs, params)


def arch_cost(arch: Architecture) -> CostReport:
    """Per-layer and total cost of an architecture."""
    per_layer = []
    for step, op, (in_ch, out_ch, h, w, _) in zip(
        arch.path.steps, arch.ops, layer_io(arch.path, arch.space)
    ):
        per_layer.append(op_cost(op, in_ch, out_ch, h, w, step.stride))
    return CostReport(
        per_layer=tuple(per_layer),
        total_macs=sum(c.macs for c in per_layer),
        total_params=sum(c.params for c in per_layer),
    )


def flops_table(space: SpaceSpec, path: StridePath) -> np.ndarray:
    """L x C table of MACs per (layer, vocabulary entry); illegal entries hold 0."""
    io = layer_io(path, space)
    table = np.zeros((space.L, space.C), dtype=np.float64)
    for l, (step, (in_ch, out_ch, h, w, _)) in enumerate(zip(path.steps, io)):
        for j, op in enumerate(space.op_vocab):
            if is_legal(op, step, in_ch, out_ch):
                table[l, j] = op_cost(op, in_ch, out_ch, h, w, step.stride).macs
    return table


AlphaLike = Union[np.ndarray, Sequence[Sequence[float]], Any]


def _weights(alpha: AlphaLike) -> np.ndarray:
    # ArchParams carry logits; anything else is taken as probabilities.
    if hasattr(alpha, "weights"):
        return np.asarray(alpha.weights(), dtype=np.float64)
    return np.asarray(alpha, dtype=np.float64)


def expected_flops(alpha: AlphaLike, table: AlphaLike) -> float:
    """Sum over layers and choices of alpha times the choice's MACs."""
    w = _weights(alpha)
    t = np.asarray(table, dtype=np.float64)
    if w.shape != t.shape:
        raise ShapeError(f"alpha has shape {w.shape}, flops table has {t.shape}")
    if np.any(w < 0) or not np.allclose(w.sum(axis=1), 1.0, atol=1e-9):
        raise RegularizerDomainError("alpha rows must be probability vectors")
    return float(np.sum(w * t))


def regularizer_value(flops: float, cfg: RegularizerConfig) -> float:
    """(log F / log G) ** beta."""
    if cfg.beta == 0:
        return 1.0
    if not flops > 1:
        raise RegularizerDomainError(
            f"Expected FLOPS must exceed 1 for the log regularizer, got {flops}",
            suggestion="Include at least one non-skip choice with positive cost.",
        )
    return (math.log(flops) / math.log(cfg.G)) ** cfg.beta


def regularizer_grad(flops: float, cfg: RegularizerConfig) -> float:
    """Derivative of the regularizer with respect to expected FLOPS."""
    if cfg.beta == 0:
        return 0.0
    if not flops > 1:
        raise RegularizerDomainError(f"Expected FLOPS must exceed 1, got {flops}")
    ratio = math.log(flops) / math.log(cfg.G)
    return cfg.beta * ratio ** (cfg.beta - 1) / (flops * math.log(cfg.G))


def regularizer(alpha: AlphaLike, table: AlphaLike, cfg: RegularizerConfig) -> float:
    """The FLOPS regularizer r(alpha) = [log(expected FLOPS) / log G] ** beta."""
    return regularizer_value(expected_flops(alpha, table), cfg)


def hard_regularizer(macs: float, cfg: RegularizerConfig) -> float:
    """Regularizer of a discrete architecture; costs under two MACs count as two."""
    if macs < 0:
        raise RegularizerDomainError(f"MAC count must be non-negative, got {macs}")
    return regularizer_value(max(float(macs), MIN_HARD_MACS), cfg)


def uniform_cost(space: SpaceSpec, path: StridePath, op: OperationSpec) -> int:
    return arch_cost(Architecture.uniform(space, path, op)).total_macs
