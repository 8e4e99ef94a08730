"""Forward and backward passes of the operation blocks.

Parameter names are ``{prefix}.{part}``:

    MBConv:   expand (e*in, in, 1, 1) when e > 1, dw (e*in, 1, k, k),
              project (out, e*in, 1, 1)
    res3:     conv (out, in, 3, 3), proj (out, in, 1, 1) when the shape changes
    skip:     no parameters
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Mapping, Optional, Tuple

import numpy as np

from seqnas.errors import IllegalOperationError, ShapeError
from seqnas.kernel.ops import (
    check_tensor4,
    conv2d_backward,
    conv2d_forward,
    relu6_backward,
    relu6_forward,
    relu_backward,
    relu_forward,
)
from seqnas.space import RES3, OpFamily, OperationSpec

logger = logging.getLogger(__name__)

Params = Mapping[str, np.ndarray]


@dataclass
class BlockCache:
    op: OperationSpec
    prefix: str
    residual: bool
    steps: List[Tuple[str, Any]] = field(default_factory=list)


def op_param_shapes(
    op: OperationSpec, in_ch: int, out_ch: int, stride: Tuple[int, int]
) -> Dict[str, Tuple[int, ...]]:
    """Shapes of the parameters an op needs at a layer, keyed by part name."""
    if op.family is OpFamily.SKIP:
        if stride != (1, 1) or in_ch != out_ch:
            raise IllegalOperationError(f"skip cannot map {in_ch}->{out_ch} at stride {stride}")
        return {}
    if op.family is OpFamily.RESIDUAL:
        shapes = {"conv": (out_ch, in_ch, 3, 3)}
        if stride != (1, 1) or in_ch != out_ch:
            shapes["proj"] = (out_ch, in_ch, 1, 1)
        return shapes
    mid = op.expansion * in_ch
    shapes = {}
    if op.expansion > 1:
        shapes["expand"] = (mid, in_ch, 1, 1)
    shapes["dw"] = (mid, 1, op.kernel, op.kernel)
    shapes["project"] = (out_ch, mid, 1, 1)
    return shapes


def init_op_params(
    op: OperationSpec,
    in_ch: int,
    out_ch: int,
    stride: Tuple[int, int],
    prefix: str,
    rng: np.random.Generator,
) -> Dict[str, np.ndarray]:
    """Uniform(-sqrt(1/fan_in), sqrt(1/fan_in)) float32 weights."""
    params = {}
    for part, shape in op_param_shapes(op, in_ch, out_ch, stride).items():
        fan_in = int(np.prod(shape[1:]))
        bound = np.sqrt(1.0 / fan_in)
        params[f"{prefix}.{part}"] = rng.uniform(-bound, bound, size=shape).astype(np.float32)
    return params


def _param(params: Params, name: str) -> np.ndarray:
    try:
        return params[name]
    except KeyError:
        raise ShapeError(f"Missing parameter {name!r}") from None


def mbconv_forward(
    x: np.ndarray,
    op: OperationSpec,
    params: Params,
    prefix: str,
    stride: Tuple[int, int],
) -> Tuple[np.ndarray, BlockCache]:
    """Expand 1x1 (ReLU6), depthwise kxk strided (ReLU6), linear projection 1x1."""
    check_tensor4(x)
    in_ch = x.shape[1]
    project = _param(params, f"{prefix}.project")
    out_ch = project.shape[0]
    residual = stride == (1, 1) and in_ch == out_ch
    cache = BlockCache(op=op, prefix=prefix, residual=residual)

    h = x
    if op.expansion > 1:
        h, c = conv2d_forward(h, _param(params, f"{prefix}.expand"), padding=(0, 0))
        cache.steps.append(("expand", c))
        h, c = relu6_forward(h)
        cache.steps.append(("relu6", c))
    dw = _param(params, f"{prefix}.dw")
    h, c = conv2d_forward(h, dw, stride=stride, groups=dw.shape[0])
    cache.steps.append(("dw", c))
    h, c = relu6_forward(h)
    cache.steps.append(("relu6", c))
    h, c = conv2d_forward(h, project, padding=(0, 0))
    cache.steps.append(("project", c))
    if residual:
        h = h + x
    return h, cache


def mbconv_backward(dy: np.ndarray, cache: BlockCache) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
    grads: Dict[str, np.ndarray] = {}
    d = dy
    for part, c in reversed(cache.steps):
        if part == "relu6":
            d = relu6_backward(d, c)
        else:
            d, dw = conv2d_backward(d, c)
            grads[f"{cache.prefix}.{part}"] = dw
    if cache.residual:
        d = d + dy
    return d, grads


def residual_forward(
    x: np.ndarray,
    params: Params,
    prefix: str,
    stride: Tuple[int, int],
) -> Tuple[np.ndarray, BlockCache]:
    """ReLU(conv3x3 strided) plus an identity or 1x1 projected shortcut."""
    check_tensor4(x)
    conv = _param(params, f"{prefix}.conv")
    identity = stride == (1, 1) and x.shape[1] == conv.shape[0]
    cache = BlockCache(op=RES3, prefix=prefix, residual=identity)
    h, c = conv2d_forward(x, conv, stride=stride)
    cache.steps.append(("conv", c))
    h, c = relu_forward(h)
    cache.steps.append(("relu", c))
    if identity:
        return h + x, cache
    s, c = conv2d_forward(x, _param(params, f"{prefix}.proj"), stride=stride, padding=(0, 0))
    cache.steps.append(("proj", c))
    return h + s, cache


def residual_backward(
    dy: np.ndarray, cache: BlockCache
) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
    grads: Dict[str, np.ndarray] = {}
    steps = dict(cache.steps)
    if cache.residual:
        dx = dy
    else:
        dx, grads[f"{cache.prefix}.proj"] = conv2d_backward(dy, steps["proj"])
    d = relu_backward(dy, steps["relu"])
    d, grads[f"{cache.prefix}.conv"] = conv2d_backward(d, steps["conv"])
    return dx + d, grads


def op_forward(
    x: np.ndarray,
    op: OperationSpec,
    params: Params,
    prefix: str,
    stride: Tuple[int, int],
    out_ch: Optional[int] = None,
) -> Tuple[np.ndarray, BlockCache]:
    """Dispatch on the op family; ``out_ch`` is the layer's channel count, checked for skip."""
    if op.family is OpFamily.SKIP:
        in_ch = x.shape[1]
        op_param_shapes(op, in_ch, in_ch if out_ch is None else out_ch, stride)
        return x, BlockCache(op=op, prefix=prefix, residual=True)
    if op.family is OpFamily.RESIDUAL:
        return residual_forward(x, params, prefix, stride)
    return mbconv_forward(x, op, params, prefix, stride)


def op_backward(dy: np.ndarray, cache: BlockCache) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
    if cache.op.family is OpFamily.SKIP:
        return dy, {}
    if cache.op.family is OpFamily.RESIDUAL:
        return residual_backward(dy, cache)
    return mbconv_backward(dy, cache)
