"""Convolution, activation and loss kernels with explicit backward passes.

Every forward returns ``(output, cache)``; the matching backward takes the
upstream gradient and that cache. Reductions run in float64 and results are
cast back to the input dtype.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from seqnas.errors import DataFormatError, ShapeError

logger = logging.getLogger(__name__)

Tensor4 = np.ndarray


def check_tensor4(x: np.ndarray, name: str = "x") -> None:
    if x.ndim != 4:
        raise ShapeError(f"{name} must be (batch, channels, height, width), got shape {x.shape}")


@dataclass
class ConvCache:
    x_shape: Tuple[int, int, int, int]
    xp_shape: Tuple[int, int, int, int]
    windows: np.ndarray
    weight: np.ndarray
    stride: Tuple[int, int]
    padding: Tuple[int, int]
    groups: int
    x_dtype: np.dtype
    w_dtype: np.dtype


def conv2d_forward(
    x: Tensor4,
    weight: np.ndarray,
    stride: Tuple[int, int] = (1, 1),
    padding: Optional[Tuple[int, int]] = None,
    groups: int = 1,
) -> Tuple[np.ndarray, ConvCache]:
    """Cross-correlation of x (N, C, H, W) with weight (O, C/groups, kh, kw)."""
    check_tensor4(x)
    check_tensor4(weight, "weight")
    n, c, h, w = x.shape
    o, cg, kh, kw = weight.shape
    if groups < 1 or c % groups or o % groups:
        raise ShapeError(f"Channels {c} -> {o} not divisible by groups={groups}")
    if cg != c // groups:
        raise ShapeError(f"Weight expects {cg * groups} input channels, x has {c}")
    if padding is None:
        padding = ((kh - 1) // 2, (kw - 1) // 2)
    sh, sw = stride
    ph, pw = padding
    oh = (h + 2 * ph - kh) // sh + 1
    ow = (w + 2 * pw - kw) // sw + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"Kernel {kh}x{kw} does not fit input {h}x{w} with padding {padding}")

    xp = np.pad(x.astype(np.float64), ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw][:, :, :oh, :ow]
    windows = windows.reshape(n, groups, cg, oh, ow, kh, kw)
    w64 = weight.astype(np.float64).reshape(groups, o // groups, cg, kh, kw)

    y = np.einsum("ngchwij,gocij->ngohw", windows, w64, optimize=True)
    y = y.reshape(n, o, oh, ow).astype(x.dtype)
    cache = ConvCache(
        x_shape=x.shape,
        xp_shape=xp.shape,
        windows=windows,
        weight=w64,
        stride=(sh, sw),
        padding=(ph, pw),
        groups=groups,
        x_dtype=x.dtype,
        w_dtype=weight.dtype,
    )
    return y, cache


def conv2d_backward(dy: np.ndarray, cache: ConvCache) -> Tuple[np.ndarray, np.ndarray]:
    """Gradients with respect to the input and the weight."""
    n, c, h, w = cache.x_shape
    g = cache.groups
    _, og, cg, kh, kw = cache.weight.shape
    oh, ow = dy.shape[2], dy.shape[3]
    sh, sw = cache.stride
    ph, pw = cache.padding

    dy64 = dy.astype(np.float64).reshape(n, g, og, oh, ow)
    dw = np.einsum("ngchwij,ngohw->gocij", cache.windows, dy64, optimize=True)
    dwin = np.einsum("gocij,ngohw->ngchwij", cache.weight, dy64, optimize=True)
    dwin = dwin.reshape(n, c, oh, ow, kh, kw)

    dxp = np.zeros(cache.xp_shape, dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + sh * (oh - 1) + 1:sh, j:j + sw * (ow - 1) + 1:sw] += dwin[..., i, j]
    dx = dxp[:, :, ph:ph + h, pw:pw + w]
    return dx.astype(cache.x_dtype), dw.reshape(g * og, cg, kh, kw).astype(cache.w_dtype)


def relu6_forward(x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    return np.clip(x, 0, 6), x


def relu6_backward(dy: np.ndarray, x: np.ndarray) -> np.ndarray:
    return dy * ((x > 0) & (x < 6))


def relu_forward(x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    return np.maximum(x, 0), x


def relu_backward(dy: np.ndarray, x: np.ndarray) -> np.ndarray:
    return dy * (x > 0)


def frame_softmax_ce(logits: np.ndarray, labels: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean per-frame cross-entropy of (N, K, 1, F) logits against (N, F) labels."""
    check_tensor4(logits, "logits")
    n, k, one, f = logits.shape
    if one != 1:
        raise ShapeError(f"Logits height must be 1, got {one}")
    labels = np.asarray(labels)
    if labels.shape != (n, f):
        raise ShapeError(f"Labels must have shape {(n, f)}, got {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise DataFormatError(
            f"Labels must lie in [0, {k}), got range {labels.min()}..{labels.max()}"
        )

    z = logits[:, :, 0, :].astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1, keepdims=True))
    log_p = z - log_norm
    picked = np.take_along_axis(log_p, labels[:, None, :].astype(np.int64), axis=1)
    loss = float(-picked.mean())

    grad = np.exp(log_p)
    np.put_along_axis(
        grad,
        labels[:, None, :].astype(np.int64),
        np.take_along_axis(grad, labels[:, None, :].astype(np.int64), axis=1) - 1.0,
        axis=1,
    )
    grad /= n * f
    return loss, grad[:, :, None, :].astype(logits.dtype)


def frame_predictions(logits: np.ndarray) -> np.ndarray:
    """Argmax class per frame, shape (N, F)."""
    return logits[:, :, 0, :].argmax(axis=1)
