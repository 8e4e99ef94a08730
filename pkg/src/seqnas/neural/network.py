"""Fixed-architecture networks, training loop and evaluation."""

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Dict, Iterator, List, Optional, Tuple

import numpy as np

from seqnas.data import SeqDataset, split_dataset
from seqnas.errors import ConfigError, DivergenceError, ShapeError
from seqnas.kernel.blocks import BlockCache, init_op_params, op_backward, op_forward
from seqnas.kernel.ops import (
    ConvCache,
    conv2d_backward,
    conv2d_forward,
    frame_predictions,
    frame_softmax_ce,
)
from seqnas.kernel.params import ADADELTA_EPS, ADADELTA_RHO, ParamStore
from seqnas.space import Architecture, OperationSpec, SpaceSpec, layer_io

logger = logging.getLogger(__name__)

HEAD_PREFIX = "head."
DEFAULT_VAL_FRACTION = 0.2


@dataclass(frozen=True)
class TrainSettings:
    """Optimizer and batching knobs shared by fixed and supernet training."""

    batch: int = 16
    lr: float = 1.0
    arch_lr: float = 1.0
    rho: float = ADADELTA_RHO
    eps: float = ADADELTA_EPS
    temperature: float = 1.0
    alpha_mode: str = "mixture"

    def __post_init__(self):
        if self.batch < 1:
            raise ConfigError(f"batch must be at least 1, got {self.batch}")
        if self.lr <= 0 or self.arch_lr <= 0:
            raise ConfigError("learning-rate multipliers must be positive")
        if not 0 < self.rho < 1 or self.eps <= 0:
            raise ConfigError(f"Invalid ADADELTA constants rho={self.rho}, eps={self.eps}")
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        if self.alpha_mode not in ("mixture", "sampled"):
            raise ConfigError(f"alpha_mode must be mixture or sampled, got {self.alpha_mode!r}")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    frame_acc: float
    seq_acc: float
    expected_flops: Optional[float] = None

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class EvalReport:
    val_loss: float
    frame_accuracy: float
    seq_accuracy: float
    train_curve: List[EpochRecord] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "val_loss": self.val_loss,
            "frame_accuracy": self.frame_accuracy,
            "seq_accuracy": self.seq_accuracy,
            "train_curve": [r.to_dict() for r in self.train_curve],
        }

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r.to_dict()) + "\n" for r in self.train_curve)


def layer_prefix(layer: int, op: OperationSpec) -> str:
    """Parameter prefix of an op at a 1-based layer; shared by fixed nets and supernets."""
    return f"layer{layer}.{op.code}"


def init_head(channels: int, num_classes: int) -> Dict[str, np.ndarray]:
    """Zero-initialized 1x1 classifier, so an untrained net predicts a constant class."""
    return {
        "head.weight": np.zeros((num_classes, channels, 1, 1), dtype=np.float32),
        "head.bias": np.zeros((num_classes,), dtype=np.float32),
    }


def check_neural_space(space: SpaceSpec) -> None:
    if space.c1 != 1:
        raise ConfigError(
            f"Per-frame classification needs the height collapsed to 1, got c1={space.c1}"
        )


def head_forward(h: np.ndarray, store: ParamStore) -> Tuple[np.ndarray, ConvCache]:
    logits, cache = conv2d_forward(h, store["head.weight"], padding=(0, 0))
    return logits + store["head.bias"][None, :, None, None].astype(logits.dtype), cache


def head_backward(dlogits: np.ndarray, cache: ConvCache, store: ParamStore) -> np.ndarray:
    dh, dw = conv2d_backward(dlogits, cache)
    store.accumulate_grad("head.weight", dw)
    store.accumulate_grad("head.bias", dlogits.astype(np.float64).sum(axis=(0, 2, 3)))
    return dh


class FixedNet:
    """A backbone with one op per layer plus the classifier head, reading from a ParamStore."""

    def __init__(self, arch: Architecture, store: ParamStore):
        check_neural_space(arch.space)
        self.arch = arch
        self.store = store
        self.layers = [
            (op, layer_prefix(layer, op), step.stride, out_ch)
            for step, op, (_, out_ch, _, _, layer) in zip(
                arch.path.steps, arch.ops, layer_io(arch.path, arch.space)
            )
        ]
        self._caches: List[BlockCache] = []
        self._head_cache: Optional[ConvCache] = None

    @property
    def num_classes(self) -> int:
        return self.store["head.weight"].shape[0]

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._caches = []
        h = x
        for op, prefix, stride, out_ch in self.layers:
            h, cache = op_forward(h, op, self.store, prefix, stride, out_ch)
            self._caches.append(cache)
        logits, self._head_cache = head_forward(h, self.store)
        return logits

    def backward(self, dlogits: np.ndarray) -> np.ndarray:
        if self._head_cache is None:
            raise ShapeError("backward called before forward")
        d = head_backward(dlogits, self._head_cache, self.store)
        for cache in reversed(self._caches):
            d, grads = op_backward(d, cache)
            self.store.accumulate(grads)
        return d

    def backbone_param_count(self) -> int:
        return self.store.count(exclude_prefix=HEAD_PREFIX)


def build_fixed(arch: Architecture, seed: int, num_classes: int = 10) -> FixedNet:
    """Instantiate the layer stack of an architecture with seeded initial weights."""
    check_neural_space(arch.space)
    rng = np.random.default_rng(seed)
    store = ParamStore()
    io = layer_io(arch.path, arch.space)
    for step, op, (in_ch, out_ch, _, _, layer) in zip(arch.path.steps, arch.ops, io):
        store.update(init_op_params(op, in_ch, out_ch, step.stride, layer_prefix(layer, op), rng))
    store.update(init_head(io[-1][1], num_classes))
    logger.debug(f"Built {arch} with {store.count(exclude_prefix=HEAD_PREFIX)} backbone params")
    return FixedNet(arch, store)


def iterate_batches(n: int, batch: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    order = rng.permutation(n)
    for start in range(0, n, batch):
        yield order[start:start + batch]


def evaluate(
    forward: Callable[[np.ndarray], np.ndarray], dataset: SeqDataset, batch: int = 64
) -> Tuple[float, float, float]:
    """(mean frame loss, frame accuracy, sequence accuracy) of a forward function."""
    if len(dataset) == 0:
        raise ShapeError("Cannot evaluate on an empty dataset")
    total_loss = 0.0
    correct_frames = 0
    correct_seqs = 0
    for start in range(0, len(dataset), batch):
        x = dataset.images[start:start + batch]
        y = dataset.labels[start:start + batch]
        logits = forward(x)
        loss, _ = frame_softmax_ce(logits, y)
        total_loss += loss * len(x)
        hits = frame_predictions(logits) == y
        correct_frames += int(hits.sum())
        correct_seqs += int(hits.all(axis=1).sum())
    n = len(dataset)
    return total_loss / n, correct_frames / (n * dataset.frames), correct_seqs / n


def _check_finite(loss: float, epoch: int, what: str) -> None:
    if not np.isfinite(loss):
        raise DivergenceError(
            f"{what} became non-finite in epoch {epoch}",
            epoch=epoch,
            suggestion="Lower train.lr or check the input data.",
        )


def train_fixed(
    net: FixedNet,
    dataset: SeqDataset,
    epochs: int,
    batch: int,
    seed: int,
    val: Optional[SeqDataset] = None,
    settings: Optional[TrainSettings] = None,
) -> EvalReport:
    """ADADELTA epochs over seeded shuffles, evaluated on ``val`` after each epoch.

    Without ``val`` the dataset is split 80/20 by the same seed. ``epochs=0``
    only evaluates.
    """
    settings = settings or TrainSettings(batch=batch)
    dataset.check_space(net.arch.space)
    if dataset.K > net.num_classes:
        raise ShapeError(f"Dataset has {dataset.K} classes, head has {net.num_classes}")
    if val is None:
        dataset, val = split_dataset(dataset, DEFAULT_VAL_FRACTION, seed)
    rng = np.random.default_rng(seed)
    curve: List[EpochRecord] = []
    for epoch in range(1, epochs + 1):
        seen, total = 0, 0.0
        for idx in iterate_batches(len(dataset), batch, rng):
            logits = net.forward(dataset.images[idx])
            loss, dlogits = frame_softmax_ce(logits, dataset.labels[idx])
            _check_finite(loss, epoch, "Training loss")
            net.store.zero_grad()
            net.backward(dlogits)
            net.store.step(lr=settings.lr, rho=settings.rho, eps=settings.eps)
            total += loss * len(idx)
            seen += len(idx)
        val_loss, frame_acc, seq_acc = evaluate(net.forward, val, batch)
        _check_finite(val_loss, epoch, "Validation loss")
        curve.append(EpochRecord(epoch, total / seen, val_loss, frame_acc, seq_acc))
        logger.debug(
            f"epoch {epoch}: train {total / seen:.4f} val {val_loss:.4f} frame_acc {frame_acc:.3f}"
        )
    if curve:
        last = curve[-1]
        return EvalReport(last.val_loss, last.frame_acc, last.seq_acc, curve)
    val_loss, frame_acc, seq_acc = evaluate(net.forward, val, batch)
    return EvalReport(val_loss, frame_acc, seq_acc, curve)
