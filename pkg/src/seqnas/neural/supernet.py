"""Weight-sharing supernet over a fixed downsampling path.

Every legal (layer, op) pair owns exactly one parameter set, named like the
fixed-network layers (``layer{l}.{code}.*``), so any architecture on the path
can be evaluated with the shared weights. Architecture parameters are L x C
logits; illegal choices hold -inf permanently.
"""

import logging
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from seqnas.cost import (
    RegularizerConfig,
    expected_flops,
    flops_table,
    regularizer_grad,
    regularizer_value,
)
from seqnas.data import SeqDataset
from seqnas.errors import ConfigError, DivergenceError, InfeasibleError, ShapeError
from seqnas.kernel.blocks import BlockCache, init_op_params, op_backward, op_forward
from seqnas.kernel.ops import ConvCache, frame_softmax_ce
from seqnas.kernel.params import ParamStore
from seqnas.neural.network import (
    FixedNet,
    TrainSettings,
    check_neural_space,
    head_backward,
    head_forward,
    init_head,
    iterate_batches,
    layer_prefix,
)
from seqnas.space import Architecture, SpaceSpec, StridePath, layer_io, legal_mask

logger = logging.getLogger(__name__)

MIXTURE = "mixture"
SAMPLED = "sampled"


def masked_softmax(logits: np.ndarray, temperature: float) -> np.ndarray:
    """Row softmax of logits / T; -inf entries get exactly zero weight."""
    z = logits / temperature
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_backward(weights: np.ndarray, grad_w: np.ndarray, temperature: float) -> np.ndarray:
    """Pull a gradient with respect to the softmax weights back onto the logits."""
    inner = np.sum(weights * grad_w, axis=1, keepdims=True)
    return weights * (grad_w - inner) / temperature


class ArchParams:
    """L x C architecture logits with a softmax temperature."""

    def __init__(self, logits: np.ndarray, temperature: float = 1.0):
        logits = np.asarray(logits, dtype=np.float64)
        if logits.ndim != 2:
            raise ShapeError(f"Architecture logits must be L x C, got shape {logits.shape}")
        if temperature <= 0:
            raise ConfigError(f"temperature must be positive, got {temperature}")
        if not np.all(np.isfinite(logits).any(axis=1)):
            raise ShapeError("Every layer needs at least one legal choice")
        self.temperature = temperature
        self.store = ParamStore(dtype=np.float64)
        self.store.add("alpha", logits)

    @classmethod
    def uniform(cls, mask: np.ndarray, temperature: float = 1.0) -> "ArchParams":
        mask = np.asarray(mask, dtype=bool)
        return cls(np.where(mask, 0.0, -np.inf), temperature)

    @property
    def logits(self) -> np.ndarray:
        return self.store["alpha"]

    @property
    def legal(self) -> np.ndarray:
        return np.isfinite(self.logits)

    def weights(self) -> np.ndarray:
        return masked_softmax(self.logits, self.temperature)

    def copy(self) -> "ArchParams":
        return ArchParams(self.logits.copy(), self.temperature)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "temperature": self.temperature,
            "logits": [[float(v) if np.isfinite(v) else None for v in row] for row in self.logits],
        }


@dataclass
class _LayerRecord:
    choices: List[int]
    outputs: List[np.ndarray]
    caches: List[BlockCache]
    weights: np.ndarray


class SuperNet:
    """Choice blocks over every legal op of each layer of one path."""

    def __init__(
        self,
        space: SpaceSpec,
        path: StridePath,
        seed: int,
        num_classes: int = 10,
        temperature: float = 1.0,
        flops: Optional[np.ndarray] = None,
    ):
        check_neural_space(space)
        self.space = space
        self.path = path
        self.io = layer_io(path, space)
        self.mask = np.array(legal_mask(space, path), dtype=bool)
        rng = np.random.default_rng(seed)
        self.store = ParamStore()
        for step, (in_ch, out_ch, _, _, layer) in zip(path.steps, self.io):
            for j, op in enumerate(space.op_vocab):
                if self.mask[layer - 1, j]:
                    self.store.update(
                        init_op_params(op, in_ch, out_ch, step.stride, layer_prefix(layer, op), rng)
                    )
        self.store.update(init_head(self.io[-1][1], num_classes))
        self.alpha = ArchParams.uniform(self.mask, temperature)
        self.flops = flops_table(space, path) if flops is None else np.asarray(flops, np.float64)
        if self.flops.shape != self.mask.shape:
            raise ShapeError(f"FLOPS table must be {self.mask.shape}, got {self.flops.shape}")
        self.sample_counts = np.zeros(self.mask.shape, dtype=np.int64)
        self._records: List[_LayerRecord] = []
        self._head_cache: Optional[ConvCache] = None
        self._mode = MIXTURE

    @property
    def L(self) -> int:
        return self.space.L

    def legal_choices(self, layer: int) -> List[int]:
        """Vocabulary indices legal at a 0-based layer."""
        return [int(j) for j in np.flatnonzero(self.mask[layer])]

    def sample_uniform(self, rng: np.random.Generator) -> List[int]:
        return [int(rng.choice(self.legal_choices(l))) for l in range(self.L)]

    def sample_alpha(self, rng: np.random.Generator) -> List[int]:
        w = self.alpha.weights()
        return [int(rng.choice(self.space.C, p=w[l])) for l in range(self.L)]

    def forward(
        self,
        x: np.ndarray,
        mode: str = MIXTURE,
        choices: Optional[Sequence[int]] = None,
        rng: Optional[np.random.Generator] = None,
    ) -> np.ndarray:
        """Mixture: each block outputs sum_j w_j op_j(x). Sampled: one op per block."""
        if mode not in (MIXTURE, SAMPLED):
            raise ConfigError(f"Unknown supernet mode {mode!r}")
        if mode == SAMPLED and choices is None:
            if rng is None:
                raise ConfigError("Sampled mode needs either explicit choices or an rng")
            choices = self.sample_alpha(rng)
        if choices is not None and len(choices) != self.L:
            raise ShapeError(f"Expected {self.L} choices, got {len(choices)}")
        weights = self.alpha.weights()
        self._mode = mode
        self._records = []
        h = x
        for l, step in enumerate(self.path.steps):
            picks = self.legal_choices(l) if mode == MIXTURE else [choices[l]]
            record = _LayerRecord(picks, [], [], weights[l])
            out = None
            for j in picks:
                if not self.mask[l, j]:
                    raise ShapeError(f"Choice {j} is illegal at layer {l + 1}", layer=l + 1)
                op = self.space.op_vocab[j]
                o, cache = op_forward(
                    h, op, self.store, layer_prefix(l + 1, op), step.stride, self.io[l][1]
                )
                record.outputs.append(o)
                record.caches.append(cache)
                term = o if mode == SAMPLED else weights[l, j] * o
                out = term if out is None else out + term
            self._records.append(record)
            h = out.astype(x.dtype)
        logits, self._head_cache = head_forward(h, self.store)
        return logits

    def backward(self, dlogits: np.ndarray, accumulate: bool = True) -> np.ndarray:
        """Backpropagate; returns dLoss/d(block output share) per (layer, choice).

        In mixture mode entry (l, j) is <dy_l, op_j(x_l)>. In sampled mode only the
        sampled choice is filled. Weight gradients go to the store when ``accumulate``.
        """
        if self._head_cache is None:
            raise ShapeError("backward called before forward")
        scratch = self.store if accumulate else _Discard()
        d = head_backward(dlogits, self._head_cache, scratch)
        grad_w = np.zeros(self.mask.shape, dtype=np.float64)
        for l in reversed(range(self.L)):
            record = self._records[l]
            dx = None
            for j, o, cache in zip(record.choices, record.outputs, record.caches):
                grad_w[l, j] = float(np.sum(d.astype(np.float64) * o.astype(np.float64)))
                share = d if self._mode == SAMPLED else record.weights[j] * d
                dxj, grads = op_backward(share, cache)
                scratch.accumulate(grads)
                dx = dxj if dx is None else dx + dxj
            d = dx.astype(d.dtype)
        return grad_w

    def loss_and_arch_grad(
        self,
        x: np.ndarray,
        labels: np.ndarray,
        mode: str = MIXTURE,
        rng: Optional[np.random.Generator] = None,
    ) -> Tuple[float, np.ndarray]:
        """Validation loss and its gradient with respect to the logits."""
        logits = self.forward(x, mode=mode, rng=rng)
        loss, dlogits = frame_softmax_ce(logits, labels)
        grad_w = self.backward(dlogits, accumulate=False)
        w = self.alpha.weights()
        T = self.alpha.temperature
        if mode == MIXTURE:
            return loss, softmax_backward(w, grad_w, T)
        # Straight-through single path: only the sampled choice carries a signal.
        grad = np.zeros_like(w)
        for l, record in enumerate(self._records):
            s = record.choices[0]
            delta = np.zeros(self.space.C)
            delta[s] = 1.0
            grad[l] = grad_w[l, s] * w[l, s] * (delta - w[l]) / T
        return loss, np.where(self.mask, grad, 0.0)

    def objective(self, x: np.ndarray, labels: np.ndarray, reg: RegularizerConfig) -> float:
        """Mixture-mode r(alpha) * L_val."""
        logits = self.forward(x, mode=MIXTURE)
        loss, _ = frame_softmax_ce(logits, labels)
        return regularizer_value(expected_flops(self.alpha, self.flops), reg) * loss

    def arch_gradient(
        self,
        x: np.ndarray,
        labels: np.ndarray,
        reg: RegularizerConfig,
        mode: str = MIXTURE,
        rng: Optional[np.random.Generator] = None,
    ) -> Dict[str, Any]:
        """Gradient of r(alpha) * L_val through both factors."""
        loss, dloss = self.loss_and_arch_grad(x, labels, mode=mode, rng=rng)
        flops = expected_flops(self.alpha, self.flops)
        r = regularizer_value(flops, reg)
        dr = regularizer_grad(flops, reg)
        dflops = softmax_backward(self.alpha.weights(), self.flops, self.alpha.temperature)
        grad = r * dloss + loss * dr * dflops
        return {
            "grad": grad,
            "val_loss": loss,
            "expected_flops": flops,
            "regularizer": r,
            "objective": r * loss,
        }

    def arch_step(
        self,
        x: np.ndarray,
        labels: np.ndarray,
        reg: RegularizerConfig,
        settings: TrainSettings,
        rng: Optional[np.random.Generator] = None,
    ) -> Dict[str, Any]:
        """One ADADELTA step on the logits; weights are left untouched."""
        info = self.arch_gradient(x, labels, reg, mode=settings.alpha_mode, rng=rng)
        if not np.all(np.isfinite(info["grad"][self.mask])):
            raise DivergenceError("Architecture gradient became non-finite", epoch=0)
        self.alpha.store.zero_grad()
        self.alpha.store.accumulate_grad("alpha", np.where(self.mask, info["grad"], 0.0))
        self.alpha.store.step(lr=settings.arch_lr, rho=settings.rho, eps=settings.eps)
        return info

    def weight_step(
        self,
        x: np.ndarray,
        labels: np.ndarray,
        choices: Sequence[int],
        settings: TrainSettings,
    ) -> float:
        """One ADADELTA step of the shared weights along a single sampled path."""
        for l, j in enumerate(choices):
            self.sample_counts[l, j] += 1
        logits = self.forward(x, mode=SAMPLED, choices=choices)
        loss, dlogits = frame_softmax_ce(logits, labels)
        if not np.isfinite(loss):
            return loss
        self.store.zero_grad()
        self.backward(dlogits)
        self.store.step(lr=settings.lr, rho=settings.rho, eps=settings.eps)
        return loss

    def extract(self, arch: Architecture) -> FixedNet:
        """A fixed network on this path that reads the shared weights in place."""
        if arch.path != self.path:
            raise ShapeError(
                f"Architecture path {arch.path} differs from supernet path {self.path}"
            )
        return FixedNet(arch, self.store)


class _Discard:
    """Gradient sink used when only architecture gradients are wanted."""

    def accumulate(self, grads: Dict[str, np.ndarray]) -> None:
        pass

    def accumulate_grad(self, name: str, grad: np.ndarray) -> None:
        pass


def warmup(
    net: SuperNet,
    train: SeqDataset,
    epochs: int = 1,
    seed: int = 0,
    settings: Optional[TrainSettings] = None,
) -> SuperNet:
    """Train only the weights, sampling each block's op uniformly per batch."""
    settings = settings or TrainSettings()
    train.check_space(net.space)
    rng = np.random.default_rng(seed)
    for epoch in range(1, epochs + 1):
        for idx in iterate_batches(len(train), settings.batch, rng):
            loss = net.weight_step(
                train.images[idx], train.labels[idx], net.sample_uniform(rng), settings
            )
            if not np.isfinite(loss):
                raise DivergenceError(
                    f"Warm-up loss became non-finite in epoch {epoch}", epoch=epoch
                )
        logger.info(f"Warm-up epoch {epoch}/{epochs} done")
    return net


def alternating_search(
    net: SuperNet,
    train: SeqDataset,
    val: SeqDataset,
    epochs: int,
    reg: RegularizerConfig,
    seed: int = 0,
    settings: Optional[TrainSettings] = None,
) -> Tuple[ArchParams, List[Dict[str, Any]]]:
    """Per batch: a weight step on train with sampled ops, then an alpha step on val."""
    settings = settings or TrainSettings()
    train.check_space(net.space)
    val.check_space(net.space)
    rng = np.random.default_rng(seed)
    history: List[Dict[str, Any]] = []
    step = 0
    for epoch in range(1, epochs + 1):
        val_batches = list(iterate_batches(len(val), settings.batch, rng))
        for i, idx in enumerate(iterate_batches(len(train), settings.batch, rng)):
            train_loss = net.weight_step(
                train.images[idx], train.labels[idx], net.sample_alpha(rng), settings
            )
            if not np.isfinite(train_loss):
                raise DivergenceError(
                    f"Training loss became non-finite in epoch {epoch}", epoch=epoch
                )
            vidx = val_batches[i % len(val_batches)]
            try:
                info = net.arch_step(val.images[vidx], val.labels[vidx], reg, settings, rng=rng)
            except DivergenceError as e:
                raise DivergenceError(e.message, epoch=epoch) from e
            if not np.isfinite(info["val_loss"]) or not np.isfinite(info["expected_flops"]):
                raise DivergenceError(
                    f"Validation loss became non-finite in epoch {epoch}", epoch=epoch
                )
            step += 1
            history.append(
                {
                    "epoch": epoch,
                    "step": step,
                    "train_loss": float(train_loss),
                    "val_loss": float(info["val_loss"]),
                    "expected_flops": float(info["expected_flops"]),
                    "regularizer": float(info["regularizer"]),
                    "objective": float(info["objective"]),
                }
            )
        logger.info(
            f"Search epoch {epoch}/{epochs}: expected FLOPS {history[-1]['expected_flops']:.0f}"
        )
    return net.alpha, history


def discretize(alpha: ArchParams, path: StridePath, space: SpaceSpec) -> Architecture:
    """Per-layer argmax over legal choices; ties go to the lowest vocabulary index."""
    logits = alpha.logits
    if logits.shape != (space.L, space.C):
        raise ShapeError(f"Logits must be {(space.L, space.C)}, got {logits.shape}")
    mask = np.array(legal_mask(space, path), dtype=bool)
    masked = np.where(mask, logits, -np.inf)
    ops = [space.op_vocab[int(np.argmax(row))] for row in masked]
    return Architecture(space, path, tuple(ops))


def enforce_budget(arch: Architecture, alpha: ArchParams, budget_macs: float) -> Architecture:
    """Greedy per-layer downgrades until the architecture fits the budget.

    Each step swaps one layer to a strictly cheaper legal op, choosing the
    smallest logit drop, then the larger saving, then the lower layer.
    """
    space, path = arch.space, arch.path
    table = flops_table(space, path)
    mask = np.array(legal_mask(space, path), dtype=bool)
    index = {op.code: j for j, op in enumerate(space.op_vocab)}
    current = [index[op.code] for op in arch.ops]
    total = sum(table[l, j] for l, j in enumerate(current))
    logits = alpha.logits
    while total > budget_macs:
        moves = []
        for l, j in enumerate(current):
            for k in np.flatnonzero(mask[l]):
                if table[l, k] < table[l, j]:
                    drop = logits[l, j] - logits[l, k]
                    moves.append((drop, -(table[l, j] - table[l, k]), l, int(k)))
        if not moves:
            raise InfeasibleError(
                f"No legal architecture on {path} fits the budget of {budget_macs:.0f} MACs",
                suggestion="Raise run.budget_macs or widen the op vocabulary.",
            )
        _, neg_saving, l, k = min(moves)
        logger.warning(
            f"Over budget ({total:.0f} > {budget_macs:.0f} MACs): layer {l + 1} "
            f"{space.op_vocab[current[l]].code} -> {space.op_vocab[k].code}"
        )
        current[l] = k
        total += neg_saving
    return Architecture(space, path, tuple(space.op_vocab[j] for j in current))
