"""Named parameter storage, the ADADELTA update and binary checkpoints."""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from seqnas.errors import DataFormatError, ShapeError

logger = logging.getLogger(__name__)

ADADELTA_RHO = 0.9
ADADELTA_EPS = 1e-6
CHECKPOINT_FORMAT = "seqnas-checkpoint/1"


@dataclass
class Param:
    value: np.ndarray
    grad: Optional[np.ndarray] = None
    sq_grad: Optional[np.ndarray] = None
    sq_delta: Optional[np.ndarray] = None


class ParamStore:
    """Ordered mapping of parameter names to values, gradients and optimizer state."""

    def __init__(self, dtype: np.dtype = np.float32):
        self.dtype = np.dtype(dtype)
        self._params: Dict[str, Param] = {}

    def add(self, name: str, value: np.ndarray) -> None:
        if name in self._params:
            raise ShapeError(f"Parameter {name!r} already exists")
        self._params[name] = Param(value=np.array(value, dtype=self.dtype))

    def update(self, values: Dict[str, np.ndarray]) -> None:
        for name, value in values.items():
            self.add(name, value)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._params[name].value

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        param = self._params[name]
        value = np.asarray(value, dtype=self.dtype)
        if value.shape != param.value.shape:
            raise ShapeError(f"{name}: expected shape {param.value.shape}, got {value.shape}")
        param.value = value.copy()

    def __contains__(self, name: object) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> List[str]:
        return list(self._params)

    def items(self) -> Iterator[Tuple[str, np.ndarray]]:
        for name, param in self._params.items():
            yield name, param.value

    def grad(self, name: str) -> Optional[np.ndarray]:
        return self._params[name].grad

    def accumulate_grad(self, name: str, grad: np.ndarray) -> None:
        param = self._params[name]
        if grad.shape != param.value.shape:
            raise ShapeError(f"{name}: gradient shape {grad.shape} != {param.value.shape}")
        g = grad.astype(np.float64)
        param.grad = g if param.grad is None else param.grad + g

    def accumulate(self, grads: Dict[str, np.ndarray]) -> None:
        for name, grad in grads.items():
            self.accumulate_grad(name, grad)

    def zero_grad(self) -> None:
        for param in self._params.values():
            param.grad = None

    def count(self, exclude_prefix: Optional[str] = None) -> int:
        return sum(
            p.value.size
            for name, p in self._params.items()
            if exclude_prefix is None or not name.startswith(exclude_prefix)
        )

    def step(self, lr: float = 1.0, rho: float = ADADELTA_RHO, eps: float = ADADELTA_EPS) -> int:
        return adadelta_step(self, lr=lr, rho=rho, eps=eps)

    def save(self, path: Path) -> Tuple[Path, Path]:
        return save_checkpoint(self, path)

    def copy_values(self) -> Dict[str, np.ndarray]:
        return {name: p.value.copy() for name, p in self._params.items()}


def adadelta_step(
    store: ParamStore,
    lr: float = 1.0,
    rho: float = ADADELTA_RHO,
    eps: float = ADADELTA_EPS,
) -> int:
    """One ADADELTA update of every parameter holding a gradient; returns how many moved."""
    updated = 0
    for param in store._params.values():
        if param.grad is None:
            continue
        g = param.grad
        if param.sq_grad is None:
            param.sq_grad = np.zeros_like(g)
            param.sq_delta = np.zeros_like(g)
        param.sq_grad = rho * param.sq_grad + (1 - rho) * g * g
        delta = np.sqrt(param.sq_delta + eps) / np.sqrt(param.sq_grad + eps) * g
        param.sq_delta = rho * param.sq_delta + (1 - rho) * delta * delta
        param.value = (param.value.astype(np.float64) - lr * delta).astype(store.dtype)
        updated += 1
    return updated


def _paths(path: Path) -> Tuple[Path, Path]:
    path = Path(path)
    return path.with_suffix(".bin"), path.with_suffix(".json")


def save_checkpoint(store: ParamStore, path: Path) -> Tuple[Path, Path]:
    """Write little-endian float32 values plus a JSON manifest of names, shapes and offsets."""
    bin_path, manifest_path = _paths(path)
    bin_path.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    with open(bin_path, "wb") as f:
        for name, value in store.items():
            data = np.ascontiguousarray(value, dtype="<f4")
            f.write(data.tobytes())
            entries.append({"name": name, "shape": list(value.shape), "offset": offset})
            offset += data.size
    manifest = {"format": CHECKPOINT_FORMAT, "dtype": "<f4", "count": offset, "params": entries}
    manifest_path.write_text(json.dumps(manifest, indent=2))
    logger.info(f"Saved {len(entries)} parameters ({offset} values) to {bin_path}")
    return bin_path, manifest_path


def load_checkpoint(path: Path) -> ParamStore:
    bin_path, manifest_path = _paths(path)
    try:
        manifest = json.loads(manifest_path.read_text())
        flat = np.fromfile(bin_path, dtype="<f4")
    except (OSError, json.JSONDecodeError) as e:
        raise DataFormatError(f"Cannot read checkpoint {path}: {e}") from e
    if manifest.get("format") != CHECKPOINT_FORMAT or flat.size != manifest.get("count"):
        raise DataFormatError(f"Checkpoint {path} is corrupt or of an unknown format")
    store = ParamStore()
    for entry in manifest["params"]:
        size = int(np.prod(entry["shape"], dtype=np.int64))
        start = entry["offset"]
        store.add(entry["name"], flat[start:start + size].reshape(entry["shape"]))
    return store
