"""Synthetic text-line images with one class label per output frame.

Each image is a row of ``W / 2^a`` cells, one random glyph per cell. After the
backbone collapses the image to ``1 x c2``, output frame ``f`` sits over cell
``f``, so per-frame classification is well posed.

Dataset file layout (all little-endian)::

    magic   4 bytes  b"SQDS"
    version u32      1
    H, W, a, K, n    u32 each
    n records of:    H*W float32 image, then W/2^a uint8 labels
"""

import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Tuple

import numpy as np

from seqnas.errors import DataFormatError
from seqnas.space import SpaceSpec

logger = logging.getLogger(__name__)

DATASET_MAGIC = b"SQDS"
DATASET_VERSION = 1
_HEADER = struct.Struct("<4s6I")

MIN_HAMMING_FRACTION = 0.25
MAX_GLYPH_TRIES = 10_000


@dataclass(frozen=True)
class GlyphSet:
    """K pairwise-distinct g x g binary glyphs."""

    K: int
    bitmaps: np.ndarray
    seed: int

    @property
    def size(self) -> int:
        return self.bitmaps.shape[1]


def make_glyphs(K: int, size: int, seed: int) -> GlyphSet:
    """Rejection-sample K random masks at least a quarter of their bits apart."""
    if K < 1 or K > 255:
        raise DataFormatError(f"Alphabet size must be in 1..255, got {K}")
    if size < 1:
        raise DataFormatError(f"Glyph size must be positive, got {size}")
    bits = size * size
    min_distance = int(np.ceil(MIN_HAMMING_FRACTION * bits))
    rng = np.random.default_rng(seed)
    glyphs = []
    for _ in range(MAX_GLYPH_TRIES):
        candidate = rng.integers(0, 2, size=bits, dtype=np.uint8)
        if all(np.count_nonzero(candidate != g) >= min_distance for g in glyphs):
            glyphs.append(candidate)
            if len(glyphs) == K:
                break
    if len(glyphs) < K:
        raise DataFormatError(
            f"Could not draw {K} glyphs of {size}x{size} at Hamming distance >= {min_distance}",
            suggestion="Use a larger glyph size or a smaller alphabet.",
        )
    return GlyphSet(K=K, bitmaps=np.stack(glyphs).reshape(K, size, size), seed=seed)


@dataclass(frozen=True)
class SeqSample:
    image: np.ndarray
    labels: np.ndarray


@dataclass
class SeqDataset:
    """Images (n, 1, H, W) float32 in [0, 1] and labels (n, frames) int64."""

    images: np.ndarray
    labels: np.ndarray
    a: int
    K: int

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[1] != 1:
            raise DataFormatError(f"Images must be (n, 1, H, W), got {self.images.shape}")
        if self.labels.shape != (self.images.shape[0], self.frames):
            raise DataFormatError(
                f"Labels must be (n, {self.frames}), got {self.labels.shape}"
            )

    @property
    def H(self) -> int:
        return self.images.shape[2]

    @property
    def W(self) -> int:
        return self.images.shape[3]

    @property
    def frames(self) -> int:
        return self.images.shape[3] // 2**self.a

    def __len__(self) -> int:
        return self.images.shape[0]

    def __getitem__(self, index: int) -> SeqSample:
        return SeqSample(image=self.images[index], labels=self.labels[index])

    def __iter__(self) -> Iterator[SeqSample]:
        for i in range(len(self)):
            yield self[i]

    def subset(self, indices: np.ndarray) -> "SeqDataset":
        return SeqDataset(self.images[indices], self.labels[indices], self.a, self.K)

    def check_space(self, space: SpaceSpec) -> None:
        if (self.H, self.W, self.a) != (space.input_h, space.input_w, space.a):
            raise DataFormatError(
                f"Dataset geometry {self.H}x{self.W} (a={self.a}) does not match space "
                f"{space.input_h}x{space.input_w} (a={space.a})"
            )
        if space.input_ch != 1:
            raise DataFormatError(f"Datasets are single-channel, space expects {space.input_ch}")


def _render(
    glyphs: GlyphSet,
    labels: np.ndarray,
    offsets: np.ndarray,
    H: int,
    W: int,
    cell: int,
) -> np.ndarray:
    g = glyphs.size
    image = np.zeros((H, W), dtype=np.float32)
    base = (cell - g) // 2
    for f, (label, dx) in enumerate(zip(labels, offsets)):
        tall = np.repeat(glyphs.bitmaps[label], H // g, axis=0).astype(np.float32)
        left = f * cell + base + int(dx)
        lo, hi = max(left, 0), min(left + g, W)
        if lo < hi:
            np.maximum(image[:, lo:hi], tall[:, lo - left:hi - left], out=image[:, lo:hi])
    return image


def render_sample(
    space: SpaceSpec,
    glyphs: GlyphSet,
    index: int,
    noise: float,
    seed: int,
    jitter: int,
) -> Tuple[np.ndarray, np.ndarray]:
    """Image and labels of one sample; depends only on (seed, index)."""
    cell = 2**space.a
    frames = space.input_w // cell
    rng = np.random.default_rng([seed, index])
    labels = rng.integers(0, glyphs.K, size=frames)
    offsets = rng.integers(-jitter, jitter + 1, size=frames) if jitter else np.zeros(frames, int)
    image = _render(glyphs, labels, offsets, space.input_h, space.input_w, cell)
    if noise > 0:
        image = np.clip(image + rng.uniform(-noise, noise, size=image.shape), 0.0, 1.0)
    return image.astype(np.float32), labels


def gen_dataset(
    space: SpaceSpec,
    glyphs: GlyphSet,
    n: int,
    noise: float,
    seed: int,
    jitter: Optional[int] = None,
) -> SeqDataset:
    """Generate n samples; ``jitter`` defaults to one pixel, or zero for one-pixel cells."""
    cell = 2**space.a
    max_jitter = cell // 2
    if jitter is None:
        jitter = min(1, max_jitter)
    if n < 0:
        raise DataFormatError(f"Sample count must be non-negative, got {n}")
    if not 0 <= noise < 1:
        raise DataFormatError(f"noise must be in [0, 1), got {noise}")
    if space.input_w % cell:
        raise DataFormatError(f"Width {space.input_w} is not a multiple of the cell width {cell}")
    if glyphs.size > cell or space.input_h % glyphs.size:
        raise DataFormatError(
            f"Glyph size {glyphs.size} does not fit a {space.input_h}x{cell} cell"
        )
    if not 0 <= jitter <= max_jitter:
        raise DataFormatError(f"jitter must be in 0..{max_jitter}, got {jitter}")

    frames = space.input_w // cell
    images = np.zeros((n, 1, space.input_h, space.input_w), dtype=np.float32)
    labels = np.zeros((n, frames), dtype=np.int64)
    for i in range(n):
        images[i, 0], labels[i] = render_sample(space, glyphs, i, noise, seed, jitter)
    logger.debug(f"Generated {n} samples ({space.input_h}x{space.input_w}, K={glyphs.K})")
    return SeqDataset(images=images, labels=labels, a=space.a, K=glyphs.K)


def split_dataset(
    dataset: SeqDataset, val_fraction: float, seed: int
) -> Tuple[SeqDataset, SeqDataset]:
    """Disjoint (train, val) partition by seeded permutation."""
    if not 0 < val_fraction < 1:
        raise DataFormatError(f"val_fraction must be in (0, 1), got {val_fraction}")
    order = np.random.default_rng(seed).permutation(len(dataset))
    n_val = max(1, int(round(len(dataset) * val_fraction)))
    if n_val >= len(dataset):
        raise DataFormatError(f"Dataset of {len(dataset)} samples is too small to split")
    return dataset.subset(np.sort(order[n_val:])), dataset.subset(np.sort(order[:n_val]))


def save_dataset(path: Path, dataset: SeqDataset) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        header = (dataset.H, dataset.W, dataset.a, dataset.K, len(dataset))
        f.write(_HEADER.pack(DATASET_MAGIC, DATASET_VERSION, *header))
        for image, labels in zip(dataset.images, dataset.labels):
            f.write(np.ascontiguousarray(image, dtype="<f4").tobytes())
            f.write(labels.astype(np.uint8).tobytes())
    logger.info(f"Wrote {len(dataset)} samples to {path}")
    return path


def read_header(path: Path) -> Tuple[int, int, int, int, int]:
    """(H, W, a, K, n) of a dataset file."""
    try:
        with open(path, "rb") as f:
            raw = f.read(_HEADER.size)
    except OSError as e:
        raise DataFormatError(f"Cannot read dataset {path}: {e}") from e
    if len(raw) != _HEADER.size:
        raise DataFormatError(f"{path} is too short for a dataset header")
    magic, version, H, W, a, K, n = _HEADER.unpack(raw)
    if magic != DATASET_MAGIC or version != DATASET_VERSION:
        raise DataFormatError(f"{path} is not a version {DATASET_VERSION} dataset file")
    return H, W, a, K, n


def load_dataset(path: Path) -> SeqDataset:
    H, W, a, K, n = read_header(path)
    frames = W // 2**a
    record = np.dtype([("image", "<f4", (H, W)), ("labels", "u1", (frames,))])
    body = np.fromfile(path, dtype=record, offset=_HEADER.size)
    if body.shape[0] != n:
        raise DataFormatError(f"{path} declares {n} samples but holds {body.shape[0]}")
    return SeqDataset(
        images=body["image"].astype(np.float32)[:, None],
        labels=body["labels"].astype(np.int64),
        a=a,
        K=K,
    )


@dataclass(frozen=True)
class DataSettings:
    """Generation parameters of the desk task; ``glyph_size`` defaults to the cell width."""

    n: int = 1000
    noise: float = 0.1
    jitter: Optional[int] = None
    K: int = 10
    glyph_size: Optional[int] = None
    val_fraction: float = 0.2
    seed: int = 0


def build_dataset(space: SpaceSpec, settings: DataSettings) -> SeqDataset:
    glyphs = make_glyphs(settings.K, settings.glyph_size or 2**space.a, settings.seed)
    return gen_dataset(space, glyphs, settings.n, settings.noise, settings.seed, settings.jitter)


def build_datasets(space: SpaceSpec, settings: DataSettings) -> Tuple[SeqDataset, SeqDataset]:
    """Generated dataset split into disjoint (train, val) parts."""
    return split_dataset(build_dataset(space, settings), settings.val_fraction, settings.seed)
