"""Constrained downsampling-path lattice and the operation vocabulary.

A backbone is a stack of L layers. Each layer carries a stride step (A, B or N)
and an operation. The stride steps must shrink an input of ``input_h x input_w``
to exactly ``c1 x c2``, which forces exactly ``a`` A-steps and ``b`` B-steps.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

from seqnas.errors import (
    ArchParseError,
    IllegalOperationError,
    ShapeError,
    SpaceValidationError,
)

logger = logging.getLogger(__name__)


class StrideStep(str, Enum):
    """Per-layer stride assignment, as (height-stride, width-stride)."""

    A = "A"
    B = "B"
    N = "N"

    @property
    def stride(self) -> Tuple[int, int]:
        return _STRIDES[self]

    @property
    def downsamples(self) -> bool:
        return self is not StrideStep.N


_STRIDES: Dict[StrideStep, Tuple[int, int]] = {
    StrideStep.A: (2, 2),
    StrideStep.B: (2, 1),
    StrideStep.N: (1, 1),
}


class OpFamily(str, Enum):
    MBCONV = "MBConv"
    SKIP = "SkipConnect"
    RESIDUAL = "ResidualConv3x3"


@dataclass(frozen=True)
class OperationSpec:
    """One entry of the choice-block vocabulary."""

    family: OpFamily
    kernel: int
    expansion: int
    code: str

    def __post_init__(self):
        if self.kernel not in (3, 5):
            raise SpaceValidationError(f"Kernel must be 3 or 5, got {self.kernel}")
        if self.expansion not in (1, 3, 6):
            raise SpaceValidationError(f"Expansion must be 1, 3 or 6, got {self.expansion}")

    @property
    def is_skip(self) -> bool:
        return self.family is OpFamily.SKIP

    def __str__(self) -> str:
        return self.code


def _mbconv(kernel: int, expansion: int) -> OperationSpec:
    return OperationSpec(OpFamily.MBCONV, kernel, expansion, f"mb{kernel}e{expansion}")


MB3E1 = _mbconv(3, 1)
MB3E3 = _mbconv(3, 3)
MB3E6 = _mbconv(3, 6)
MB5E1 = _mbconv(5, 1)
MB5E3 = _mbconv(5, 3)
MB5E6 = _mbconv(5, 6)
SKIP = OperationSpec(OpFamily.SKIP, 3, 1, "skip")
RES3 = OperationSpec(OpFamily.RESIDUAL, 3, 1, "res3")

# Searchable vocabulary in its fixed order; the order breaks argmax ties.
VOCABULARY: Tuple[OperationSpec, ...] = (MB3E1, MB3E3, MB3E6, MB5E1, MB5E3, MB5E6, SKIP)

OPS_BY_CODE: Dict[str, OperationSpec] = {op.code: op for op in VOCABULARY + (RES3,)}


def op_from_code(code: str) -> OperationSpec:
    """Look up an operation by its text code."""
    try:
        return OPS_BY_CODE[code]
    except KeyError:
        raise IllegalOperationError(
            f"Unknown op code: {code!r}",
            suggestion=f"Known codes: {', '.join(OPS_BY_CODE)}",
        ) from None


@dataclass(frozen=True)
class StridePath:
    """Ordered per-layer stride steps (the downsampling path)."""

    steps: Tuple[StrideStep, ...]

    @property
    def L(self) -> int:
        return len(self.steps)

    @property
    def ds_positions(self) -> Tuple[int, ...]:
        """1-based indices of the downsampling layers."""
        return tuple(i + 1 for i, step in enumerate(self.steps) if step.downsamples)

    @property
    def stage_string(self) -> str:
        """The A/B sequence of the downsampling layers in order."""
        return "".join(step.value for step in self.steps if step.downsamples)

    def count(self, kind: StrideStep) -> int:
        return sum(1 for step in self.steps if step is kind)

    @classmethod
    def from_stages(cls, stages: str, positions: Sequence[int], L: int) -> "StridePath":
        """Place a stage string at 1-based layer positions, N everywhere else."""
        if len(stages) != len(positions):
            raise SpaceValidationError(
                f"Stage string {stages!r} has {len(stages)} steps "
                f"but {len(positions)} positions were given"
            )
        steps = [StrideStep.N] * L
        for stage, pos in zip(stages, positions):
            if not 1 <= pos <= L:
                raise SpaceValidationError(f"Position {pos} outside layers 1..{L}")
            if steps[pos - 1] is not StrideStep.N:
                raise SpaceValidationError(f"Position {pos} used twice")
            if stage not in ("A", "B"):
                raise SpaceValidationError(f"Stage must be A or B, got {stage!r}")
            steps[pos - 1] = StrideStep(stage)
        return cls(tuple(steps))

    def __str__(self) -> str:
        return f"{self.stage_string}@{','.join(str(p) for p in self.ds_positions)}"


def default_channels(stages: int, base: int = 8) -> Tuple[int, ...]:
    """Doubling channel schedule, one entry per stage."""
    return tuple(base * 2**i for i in range(stages))


def typical_positions(L: int, stages: int) -> Tuple[int, ...]:
    """First layer of each of ``stages`` most-even stages (1, 4, 7, 10, 13 for 15/5)."""
    if stages > L:
        raise SpaceValidationError(f"Cannot place {stages} stages in {L} layers (a+b > L)")
    return tuple(1 + (i * L) // stages for i in range(stages))


@dataclass(frozen=True)
class SpaceSpec:
    """Search-space definition: layer count, required strides, geometry and vocabulary."""

    L: int
    a: int
    b: int
    input_h: int
    input_w: int
    c1: int
    c2: int
    channels: Tuple[int, ...]
    op_vocab: Tuple[OperationSpec, ...] = VOCABULARY
    ds_positions: Optional[Tuple[int, ...]] = None
    input_ch: int = 1

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "op_vocab", tuple(self.op_vocab))
        if self.ds_positions is not None:
            object.__setattr__(self, "ds_positions", tuple(int(p) for p in self.ds_positions))
        self._validate()

    def _validate(self):
        if self.L < 1:
            raise SpaceValidationError(f"L must be positive, got {self.L}")
        if self.a < 0 or self.b < 0:
            raise SpaceValidationError(f"a and b must be non-negative, got a={self.a}, b={self.b}")
        if self.a + self.b > self.L:
            raise SpaceValidationError(
                f"Infeasible space: a+b = {self.a + self.b} > L = {self.L}",
                suggestion="Use at least as many layers as downsampling steps.",
            )
        if min(self.input_h, self.input_w, self.c1, self.c2, self.input_ch) < 1:
            raise SpaceValidationError("Sizes and targets must be positive")
        if self.input_h != self.c1 * 2 ** (self.a + self.b):
            raise SpaceValidationError(
                f"Constraint unsatisfiable: input_h / c1 = {self.input_h}/{self.c1} "
                f"but 2^(a+b) = {2 ** (self.a + self.b)}"
            )
        if self.input_w != self.c2 * 2**self.a:
            raise SpaceValidationError(
                f"Constraint unsatisfiable: input_w / c2 = {self.input_w}/{self.c2} "
                f"but 2^a = {2 ** self.a}"
            )
        if len(self.channels) != self.a + self.b:
            raise SpaceValidationError(
                f"channels needs one entry per stage ({self.a + self.b}), got {len(self.channels)}"
            )
        if any(c < 1 for c in self.channels):
            raise SpaceValidationError("Channel counts must be positive")
        if not self.op_vocab:
            raise SpaceValidationError("Operation vocabulary is empty")
        if RES3 in self.op_vocab:
            raise SpaceValidationError("res3 is the fixed step-1 default, not a searchable choice")
        if len(set(op.code for op in self.op_vocab)) != len(self.op_vocab):
            raise SpaceValidationError("Operation vocabulary has duplicate codes")
        if self.ds_positions is not None:
            positions = self.ds_positions
            if len(positions) != self.a + self.b:
                raise SpaceValidationError(
                    f"ds_positions has {len(positions)} entries, expected a+b = {self.a + self.b}"
                )
            if list(positions) != sorted(set(positions)) or (
                positions and not (1 <= positions[0] and positions[-1] <= self.L)
            ):
                raise SpaceValidationError(
                    f"ds_positions must be distinct, increasing and within 1..{self.L}"
                )

    @property
    def C(self) -> int:
        return len(self.op_vocab)

    @property
    def stages(self) -> int:
        return self.a + self.b

    def with_positions(self, positions: Optional[Sequence[int]]) -> "SpaceSpec":
        return replace(self, ds_positions=None if positions is None else tuple(positions))

    def typical(self) -> "SpaceSpec":
        """The same space restricted to stage-aligned downsampling positions."""
        return self.with_positions(typical_positions(self.L, self.stages))

    @classmethod
    def large(cls, **overrides) -> "SpaceSpec":
        """Full-scale space: 15 layers, 32x100 input, five stages of 32..512 filters."""
        params = dict(
            L=15, a=2, b=3, input_h=32, input_w=100, c1=1, c2=25,
            channels=(32, 64, 128, 256, 512),
        )
        params.update(overrides)
        return cls(**params)

    @classmethod
    def desk(cls, **overrides) -> "SpaceSpec":
        """Desk-scale space: 8 layers, 16x32 input collapsed to 1x8."""
        params = dict(
            L=8, a=2, b=2, input_h=16, input_w=32, c1=1, c2=8,
            channels=(8, 16, 16, 32),
        )
        params.update(overrides)
        return cls(**params)

    @classmethod
    def from_counts(cls, L: int, a: int, b: int, **overrides) -> "SpaceSpec":
        """Smallest geometry satisfying the constraint for the given counts."""
        if a < 0 or b < 0:
            raise SpaceValidationError(f"a and b must be non-negative, got a={a}, b={b}")
        params = dict(
            L=L, a=a, b=b, input_h=2 ** (a + b), input_w=2**a, c1=1, c2=1,
            channels=default_channels(a + b),
        )
        params.update(overrides)
        return cls(**params)


def _next_permutation(word: List[str]) -> bool:
    """Advance ``word`` to its next lexicographic arrangement in place."""
    i = len(word) - 2
    while i >= 0 and word[i] >= word[i + 1]:
        i -= 1
    if i < 0:
        return False
    j = len(word) - 1
    while word[j] <= word[i]:
        j -= 1
    word[i], word[j] = word[j], word[i]
    word[i + 1:] = reversed(word[i + 1:])
    return True


def multiset_words(counts: Sequence[Tuple[str, int]]) -> Iterator[str]:
    """All distinct arrangements of a multiset of symbols, in lexicographic order."""
    word = sorted(symbol for symbol, n in counts for _ in range(n))
    yield "".join(word)
    while _next_permutation(word):
        yield "".join(word)


def stage_strings(a: int, b: int) -> List[str]:
    """All arrangements of a A's and b B's (AABBB, ABABB, ... for a=2, b=3)."""
    return list(multiset_words((("A", a), ("B", b))))


def enumerate_paths(space: SpaceSpec) -> List[StridePath]:
    """All paths with exactly a A-steps and b B-steps, lexicographic with A < B < N."""
    if space.ds_positions is not None:
        return [
            StridePath.from_stages(stages, space.ds_positions, space.L)
            for stages in stage_strings(space.a, space.b)
        ]
    words = multiset_words(
        (("A", space.a), ("B", space.b), ("N", space.L - space.a - space.b))
    )
    return [StridePath(tuple(StrideStep(c) for c in word)) for word in words]


def count_space(space: SpaceSpec) -> Tuple[int, int]:
    """Path count and the upper-bound architecture count, without enumerating."""
    k = space.stages
    arrangements = math.comb(k, space.a)
    if space.ds_positions is None:
        path_count = math.comb(space.L, k) * arrangements
    else:
        path_count = arrangements
    return path_count, path_count * space.C**space.L


def _walk(
    path: StridePath, space: SpaceSpec
) -> Iterator[Tuple[int, Optional[Tuple[int, int, int]]]]:
    """Yield (layer, (h, w, ch)) per layer, or (layer, None) at the first non-integral size."""
    h, w, ch = space.input_h, space.input_w, space.input_ch
    stage = 0
    for layer, step in enumerate(path.steps, start=1):
        sh, sw = step.stride
        if h % sh or w % sw:
            yield layer, None
            return
        h, w = h // sh, w // sw
        if step.downsamples:
            if stage >= len(space.channels):
                yield layer, None
                return
            ch = space.channels[stage]
            stage += 1
        yield layer, (h, w, ch)


def check_constraint(path: StridePath, space: SpaceSpec) -> bool:
    """True iff the path maps the input exactly onto (c1, c2) with integral sizes throughout."""
    if path.L != space.L:
        return False
    last = None
    for _, entry in _walk(path, space):
        if entry is None:
            return False
        last = entry
    h, w = (last[0], last[1]) if last is not None else (space.input_h, space.input_w)
    return h == space.c1 and w == space.c2


def shape_trace(path: StridePath, space: SpaceSpec) -> List[Tuple[int, int, int]]:
    """Output (height, width, channels) after every layer."""
    if path.L != space.L:
        raise ShapeError(f"Path has {path.L} layers, space has {space.L}", layer=None)
    trace: List[Tuple[int, int, int]] = []
    for layer, entry in _walk(path, space):
        if entry is None:
            raise ShapeError(
                f"Layer {layer} produces a non-integral or unscheduled size", layer=layer
            )
        trace.append(entry)
    h, w = (trace[-1][0], trace[-1][1]) if trace else (space.input_h, space.input_w)
    if (h, w) != (space.c1, space.c2):
        raise ShapeError(
            f"Layer {space.L} outputs {h}x{w}, constraint requires {space.c1}x{space.c2}",
            layer=space.L,
        )
    return trace


def layer_io(path: StridePath, space: SpaceSpec) -> List[Tuple[int, int, int, int, int]]:
    """Per layer: (in_ch, out_ch, out_h, out_w, layer index) derived from shape_trace."""
    trace = shape_trace(path, space)
    rows = []
    in_ch = space.input_ch
    for i, (h, w, ch) in enumerate(trace):
        rows.append((in_ch, ch, h, w, i + 1))
        in_ch = ch
    return rows


def is_legal(op: OperationSpec, step: StrideStep, in_ch: int, out_ch: int) -> bool:
    """Skip-connect cannot change shape; every other op is legal anywhere."""
    if op.is_skip:
        return step is StrideStep.N and in_ch == out_ch
    return True


def legal_mask(space: SpaceSpec, path: StridePath) -> List[List[bool]]:
    """Per layer, which entries of ``space.op_vocab`` are legal."""
    io = layer_io(path, space)
    return [
        [is_legal(op, step, in_ch, out_ch) for op in space.op_vocab]
        for step, (in_ch, out_ch, _, _, _) in zip(path.steps, io)
    ]


def reference_path(space: SpaceSpec) -> StridePath:
    """Conventional front-loaded path (all A steps first, then B) at typical positions."""
    positions = space.ds_positions or typical_positions(space.L, space.stages)
    return StridePath.from_stages("A" * space.a + "B" * space.b, positions, space.L)


@dataclass(frozen=True)
class Architecture:
    """A downsampling path plus one operation per layer."""

    space: SpaceSpec
    path: StridePath
    ops: Tuple[OperationSpec, ...] = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "ops", tuple(self.ops))
        if len(self.ops) != self.space.L:
            raise IllegalOperationError(
                f"Architecture needs {self.space.L} ops, got {len(self.ops)}"
            )
        io = layer_io(self.path, self.space)
        for step, op, (in_ch, out_ch, _, _, layer) in zip(self.path.steps, self.ops, io):
            if not is_legal(op, step, in_ch, out_ch):
                raise IllegalOperationError(
                    f"{op.code} is illegal at layer {layer} "
                    f"(step {step.value}, {in_ch}->{out_ch} channels)",
                    details={"layer": layer},
                )

    @classmethod
    def uniform(cls, space: SpaceSpec, path: StridePath, op: OperationSpec) -> "Architecture":
        return cls(space, path, tuple(op for _ in range(space.L)))

    @property
    def effective_depth(self) -> int:
        return sum(1 for op in self.ops if not op.is_skip)

    def __str__(self) -> str:
        return serialize_arch(self)


def serialize_arch(arch: Architecture) -> str:
    """``path=<stages>@<positions>;ops=<codes>``."""
    return f"path={arch.path};ops={','.join(op.code for op in arch.ops)}"


def _parse_int(token: str, position: int) -> int:
    if not token.isdigit():
        raise ArchParseError(f"Expected a layer index, got {token!r}", position)
    return int(token)


def parse_arch(text: str, space: SpaceSpec) -> Architecture:
    """Inverse of serialize_arch; errors carry the character position of the fault."""
    text = text.strip()
    if not text.startswith("path="):
        raise ArchParseError("Expected 'path='", 0)
    sep = text.find(";ops=")
    if sep < 0:
        raise ArchParseError("Expected ';ops='", len(text))
    path_field = text[5:sep]
    at = path_field.find("@")
    if at < 0:
        raise ArchParseError("Expected '@' between stages and positions", 5 + len(path_field))
    stages = path_field[:at]
    for i, ch in enumerate(stages):
        if ch not in ("A", "B"):
            raise ArchParseError(f"Stage must be A or B, got {ch!r}", 5 + i)

    positions: List[int] = []
    cursor = 5 + at + 1
    pos_text = path_field[at + 1:]
    if pos_text:
        for token in pos_text.split(","):
            positions.append(_parse_int(token, cursor))
            cursor += len(token) + 1
    if len(positions) != len(stages):
        raise ArchParseError(
            f"{len(stages)} stages but {len(positions)} positions", 5 + at
        )

    ops_start = sep + len(";ops=")
    codes = text[ops_start:].split(",") if text[ops_start:] else []
    offsets = []
    cursor = ops_start
    for code in codes:
        offsets.append(cursor)
        cursor += len(code) + 1
    if len(codes) != space.L:
        raise ArchParseError(f"Expected {space.L} op codes, got {len(codes)}", ops_start)
    ops = []
    for code, offset in zip(codes, offsets):
        if code not in OPS_BY_CODE:
            raise ArchParseError(f"Unknown op code {code!r}", offset)
        ops.append(OPS_BY_CODE[code])

    try:
        path = StridePath.from_stages(stages, positions, space.L)
    except SpaceValidationError as e:
        raise ArchParseError(e.message, 5) from e
    if not check_constraint(path, space):
        raise ArchParseError(f"Path {path} violates the output-size constraint", 5)
    try:
        return Architecture(space, path, tuple(ops))
    except IllegalOperationError as e:
        layer = e.details.get("layer", 1)
        raise ArchParseError(e.message, offsets[layer - 1]) from e
