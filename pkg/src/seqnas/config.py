"""Configuration and defaults for seqnas.

Run configuration is a flat ``key = value`` file with dotted keys
(``space.L``, ``run.seed``, ``reg.beta`` ...). Command-line ``--set key=value``
overrides are applied after the file. Unknown keys are rejected.
"""

import logging
import os
from pathlib import Path
from typing import Any, Dict, Iterable, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from seqnas.cost import MIN_HARD_MACS, RegularizerConfig
from seqnas.data import DataSettings
from seqnas.errors import ConfigError, SeqNASError
from seqnas.kernel.params import ADADELTA_EPS, ADADELTA_RHO
from seqnas.neural.network import TrainSettings
from seqnas.space import VOCABULARY, SpaceSpec, op_from_code, typical_positions
from seqnas.surrogate import SurrogateSpec

logger = logging.getLogger(__name__)

# Desk-scale search space
DESK_L = 8
DESK_A = 2
DESK_B = 2
DESK_INPUT_H = 16
DESK_INPUT_W = 32
DESK_C2 = 8
DESK_CHANNELS = [8, 16, 16, 32]

# Search schedule
STEP1_EPOCHS = 5
STEP2_WARMUP_EPOCHS = 1
STEP2_EPOCHS = 2
RANDOM_CANDIDATES = 10
SURROGATE_RESTARTS = 8
EXHAUSTIVE_LIMIT = 4096
DEFAULT_BETAS = (0.0, 0.3, 0.6, 0.9)
DEFAULT_OUTPUT_DIR = "runs/latest"

# Thread cap for concurrent step-1 candidates
THREADS_ENV_VAR = "SEQNAS_THREADS"


def get_thread_cap() -> int:
    """Step-1 worker threads from SEQNAS_THREADS, defaulting to the CPU count."""
    raw = os.environ.get(THREADS_ENV_VAR)
    if raw is None or raw.strip() == "":
        return max(1, os.cpu_count() or 1)
    try:
        value = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV_VAR} must be an integer, got {raw!r}") from None
    if value < 1:
        raise ConfigError(f"{THREADS_ENV_VAR} must be at least 1, got {value}")
    return value


def _split_list(value: Any) -> Any:
    if isinstance(value, str):
        return [item.strip() for item in value.split(",") if item.strip()]
    return value


def _none_if_blank(value: Any) -> Any:
    if isinstance(value, str) and value.strip().lower() in ("", "none"):
        return None
    return value


class Section(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class SpaceSection(Section):
    L: int = DESK_L
    a: int = DESK_A
    b: int = DESK_B
    input_h: int = DESK_INPUT_H
    input_w: int = DESK_INPUT_W
    input_ch: int = 1
    c1: int = 1
    c2: int = DESK_C2
    channels: List[int] = DESK_CHANNELS
    ops: List[str] = [op.code for op in VOCABULARY]
    ds_positions: str = "free"

    split_lists = field_validator("channels", "ops", mode="before")(_split_list)

    def to_space(self) -> SpaceSpec:
        ops = tuple(op_from_code(code) for code in self.ops)
        text = self.ds_positions.strip().lower()
        if text == "free":
            positions = None
        elif text == "typical":
            positions = typical_positions(self.L, self.a + self.b)
        else:
            try:
                positions = tuple(int(p) for p in text.split(","))
            except ValueError:
                raise ConfigError(
                    f"ds_positions must be free, typical or a comma list, got {self.ds_positions!r}"
                ) from None
        return SpaceSpec(
            L=self.L,
            a=self.a,
            b=self.b,
            input_h=self.input_h,
            input_w=self.input_w,
            c1=self.c1,
            c2=self.c2,
            channels=tuple(self.channels),
            op_vocab=ops,
            ds_positions=positions,
            input_ch=self.input_ch,
        )


class RunSection(Section):
    backend: Literal["surrogate", "neural"] = "surrogate"
    seed: int = 0
    step1_epochs: int = STEP1_EPOCHS
    step2_warmup_epochs: int = STEP2_WARMUP_EPOCHS
    step2_epochs: int = STEP2_EPOCHS
    budget_macs: Optional[int] = None
    output_dir: str = DEFAULT_OUTPUT_DIR
    step1_paths: Literal["typical", "all"] = "typical"
    restarts: int = SURROGATE_RESTARTS
    exhaustive_limit: int = EXHAUSTIVE_LIMIT
    random_candidates: int = RANDOM_CANDIDATES
    threads: Optional[int] = None

    blank_to_none = field_validator("budget_macs", "threads", mode="before")(_none_if_blank)


class RegSection(Section):
    beta: float = 0.6
    G: Optional[float] = None

    blank_to_none = field_validator("G", mode="before")(_none_if_blank)


class DataSection(Section):
    n: int = 1000
    noise: float = 0.1
    jitter: Optional[int] = None
    K: int = 10
    glyph_size: Optional[int] = None
    val_fraction: float = 0.2
    seed: int = 0

    blank_to_none = field_validator("jitter", "glyph_size", mode="before")(_none_if_blank)


class TrainSection(Section):
    batch: int = 16
    lr: float = 1.0
    arch_lr: float = 1.0
    rho: float = ADADELTA_RHO
    eps: float = ADADELTA_EPS
    temperature: float = 1.0
    alpha_mode: Literal["mixture", "sampled"] = "mixture"


class SurrogateSection(Section):
    seed: int = 0
    target_macs: Optional[int] = None
    w_cost: float = 0.1
    w_path: float = 0.2
    affinity_scale: float = 0.02

    blank_to_none = field_validator("target_macs", mode="before")(_none_if_blank)


class RunConfig(Section):
    """Everything a run needs; resolved copies have no unset derived values."""

    space: SpaceSection = Field(default_factory=SpaceSection)
    run: RunSection = Field(default_factory=RunSection)
    reg: RegSection = Field(default_factory=RegSection)
    data: DataSection = Field(default_factory=DataSection)
    train: TrainSection = Field(default_factory=TrainSection)
    surrogate: SurrogateSection = Field(default_factory=SurrogateSection)


def parse_kv_text(text: str, source: str = "<config>") -> Dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    values: Dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        values[key] = value
    return values


def parse_overrides(items: Iterable[str]) -> Dict[str, str]:
    values: Dict[str, str] = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"Override must look like key=value, got {item!r}")
        key, value = (part.strip() for part in item.split("=", 1))
        values[key] = value
    return values


def _nest(flat: Dict[str, str]) -> Dict[str, Dict[str, str]]:
    nested: Dict[str, Dict[str, str]] = {}
    for key, value in flat.items():
        if key.count(".") != 1:
            raise ConfigError(
                f"Unknown config key {key!r}",
                suggestion="Keys look like section.name, e.g. run.seed or reg.beta.",
            )
        section, name = key.split(".")
        nested.setdefault(section, {})[name] = value
    return nested


def _validation_message(error: ValidationError) -> str:
    parts = []
    for item in error.errors():
        key = ".".join(str(p) for p in item["loc"])
        parts.append(f"{key}: {item['msg']}")
    return "; ".join(parts)


def config_from_flat(flat: Dict[str, str]) -> RunConfig:
    try:
        return RunConfig.model_validate(_nest(flat))
    except ValidationError as e:
        raise ConfigError(f"Invalid configuration: {_validation_message(e)}") from None


def load_config(path: Optional[Path] = None, overrides: Iterable[str] = ()) -> RunConfig:
    """Read a config file (optional) and apply overrides on top."""
    flat: Dict[str, str] = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"Config file not found: {path}")
        flat.update(parse_kv_text(path.read_text(), str(path)))
    flat.update(parse_overrides(overrides))
    return config_from_flat(flat)


SPACE_FILE_KEYS = set(SpaceSection.model_fields)


def load_space_file(path: Path) -> SpaceSpec:
    """A bare space definition with undotted keys (L, a, b, input_h, ...)."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"Space file not found: {path}")
    flat = parse_kv_text(path.read_text(), str(path))
    unknown = sorted(set(flat) - SPACE_FILE_KEYS)
    if unknown:
        raise ConfigError(f"Unknown space keys in {path}: {', '.join(unknown)}")
    try:
        section = SpaceSection.model_validate(flat)
    except ValidationError as e:
        raise ConfigError(f"Invalid space file {path}: {_validation_message(e)}") from None
    return section.to_space()


def resolve(config: RunConfig) -> RunConfig:
    """Fill derived defaults: budget, regularizer pivot and surrogate target."""
    from seqnas.search.engine import default_budget, step1_paths

    space = config.space.to_space()
    run = config.run
    budget = run.budget_macs
    if budget is None:
        budget = default_budget(space, step1_paths(space, run.step1_paths))
    G = config.reg.G if config.reg.G is not None else max(float(budget), MIN_HARD_MACS)
    target = config.surrogate.target_macs
    if target is None:
        target = max(1, budget // 2)
    jitter = config.data.jitter
    if jitter is None:
        jitter = min(1, 2**space.a // 2)
    glyph_size = config.data.glyph_size or 2**space.a
    return config.model_copy(
        update={
            "run": run.model_copy(update={"budget_macs": int(budget)}),
            "reg": config.reg.model_copy(update={"G": G}),
            "surrogate": config.surrogate.model_copy(update={"target_macs": int(target)}),
            "data": config.data.model_copy(update={"jitter": jitter, "glyph_size": glyph_size}),
        }
    )


def _format_value(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, (list, tuple)):
        return ",".join(str(v) for v in value)
    return str(value)


def flatten(config: RunConfig) -> List[Tuple[str, str]]:
    rows = []
    for section, values in config.model_dump().items():
        for key, value in values.items():
            rows.append((f"{section}.{key}", _format_value(value)))
    return sorted(rows)


def snapshot(config: RunConfig) -> str:
    """Sorted flat ``key = value`` text; loading it back reproduces the run."""
    return "".join(f"{key} = {value}\n" for key, value in flatten(config))


def _worker_threads(requested: Optional[int]) -> int:
    cap = get_thread_cap()
    return cap if requested is None else max(1, min(requested, cap))


def to_search_run(config: RunConfig):
    """Build the engine's SearchRun from a resolved config."""
    from seqnas.search.engine import SearchRun

    if config.run.budget_macs is None or config.reg.G is None:
        config = resolve(config)
    try:
        return SearchRun(
            space=config.space.to_space(),
            backend=config.run.backend,
            step1_epochs=config.run.step1_epochs,
            step2_warmup_epochs=config.run.step2_warmup_epochs,
            step2_epochs=config.run.step2_epochs,
            reg=RegularizerConfig(beta=config.reg.beta, G=config.reg.G),
            budget_macs=config.run.budget_macs,
            seed=config.run.seed,
            output_dir=Path(config.run.output_dir),
            surrogate=SurrogateSpec(**config.surrogate.model_dump()),
            train=TrainSettings(**config.train.model_dump()),
            data=DataSettings(**config.data.model_dump()),
            step1_paths=config.run.step1_paths,
            restarts=config.run.restarts,
            exhaustive_limit=config.run.exhaustive_limit,
            random_candidates=config.run.random_candidates,
            threads=_worker_threads(config.run.threads),
        )
    except SeqNASError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"Invalid configuration: {e}") from e
