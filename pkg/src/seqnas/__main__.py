"""CLI entry point for seqnas."""

import functools
import logging
import sys
from pathlib import Path
from typing import List, Optional, Tuple

import click

from seqnas import __version__, report
from seqnas.config import (
    DEFAULT_BETAS,
    RunConfig,
    load_config,
    load_space_file,
    resolve,
    snapshot,
    to_search_run,
)
from seqnas.cost import arch_cost
from seqnas.data import gen_dataset, load_dataset, make_glyphs, save_dataset
from seqnas.errors import ConfigError, SeqNASError
from seqnas.neural.network import TrainSettings, build_fixed, train_fixed
from seqnas.persistence import RESULT_FILE, TIMING_FILE, RunArtifacts, dumps
from seqnas.search.engine import (
    SearchRun,
    beta_sweep,
    decoupling_check,
    make_backend,
    random_search,
    step1_path_search,
    two_step_search,
)
from seqnas.space import (
    MB5E6,
    Architecture,
    SpaceSpec,
    StridePath,
    check_constraint,
    count_space,
    enumerate_paths,
    parse_arch,
    reference_path,
)

# Configure logging
logging.basicConfig(
    level=logging.INFO,
    format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
)
logger = logging.getLogger(__name__)


def reports_errors(func):
    """Turn seqnas errors into a red message and the error's exit code."""

    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except SeqNASError as e:
            click.echo(click.style(f"✗ [{e.code}] {e.message}", fg="red"), err=True)
            if e.suggestion:
                click.echo(click.style(f"  {e.suggestion}", fg="yellow"), err=True)
            sys.exit(e.exit_code)

    return wrapper


config_option = click.option(
    "--config",
    "config_path",
    type=click.Path(path_type=Path),
    help="Flat key = value run configuration",
)
set_option = click.option(
    "--set",
    "overrides",
    multiple=True,
    metavar="KEY=VALUE",
    help="Override a config key (repeatable)",
)


def _load(config_path: Optional[Path], overrides: Tuple[str, ...], **extra) -> RunConfig:
    items: List[str] = list(overrides)
    items.extend(f"{key}={value}" for key, value in extra.items() if value is not None)
    return load_config(config_path, items)


def _read_arch_text(value: str) -> str:
    path = Path(value)
    if path.is_file():
        return path.read_text().strip()
    return value


def parse_path(text: str, space: SpaceSpec) -> StridePath:
    """``reference`` or ``<stages>@<positions>`` such as ``ABABB@1,4,7,10,13``."""
    if text.strip().lower() == "reference":
        return reference_path(space)
    stages, sep, positions = text.strip().partition("@")
    if not sep:
        raise ConfigError(f"Path must look like AB@1,4 or 'reference', got {text!r}")
    try:
        indices = [int(p) for p in positions.split(",")] if positions else []
    except ValueError:
        raise ConfigError(f"Path positions must be integers, got {positions!r}") from None
    path = StridePath.from_stages(stages, indices, space.L)
    if not check_constraint(path, space):
        raise ConfigError(f"Path {text} violates the output-size constraint of the space")
    return path


def _write_result(run: SearchRun, result) -> None:
    payload = result.to_dict()
    artifacts = run.artifacts()
    if artifacts is not None:
        artifacts.write_json(RESULT_FILE, payload)
        artifacts.write_json(TIMING_FILE, {"wall_time": result.wall_time})
    report.show(report.scores_table(result.scores))
    report.show(report.result_panel(payload))
    click.echo(dumps(payload), nl=False)


def _prepare_run(config: RunConfig) -> SearchRun:
    config = resolve(config)
    run = to_search_run(config)
    RunArtifacts(run.output_dir).write_snapshot(snapshot(config))
    return run


@click.group()
@click.version_option(version=__version__)
@click.option("--verbose", is_flag=True, help="Debug logging")
def cli(verbose: bool):
    """seqnas: two-step architecture search for sequence-recognition backbones."""
    if verbose:
        logging.getLogger().setLevel(logging.DEBUG)


@cli.command(name="enumerate")
@click.option("--L", "L", type=int, help="Number of layers")
@click.option("--a", "a", type=int, help="Number of (2,2) steps")
@click.option("--b", "b", type=int, help="Number of (2,1) steps")
@click.option("--space", "space_path", type=click.Path(path_type=Path), help="Space file")
@click.option("--typical", is_flag=True, help="Only stage-aligned positions")
@click.option("--list", "list_paths", is_flag=True, help="Print every path instead of the count")
@click.option("--total", is_flag=True, help="Also print the architecture count")
@reports_errors
def enumerate_cmd(
    L: Optional[int],
    a: Optional[int],
    b: Optional[int],
    space_path: Optional[Path],
    typical: bool,
    list_paths: bool,
    total: bool,
):
    """Count or list the downsampling paths of a space."""
    if space_path is not None:
        space = load_space_file(space_path)
    elif None in (L, a, b):
        raise ConfigError("Give --L, --a and --b, or --space", suggestion="e.g. --L 15 --a 2 --b 3")
    else:
        space = SpaceSpec.from_counts(L, a, b)
    if typical:
        space = space.typical()
    if list_paths:
        for path in enumerate_paths(space):
            click.echo("".join(step.value for step in path.steps))
        return
    path_count, arch_count = count_space(space)
    click.echo(str(path_count))
    if total:
        click.echo(str(arch_count))


@cli.command()
@click.argument("arch")
@click.option("--space", "space_path", type=click.Path(path_type=Path), help="Space file")
@config_option
@set_option
@click.option("--compare", is_flag=True, help="Show the all-mb5e6 cost on the same path")
@reports_errors
def cost(
    arch: str,
    space_path: Optional[Path],
    config_path: Optional[Path],
    overrides: Tuple[str, ...],
    compare: bool,
):
    """Print the cost report of ARCH (text or a file holding it) as JSON."""
    if space_path is not None:
        space = load_space_file(space_path)
    else:
        space = _load(config_path, overrides).space.to_space()
    parsed = parse_arch(_read_arch_text(arch), space)
    cost_report = arch_cost(parsed)
    if compare:
        largest = arch_cost(Architecture.uniform(space, parsed.path, MB5E6))
        report.show(report.cost_table({"arch": cost_report, "mb5e6": largest}))
    click.echo(dumps(cost_report.to_dict()), nl=False)


@cli.command()
@config_option
@set_option
@click.option("--seed", type=int, help="Generation seed (data.seed)")
@click.option("--n", type=int, help="Number of samples (data.n)")
@click.option("--noise", type=float, help="Noise amplitude (data.noise)")
@click.option(
    "--out", type=click.Path(path_type=Path), default=Path("dataset.bin"), show_default=True
)
@reports_errors
def gendata(
    config_path: Optional[Path],
    overrides: Tuple[str, ...],
    seed: Optional[int],
    n: Optional[int],
    noise: Optional[float],
    out: Path,
):
    """Generate a synthetic dataset file."""
    config = resolve(
        _load(config_path, overrides, **{"data.seed": seed, "data.n": n, "data.noise": noise})
    )
    space, data = config.space.to_space(), config.data
    glyphs = make_glyphs(data.K, data.glyph_size, data.seed)
    dataset = gen_dataset(space, glyphs, data.n, data.noise, data.seed, data.jitter)
    save_dataset(out, dataset)
    click.echo(click.style(f"✓ Wrote {len(dataset)} samples to {out}", fg="green"), err=True)


@cli.command(name="eval")
@click.option("--arch", "arch_text", required=True, help="Architecture text or file")
@click.option("--data", "data_path", required=True, type=click.Path(path_type=Path))
@config_option
@set_option
@click.option("--epochs", type=int, help="Training epochs (default run.step1_epochs)")
@click.option("--seed", type=int, help="Training seed (default run.seed)")
@reports_errors
def eval_cmd(
    arch_text: str,
    data_path: Path,
    config_path: Optional[Path],
    overrides: Tuple[str, ...],
    epochs: Optional[int],
    seed: Optional[int],
):
    """Train a fixed architecture on a dataset file and print the evaluation report."""
    config = _load(config_path, overrides, **{"run.seed": seed})
    space = config.space.to_space()
    dataset = load_dataset(data_path)
    dataset.check_space(space)
    arch = parse_arch(_read_arch_text(arch_text), space)
    epochs = config.run.step1_epochs if epochs is None else epochs
    net = build_fixed(arch, config.run.seed, num_classes=dataset.K)
    settings = TrainSettings(**config.train.model_dump())
    result = train_fixed(net, dataset, epochs, settings.batch, config.run.seed, settings=settings)
    click.echo(dumps(result.to_dict()), nl=False)


@cli.command()
@config_option
@set_option
@click.option("--backend", type=click.Choice(["surrogate", "neural"]), help="run.backend")
@click.option("--seed", type=int, help="run.seed")
@click.option("--output-dir", type=click.Path(path_type=Path), help="run.output_dir")
@click.option("--step1-only", is_flag=True, help="Only rank the downsampling paths")
@click.option("--step2-only", is_flag=True, help="Only search ops on --path")
@click.option("--path", "path_text", help="Fixed path, e.g. ABABB@1,4,7,10,13 or 'reference'")
@reports_errors
def search(
    config_path: Optional[Path],
    overrides: Tuple[str, ...],
    backend: Optional[str],
    seed: Optional[int],
    output_dir: Optional[Path],
    step1_only: bool,
    step2_only: bool,
    path_text: Optional[str],
):
    """Two-step search: rank paths, then search one op per layer."""
    if step1_only and (step2_only or path_text):
        raise ConfigError("--step1-only cannot be combined with --step2-only or --path")
    config = _load(
        config_path,
        overrides,
        **{"run.backend": backend, "run.seed": seed, "run.output_dir": output_dir},
    )
    run = _prepare_run(config)

    if step1_only:
        path, scores = step1_path_search(run, make_backend(run), run.artifacts())
        report.show(report.scores_table(scores, title="Step 1"))
        payload = {"best_path": str(path), "scores": [s.to_dict() for s in scores]}
        click.echo(dumps(payload), nl=False)
        return

    path = None
    if step2_only or path_text:
        path = parse_path(path_text or "reference", run.space)
    _write_result(run, two_step_search(run, path=path))


@cli.command(name="random")
@config_option
@set_option
@click.option("--backend", type=click.Choice(["surrogate", "neural"]), help="run.backend")
@click.option("--seed", type=int, help="run.seed")
@click.option("--output-dir", type=click.Path(path_type=Path), help="run.output_dir")
@click.option("--n", "n_candidates", type=int, help="Candidates (run.random_candidates)")
@click.option("--epochs", type=int, help="Epochs per candidate (default run.step1_epochs)")
@reports_errors
def random_cmd(
    config_path: Optional[Path],
    overrides: Tuple[str, ...],
    backend: Optional[str],
    seed: Optional[int],
    output_dir: Optional[Path],
    n_candidates: Optional[int],
    epochs: Optional[int],
):
    """Random-search baseline under the same budget."""
    config = _load(
        config_path,
        overrides,
        **{
            "run.backend": backend,
            "run.seed": seed,
            "run.output_dir": output_dir,
            "run.random_candidates": n_candidates,
        },
    )
    run = _prepare_run(config)
    _write_result(run, random_search(run, epochs=epochs))


@cli.command()
@config_option
@set_option
@click.option("--backend", type=click.Choice(["surrogate", "neural"]), help="run.backend")
@click.option("--seed", type=int, help="run.seed")
@click.option("--betas", default=",".join(f"{b:g}" for b in DEFAULT_BETAS), show_default=True)
@click.option("--path", "path_text", default="reference", show_default=True)
@reports_errors
def sweep(
    config_path: Optional[Path],
    overrides: Tuple[str, ...],
    backend: Optional[str],
    seed: Optional[int],
    betas: str,
    path_text: str,
):
    """Run step 2 once per regularizer exponent on a fixed path."""
    try:
        values = [float(b) for b in betas.split(",")]
    except ValueError:
        raise ConfigError(f"--betas must be a comma list of numbers, got {betas!r}") from None
    config = resolve(_load(config_path, overrides, **{"run.backend": backend, "run.seed": seed}))
    run = to_search_run(config)
    rows = beta_sweep(run, parse_path(path_text, run.space), values)
    report.show(report.sweep_table(rows))
    click.echo(dumps(rows), nl=False)


@cli.command()
@config_option
@set_option
@click.option("--seed", type=int, help="run.seed and surrogate.seed")
@reports_errors
def decouple(config_path: Optional[Path], overrides: Tuple[str, ...], seed: Optional[int]):
    """Check whether the default-op path ranking picks the globally optimal path."""
    config = resolve(
        _load(config_path, overrides, **{"run.seed": seed, "surrogate.seed": seed})
    )
    result = decoupling_check(to_search_run(config))
    style = "green" if result.agree else "yellow"
    click.echo(click.style(f"agree: {result.agree}", fg=style), err=True)
    click.echo(dumps(result.to_dict()), nl=False)


def main():
    """Main entry point."""
    cli()


if __name__ == "__main__":
    main()
