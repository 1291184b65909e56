"""Main CLI entry point for the CDPR simulator."""

import logging
import sys
from pathlib import Path
from typing import Optional, Tuple

import click
from rich.console import Console

from . import __version__
from .artifacts import write_run_artifacts
from .config import configure_logging, load_runtime_config, parse_scenario, schema_table
from .constants import EXIT_IO, EXIT_SIMULATION, EXIT_VALIDATION
from .errors import CdprError, ScenarioParseError, ScenarioValidationError
from .plotting import PLOT_KINDS, plot_command
from .sim import run_scenario

console = Console()
logger = logging.getLogger(__name__)


def _fail(message: str, code: int) -> None:
    console.print(f"[red]❌ {message}[/red]")
    sys.exit(code)


@click.group(invoke_without_command=True)
@click.option(
    "--version",
    is_flag=True,
    help="Show version information",
)
@click.option(
    "--debug",
    is_flag=True,
    help="Enable debug logging (also CDPR_SIM_DEBUG)",
)
@click.option(
    "--threads",
    type=click.IntRange(min=1),
    default=None,
    help="Worker threads for the per-mode stages (also CDPR_SIM_THREADS)",
)
@click.pass_context
def main(
    ctx: click.Context, version: bool, debug: Optional[bool], threads: Optional[int]
) -> None:
    """CDPR simulator - failure identification and recovery experiments."""
    if version:
        console.print(f"cdpr-sim (v{__version__})")
        return

    ctx.ensure_object(dict)
    try:
        runtime = load_runtime_config(threads=threads, debug=debug)
    except ValueError as e:
        _fail(f"Configuration error: {e}", EXIT_VALIDATION)
    ctx.obj["runtime"] = runtime
    configure_logging(runtime.debug)
    if ctx.invoked_subcommand is None:
        console.print(ctx.get_help())


@main.command()
@click.argument("scenario_path", type=click.Path(dir_okay=False, path_type=Path))
@click.option(
    "--out",
    "out_dir",
    required=True,
    type=click.Path(file_okay=False, path_type=Path),
    help="Output directory for log.csv and header.json",
)
@click.option("--seed", type=click.IntRange(0, 2**64 - 1), help="Override run.seed")
@click.option("--duration", type=float, help="Override run.duration, s")
@click.option("--plots", is_flag=True, help="Also render every plot into <out>/plots")
@click.pass_context
def run(
    ctx: click.Context,
    scenario_path: Path,
    out_dir: Path,
    seed: Optional[int],
    duration: Optional[float],
    plots: bool,
) -> None:
    """Simulate a scenario and write its artifacts."""
    runtime = ctx.obj["runtime"]
    try:
        scenario = parse_scenario(scenario_path).with_overrides(seed, duration)
    except OSError as e:
        _fail(f"Cannot read scenario: {e}", EXIT_IO)
    except (ScenarioParseError, ScenarioValidationError) as e:
        _fail(f"Invalid scenario: {e}", EXIT_VALIDATION)

    if runtime.debug:
        console.print(f"[cyan]DEBUG: running with {runtime.threads} thread(s)[/cyan]")
    executor = runtime.executor()
    try:
        records = run_scenario(scenario, executor)
    except CdprError as e:
        _fail(f"Simulation failed: {type(e).__name__}: {e}", EXIT_SIMULATION)
    finally:
        if executor is not None:
            executor.shutdown()

    try:
        artifacts = write_run_artifacts(records, scenario, out_dir)
        if plots:
            plot_command(artifacts.log_path, PLOT_KINDS, out_dir / "plots")
    except OSError as e:
        _fail(f"Cannot write artifacts: {e}", EXIT_IO)
    console.print(f"[green]✅ Wrote {len(records)} records to {artifacts.log_path}[/green]")


@main.command()
@click.argument("log_path", type=click.Path(dir_okay=False, path_type=Path))
@click.option(
    "--kind",
    "kinds",
    multiple=True,
    type=click.Choice(PLOT_KINDS),
    help="Plot to render (repeatable); default all",
)
@click.option(
    "--out",
    "out_dir",
    required=True,
    type=click.Path(file_okay=False, path_type=Path),
    help="Directory for the SVG files",
)
def plot(log_path: Path, kinds: Tuple[str, ...], out_dir: Path) -> None:
    """Render SVG plots from a log.csv."""
    try:
        written = plot_command(log_path, kinds or PLOT_KINDS, out_dir)
    except OSError as e:
        _fail(f"Cannot read or write plot files: {e}", EXIT_IO)
    except (CdprError, ValueError) as e:
        _fail(f"Invalid log: {e}", EXIT_VALIDATION)
    for path in written:
        console.print(f"[green]✅ Saved {path}[/green]")


@main.command()
def schema() -> None:
    """Show every scenario key with its default."""
    console.print(schema_table())


@main.command()
def version() -> None:
    """Show version information."""
    console.print(f"cdpr-sim (v{__version__})")


if __name__ == "__main__":
    main()
