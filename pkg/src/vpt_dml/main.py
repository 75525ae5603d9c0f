"""
Main CLI application using Typer
"""

from __future__ import annotations

import csv
import logging
from collections.abc import Iterator
from contextlib import contextmanager
from pathlib import Path
from typing import Annotated, Optional

import typer
from rich.console import Console
from rich.panel import Panel
from rich.table import Table

from .checkpoint import inspect_checkpoint, load_checkpoint
from .config import (
    COMPARE_METHODS,
    ConfigurationError,
    ExperimentConfig,
    create_default_config_file,
    load_config,
)
from .gradcheck import run_suite
from .metrics import report_table, write_report_csv
from .trainer import (
    CHECKPOINT_NAME,
    Experiment,
    Trainer,
    TrainingAborted,
    bench,
    compare,
    pretrain,
    resume_step,
    save_backbone,
)
from .utils import DMLError, format_bytes, format_count, setup_logging

app = typer.Typer(
    name="dml",
    help="Prompt-tuned deep metric learning with semantic proxies",
    rich_markup_mode="rich",
)
console = Console()
logger = logging.getLogger(__name__)

EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_ABORTED = 3

ConfigOption = Annotated[
    Optional[Path], typer.Option("--config", "-c", help="Experiment config (YAML or JSON)")
]
SeedOption = Annotated[Optional[int], typer.Option("--seed", help="Override run.seed")]


@contextmanager
def _cli_errors() -> Iterator[None]:
    """Map package errors to rich panels and exit codes."""
    try:
        yield
    except ConfigurationError as e:
        console.print(Panel.fit(f"[bold red]Configuration error[/bold red]\n{e}"))
        raise typer.Exit(EXIT_CONFIG)
    except TrainingAborted as e:
        console.print(Panel.fit(f"[bold red]Training aborted[/bold red]\n{e}"))
        raise typer.Exit(EXIT_ABORTED)
    except DMLError as e:
        console.print(Panel.fit(f"[bold red]Error[/bold red]\n{e}"))
        raise typer.Exit(EXIT_ERROR)


def _prepare(config_path: Path | None, seed: int | None) -> ExperimentConfig:
    config = load_config(config_path)
    if seed is not None:
        config.run.seed = seed
    config.validate()
    setup_logging(config.logging)
    return config


def _methods(value: str) -> list[str]:
    methods = [m.strip() for m in value.split(",") if m.strip()]
    if not methods:
        raise ConfigurationError("--methods needs at least one method name")
    return methods


@app.command()
def train(
    config_path: ConfigOption = None,
    seed: SeedOption = None,
    resume: Annotated[
        Optional[Path], typer.Option("--resume", help="Continue from a training checkpoint")
    ] = None,
    progress: Annotated[bool, typer.Option("--progress/--no-progress")] = True,
) -> None:
    """Train one configuration; writes metrics CSVs and a checkpoint"""
    with _cli_errors():
        config = _prepare(config_path, seed)
        experiment = Experiment.build(config)
        count = experiment.param_count()
        console.print(Panel.fit(
            f"[bold]{config.peft.method}[/bold]"
            f"{' + semantic proxies' if config.proxy.enabled else ''}\n"
            f"Tunable parameters: {format_count(count.tunable)} of "
            f"{format_count(count.total)} ({100 * count.tunable_fraction:.2f}%)"
        ))
        start = resume_step(experiment, resume) if resume is not None else 0
        output_dir = Path(config.run.output_dir)
        summary = Trainer(experiment, output_dir, console).run(start, show_progress=progress)
        console.print(report_table(summary.final_report, title=f"Step {config.run.steps}"))
        console.print(f"Checkpoint: {output_dir / CHECKPOINT_NAME}")


@app.command(name="eval")
def evaluate_checkpoint(
    checkpoint: Annotated[Path, typer.Option("--checkpoint", help="Training checkpoint")],
    config_path: ConfigOption = None,
    seed: SeedOption = None,
    output: Annotated[
        Optional[Path], typer.Option("--output", "-o", help="Write the report as CSV")
    ] = None,
) -> None:
    """Evaluate a checkpoint on the eval split"""
    with _cli_errors():
        config = _prepare(config_path, seed)
        experiment = Experiment.build(config)
        experiment.load_state_dict(load_checkpoint(checkpoint))
        report = experiment.evaluate()
        console.print(report_table(report, title=str(checkpoint)))
        if output is not None:
            write_report_csv(output, report)


@app.command(name="compare")
def compare_methods(
    config_path: ConfigOption = None,
    seed: SeedOption = None,
    methods: Annotated[
        str, typer.Option("--methods", "-m", help=f"Comma-separated: {', '.join(COMPARE_METHODS)}")
    ] = ",".join(COMPARE_METHODS),
    output: Annotated[
        Optional[Path], typer.Option("--output", "-o", help="Write the table as CSV")
    ] = None,
) -> None:
    """Train every method on identical data and seed, then tabulate"""
    with _cli_errors():
        config = _prepare(config_path, seed)
        rows = compare(config, _methods(methods), Path(config.run.output_dir))
        table = Table(title="Method comparison")
        for column in ("method", "tunable", "fraction", "peak resident", "R@1", "MAP@R",
                       "step ms"):
            table.add_column(column, justify="left" if column == "method" else "right")
        for row in rows:
            table.add_row(
                row.method, format_count(row.tunable_params),
                f"{100 * row.tunable_fraction:.2f}%", format_bytes(row.peak_resident_bytes),
                f"{100 * row.recall_at_1:.2f}", f"{100 * row.map_at_r:.2f}",
                f"{row.step_ms:.1f}",
            )
        console.print(table)
        if output is not None:
            with open(output, "w", newline="", encoding="utf-8") as f:
                writer = csv.writer(f)
                writer.writerow(["method", "tunable_params", "tunable_fraction",
                                 "peak_resident_bytes", "R@1", "MAP@R", "step_ms"])
                for row in rows:
                    writer.writerow([
                        row.method, row.tunable_params, f"{row.tunable_fraction:.8f}",
                        row.peak_resident_bytes, f"{row.recall_at_1:.6f}",
                        f"{row.map_at_r:.6f}", f"{row.step_ms:.3f}",
                    ])


@app.command()
def gradcheck(
    seed: Annotated[int, typer.Option("--seed", help="Seed for inputs and probes")] = 0,
) -> None:
    """Compare every backward rule against central differences"""
    results = run_suite(seed)
    table = Table(title="Gradient check")
    table.add_column("item")
    table.add_column("entries", justify="right")
    table.add_column("max rel. error", justify="right")
    table.add_column("", justify="center")
    for result in results:
        mark = "[green]ok[/green]" if result.passed else "[red]FAIL[/red]"
        table.add_row(result.name, str(result.entries), f"{result.max_rel_error:.2e}", mark)
    console.print(table)
    failed = [r.name for r in results if not r.passed]
    if failed:
        console.print(Panel.fit(
            f"[bold red]{len(failed)} of {len(results)} items failed[/bold red]"
        ))
        raise typer.Exit(EXIT_ERROR)
    console.print(f"[green]All {len(results)} items within {results[0].tolerance:g}[/green]")


@app.command()
def inspect(
    checkpoint: Annotated[Path, typer.Argument(help="Checkpoint file")],
) -> None:
    """List every tensor in a checkpoint"""
    with _cli_errors():
        entries = inspect_checkpoint(checkpoint)
        table = Table(title=str(checkpoint))
        table.add_column("name")
        table.add_column("shape", justify="right")
        table.add_column("dtype")
        table.add_column("bytes", justify="right")
        for entry in entries:
            table.add_row(entry.name, "×".join(str(d) for d in entry.shape) or "scalar",
                          entry.dtype, str(entry.nbytes))
        console.print(table)
        console.print(f"{len(entries)} tensors, "
                      f"{format_bytes(sum(e.nbytes for e in entries))}")


@app.command(name="pretrain")
def pretrain_backbone(
    out: Annotated[Path, typer.Option("--out", help="Where to write the backbone checkpoint")],
    config_path: ConfigOption = None,
    seed: SeedOption = None,
) -> None:
    """Pretrain the backbone as a classifier on the training split"""
    with _cli_errors():
        config = _prepare(config_path, seed)
        model, losses = pretrain(config)
        save_backbone(model, out)
        final = f"{losses[-1]:.4f}" if losses else "n/a"
        console.print(Panel.fit(
            f"Pretrained {len(losses)} steps, final loss {final}\nBackbone: {out}"
        ))


@app.command(name="bench")
def bench_methods(
    config_path: ConfigOption = None,
    seed: SeedOption = None,
    methods: Annotated[str, typer.Option("--methods", "-m")] = "linear_probe,vpt,full",
    steps: Annotated[int, typer.Option("--steps", min=1)] = 100,
) -> None:
    """Time forward, backward and update per method"""
    with _cli_errors():
        config = _prepare(config_path, seed)
        rows = bench(config, _methods(methods), steps)
        table = Table(title=f"Step time over {steps} steps")
        table.add_column("method")
        table.add_column("median ms", justify="right")
        table.add_column("mean ms", justify="right")
        for row in rows:
            table.add_row(row.method, f"{row.median_ms:.2f}", f"{row.mean_ms:.2f}")
        console.print(table)


@app.command(name="init-config")
def init_config(
    path: Annotated[Path, typer.Argument(help="Where to write the config")] = Path(
        "config/config.yaml"
    ),
    force: Annotated[bool, typer.Option("--force", help="Overwrite an existing file")] = False,
) -> None:
    """Write the commented default configuration"""
    if path.exists() and not force:
        console.print(f"[yellow]{path} already exists (use --force to overwrite)[/yellow]")
        raise typer.Exit(EXIT_ERROR)
    with _cli_errors():
        create_default_config_file(path)
    console.print(f"Created {path}")


if __name__ == "__main__":
    app()
