#!/usr/bin/env python3
"""ODESig CLI - reproducible latent-ODE runs on irregular multi-ROI signals."""

import json
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import click
from rich.console import Console
from rich.table import Table

# Add src to path for development
sys.path.insert(0, str(Path(__file__).parent.parent))

from src.datagen import DataGenError, ParseError
from src.evalnet import EXPERIMENT_KINDS, SWEEP_PARAMETERS, EvaluationError, ExperimentConfigError
from src.model.diffmath import DiffMathError
from src.model.encoder import EncoderError
from src.model.latentode import SolverError
from src.model.relgraphs import GraphError
from src.odesig import ConfigError, OdeSig
from src.training import CompatibilityError, TrainingDivergedError, TrainingError
from src.utils import format_seconds

console = Console()
err_console = Console(stderr=True)

VARIANTS = ("ours", "ours-p", "ours-t", "ours-s")


def progress_callback(message: str):
    """Print progress messages."""
    console.print(f"[dim]→ {message}[/dim]", highlight=False)


def json_progress_event(stage: str, message: str, progress: int = -1, output_path: str | None = None):
    """Emit a JSON progress event to stdout."""
    event = {
        "stage": stage,
        "message": message,
        "progress": progress,
        "timestamp": time.time(),
    }
    if output_path:
        event["output_path"] = output_path
    print(json.dumps(event), flush=True)


def make_json_progress_callback():
    """Create a progress callback that emits JSON events."""
    stages = {
        "Generating": "generate",
        "Training": "train",
        "Epoch": "train",
        "Reconstructing": "reconstruct",
        "Seed": "evaluate",
        "Sweep": "sweep",
        "Timing": "runtime",
        "scaling": "runtime",
        "warning": "warning",
    }

    def callback(message: str):
        stage = "processing"
        for pattern, name in stages.items():
            if pattern in message:
                stage = name
                break
        json_progress_event(stage, message)

    return callback


@dataclass
class CliState:
    engine: OdeSig
    quiet: bool
    json_progress: bool

    @property
    def callback(self):
        if self.json_progress:
            return make_json_progress_callback()
        if self.quiet:
            return None
        return progress_callback

    def say(self, message: str):
        if not self.quiet and not self.json_progress:
            console.print(message)

    def done(self, message: str, output_path: Path | str | None = None):
        if self.json_progress:
            json_progress_event("complete", message, 100, str(output_path) if output_path else None)
        elif not self.quiet:
            suffix = f" [dim]{output_path}[/dim]" if output_path else ""
            console.print(f"[green]✓[/green] {message}{suffix}")

    def fail(self, label: str, error: Exception):
        if self.json_progress:
            json_progress_event("error", f"{label}: {error}", -1)
        else:
            err_console.print(f"[red]{label}:[/red] {error}")
        sys.exit(1)


def _run(state: CliState, action):
    """Run a command body, mapping library errors to exit code 1."""
    try:
        return action()
    except ExperimentConfigError as e:
        raise click.UsageError(str(e))
    except ParseError as e:
        state.fail("Parse error", e)
    except CompatibilityError as e:
        state.fail("Incompatible checkpoint", e)
    except TrainingDivergedError as e:
        state.fail("Training diverged", e)
    except (ConfigError, DataGenError) as e:
        state.fail("Configuration/data error", e)
    except (TrainingError, SolverError, GraphError, EncoderError, DiffMathError) as e:
        state.fail("Model error", e)
    except EvaluationError as e:
        state.fail("Evaluation failed", e)
    except OSError as e:
        state.fail("I/O error", e)


def _output_dir(state: CliState, out: str | None, name: str) -> Path:
    if out:
        return Path(out)
    base = Path(state.engine.config.get("output", {}).get("directory", "./output"))
    base.mkdir(parents=True, exist_ok=True)
    return base / name


def _find_config(config: str | None) -> str | None:
    if config:
        return config
    for candidate in [Path("config.yaml"), Path("config.json")]:
        if candidate.exists():
            return str(candidate)
    return None


@click.group()
@click.option(
    "--config", "-c",
    type=click.Path(exists=True),
    default=None,
    help="Path to config.yaml (JSON works too)"
)
@click.option("--seed", type=int, default=None, help="Master seed (overrides config)")
@click.option("--threads", type=int, default=None, help="Worker cap for experiments (ODESIG_THREADS wins)")
@click.option(
    "--quiet", "-q",
    is_flag=True,
    default=False,
    help="Suppress progress output"
)
@click.option(
    "--json-progress",
    is_flag=True,
    default=False,
    help="Output JSON progress events (for UI integration)"
)
@click.pass_context
def main(ctx, config, seed, threads, quiet, json_progress):
    """
    Train and evaluate latent-ODE reconstructions of irregular ROI signals.

    Examples:

        odesig generate --out data/

        odesig train --data data/ --out runs/toy

        odesig reconstruct --checkpoint runs/toy/checkpoint.json --signals data/signals.csv --out recon.csv

        odesig evaluate --kind offset --value 0.1 --value 0.2
    """
    if quiet and json_progress:
        raise click.UsageError("--quiet and --json-progress are mutually exclusive")
    try:
        engine = OdeSig(config_path=_find_config(config))
    except ConfigError as e:
        err_console.print(f"[red]Configuration error:[/red] {e}")
        sys.exit(1)
    if seed is not None:
        engine.config["seed"] = seed
    if threads is not None:
        engine.config["threads"] = threads
    ctx.obj = CliState(engine=engine, quiet=quiet, json_progress=json_progress)


@main.command()
@click.option("--out", "-o", type=click.Path(), default=None, help="Output directory")
@click.option("--num-rois", type=int, default=None, help="ROIs per sample")
@click.option("--num-samples", type=int, default=None, help="Number of samples")
@click.option("--duration", type=float, default=None, help="Signal duration in seconds")
@click.pass_obj
def generate(state: CliState, out, num_rois, num_samples, duration):
    """Generate synthetic signals, manifest and atlas."""
    generator = state.engine.config["generator"]
    for key, value in (("num_rois", num_rois), ("num_samples", num_samples), ("duration", duration)):
        if value is not None:
            generator[key] = value
    out_dir = _output_dir(state, out, "data")

    def action():
        dataset = state.engine.generate(out_dir, state.callback)
        state.done(f"Generated {len(dataset.samples)} samples", out_dir)

    _run(state, action)


@main.command()
@click.option("--data", "-d", type=click.Path(exists=True, file_okay=False), required=True,
              help="Dataset directory (signals.csv + manifest.json)")
@click.option("--out", "-o", type=click.Path(), default=None, help="Run directory")
@click.option("--epochs", type=int, default=None, help="Training epochs")
@click.option("--variant", type=click.Choice(VARIANTS), default=None, help="Model variant")
@click.option("--no-positional-encoder", is_flag=True, default=False, help="Drop positional encoding")
@click.option("--no-temporal-graph", is_flag=True, default=False, help="Drop the temporal graph branch")
@click.option("--no-spatial-graph", is_flag=True, default=False, help="Drop the spatial graph branch")
@click.pass_obj
def train(state: CliState, data, out, epochs, variant, no_positional_encoder, no_temporal_graph, no_spatial_graph):
    """Train a model and write a checkpoint and loss trace."""
    section = state.engine.config["train"]
    if epochs is not None:
        section["epochs"] = epochs
    ablation = dict(section.get("ablation") or {})
    if variant:
        tags = variant[len("ours-"):] if variant != "ours" else ""
        ablation = {
            "no_positional_encoder": "p" in tags,
            "no_temporal_graph": "t" in tags,
            "no_spatial_graph": "s" in tags,
        }
    for key, flag in (
        ("no_positional_encoder", no_positional_encoder),
        ("no_temporal_graph", no_temporal_graph),
        ("no_spatial_graph", no_spatial_graph),
    ):
        if flag:
            ablation[key] = True
    section["ablation"] = ablation
    out_dir = _output_dir(state, out, "run")

    def action():
        result, checkpoint = state.engine.train(data, out_dir, state.callback)
        last = result.trace[-1]
        state.say(
            f"Best epoch {result.best_epoch} of {len(result.trace)}; final loss {last.train_loss:.5f}"
        )
        state.done("Checkpoint saved", checkpoint)

    _run(state, action)


@main.command()
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--signals", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--out", "-o", type=click.Path(), required=True, help="Output CSV")
@click.option("--points", type=int, default=None, help="Grid points per sample")
@click.option("--start", type=float, default=None, help="Grid start time")
@click.option("--stop", type=float, default=None, help="Grid stop time")
@click.option("--network", type=click.Path(), default=None, help="Also write Pearson networks (JSON)")
@click.pass_obj
def reconstruct(state: CliState, checkpoint, signals, out, points, start, stop, network):
    """Reconstruct signals on a regular grid."""
    section = state.engine.config["reconstruct"]
    for key, value in (("points", points), ("start", start), ("stop", stop)):
        if value is not None:
            section[key] = value
    if int(section["points"]) < 1:
        raise click.UsageError("--points must be >= 1")

    def action():
        rows = state.engine.reconstruct(checkpoint, signals, out, network, state.callback)
        state.done(f"Wrote {rows} rows", out)

    _run(state, action)


def _print_report(report):
    table = Table(title=f"{report.kind} ({len(report.seeds)} seeds)")
    for column in ("param", "model", "RMSE mean", "RMSE std", "seeds", "flags"):
        table.add_column(column)
    for r in report.rows:
        mean = "-" if r.rmse_mean is None else f"{r.rmse_mean:.4f}"
        std = "-" if r.rmse_std is None else f"{r.rmse_std:.4f}"
        table.add_row(r.param, r.model, mean, std, str(r.seeds_used), ", ".join(r.flags))
    console.print(table)
    console.print(f"[dim]Runtime {format_seconds(report.runtime_seconds)}[/dim]")


@main.command()
@click.option("--kind", default=None, help=f"Experiment kind: {', '.join(EXPERIMENT_KINDS)}")
@click.option("--value", "values", multiple=True, help="Setting value (steps, offset or period); repeatable")
@click.option("--seeds", type=int, default=None, help="Seeds per setting")
@click.option("--variant", "variants", multiple=True, type=click.Choice(VARIANTS), help="Model variant; repeatable")
@click.option("--out", "-o", type=click.Path(), default=None, help="Report directory")
@click.pass_obj
def evaluate(state: CliState, kind, values, seeds, variants, out):
    """Run an experiment and write report.json + report.csv."""
    section = state.engine.config["experiment"]
    if kind is not None:
        if kind not in EXPERIMENT_KINDS:
            raise click.UsageError(
                f"Unknown experiment kind {kind!r}; valid kinds: {', '.join(EXPERIMENT_KINDS)}"
            )
        section["kind"] = kind
    if values:
        section["values"] = [_parse_value(v) for v in values]
    if seeds is not None:
        section["seeds"] = seeds
    if variants:
        section["variants"] = list(variants)
    out_dir = _output_dir(state, out, "eval")

    def action():
        report = state.engine.evaluate(out_dir, state.callback)
        if not state.quiet and not state.json_progress:
            _print_report(report)
        state.done("Report saved", out_dir)

    _run(state, action)


def _parse_value(raw: str):
    """Steps are ints, offsets floats, periods may stay fractions like 2/3."""
    for cast in (int, float):
        try:
            return cast(raw)
        except ValueError:
            pass
    return raw


@main.command()
@click.argument("parameter", type=click.Choice(SWEEP_PARAMETERS))
@click.argument("values", nargs=-1, type=int, required=True)
@click.option("--kind", default=None, help=f"Experiment kind: {', '.join(EXPERIMENT_KINDS)}")
@click.option("--out", "-o", type=click.Path(), default=None, help="Report directory")
@click.pass_obj
def sweep(state: CliState, parameter, values, kind, out):
    """Rerun the experiment for each value of d_z, kernel_size or d_k."""
    if kind is not None:
        if kind not in EXPERIMENT_KINDS:
            raise click.UsageError(
                f"Unknown experiment kind {kind!r}; valid kinds: {', '.join(EXPERIMENT_KINDS)}"
            )
        state.engine.config["experiment"]["kind"] = kind
    out_dir = _output_dir(state, out, "sweep")

    def action():
        result = state.engine.sweep(parameter, list(values), out_dir, state.callback)
        if not state.quiet and not state.json_progress:
            for value, report in zip(result.values, result.reports):
                console.print(f"[bold]{parameter}={value}[/bold]")
                _print_report(report)
        state.done("Sweep saved", out_dir)

    _run(state, action)


@main.command()
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Checkpoint to time (default: untrained weights)")
@click.option("--repetitions", type=int, default=None, help="Timed repetitions")
@click.option("--no-scaling", is_flag=True, default=False, help="Skip the scaling checks")
@click.option("--out", "-o", type=click.Path(), default=None, help="Write the report as JSON")
@click.pass_obj
def runtime(state: CliState, checkpoint, repetitions, no_scaling, out):
    """Time the reconstruction pass and run the scaling checks."""
    section = state.engine.config["runtime"]
    if repetitions is not None:
        if repetitions < 1:
            raise click.UsageError("--repetitions must be >= 1")
        section["repetitions"] = repetitions
    if no_scaling:
        section["scaling"] = False

    def action():
        report = state.engine.runtime(checkpoint, state.callback)
        stats = report.reconstruction
        state.say(
            f"Reconstruction: {format_seconds(stats.mean)} ± {format_seconds(stats.std)} "
            f"over {stats.repetitions} runs ({report.num_samples} samples x {report.grid_points} points)"
        )
        for check in report.checks:
            mark = "[green]ok[/green]" if check.passed else "[yellow]flagged[/yellow]"
            state.say(f"{check.name}: {check.measured:.3f} in [{check.low}, {check.high}] {mark}")
        if out:
            payload = {**report.to_dict(), "provenance": state.engine.provenance}
            Path(out).write_text(json.dumps(payload, indent=2))
        state.done("Runtime measured", out)

    _run(state, action)


if __name__ == "__main__":
    main()
