"""Command-line entry point for latent domain prompt fusion experiments."""
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

import click
import typer
from loguru import logger
from rich import print
from rich.console import Console
from rich.table import Table

from config import Config, ExperimentConfig, load_experiment_config
from core import ConfigError, DatasetError, LDPFError
from experiments import (
    ABLATION_VARIANTS,
    ExperimentManager,
    cmd_ablate,
    cmd_eval,
    cmd_inspect_clusters,
    cmd_oracle,
)
from utils import format_mean_std

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2

# Usage errors of click and of the click copy typer may bundle (same class name).
USAGE_ERRORS = tuple({click.UsageError, *(c for c in typer.BadParameter.__mro__ if c.__name__ == "UsageError")})
ABORTS = tuple({click.Abort, typer.Abort})

app = typer.Typer(help="Latent domain prompt fusion: train, evaluate and analyse soft-prompt domain generalization")
console = Console()

def configure_logging(out_dir: Optional[Path] = None, level: Optional[str] = None) -> None:
    """stderr sink at the configured level plus a DEBUG file sink inside the run directory."""
    logger.remove()
    logger.add(sys.stderr, format=Config.LOG_FORMAT, level=level or Config.LOG_LEVEL)
    if out_dir is not None:
        log_dir = Path(out_dir) / "logs"
        log_dir.mkdir(parents=True, exist_ok=True)
        logger.add(
            log_dir / "ldpf.log",
            format=Config.LOG_FORMAT,
            rotation=Config.LOG_ROTATION,
            retention=Config.LOG_RETENTION,
            level="DEBUG",
        )


def fail(error: Exception) -> None:
    """Log, echo and exit: 1 for usage/config/input problems, 2 for everything else."""
    code = EXIT_USAGE if isinstance(error, (ConfigError, DatasetError, *USAGE_ERRORS)) else EXIT_RUNTIME
    logger.error(f"{type(error).__name__}: {error}")
    print(f"[red]Error: {error}")
    raise typer.Exit(code)


def resolve_config(config_path: Optional[Path], **overrides: Any) -> ExperimentConfig:
    return load_experiment_config(config_path).override(**overrides)


def _accuracy_table(title: str, summary: Dict[str, Any], rows: List[str]) -> Table:
    targets = sorted({t for key in rows if key in summary for t in summary[key]["targets"]})
    table = Table(title=title)
    table.add_column("Method", style="cyan")
    for target in targets:
        table.add_column(target, style="magenta")
    table.add_column("Average", style="green")
    for key in rows:
        if key not in summary:
            continue
        cells = [format_mean_std(summary[key]["targets"][t]) if t in summary[key]["targets"] else "-" for t in targets]
        table.add_row(key, *cells, format_mean_std(summary[key]["average"]))
    return table


ConfigOption = typer.Option(None, "--config", help="YAML experiment config")
DatasetOption = typer.Option(None, "--dataset", help="'synthetic', a dataset root (domain/class/image) or a manifest .json")
BackboneOption = typer.Option(None, "--backbone", help="Backbone kind: toy or external")
EpochsOption = typer.Option(None, "--epochs", help="Training epochs (0 writes initialized parameters)")
SeedOption = typer.Option(None, "--seed", help="Run a single seed instead of the config's seed list")
FusionOption = typer.Option(None, "--fusion-mode", help="similarity, greedy, average or single:<s>")
OutOption = typer.Option(None, "--out", help="Output directory")
SplitOption = typer.Option(None, "--split", help="Target domain name or index of one leave-one-domain-out split")


@app.command()
def train(
    config: Optional[Path] = ConfigOption,
    dataset: Optional[str] = DatasetOption,
    backbone: Optional[str] = BackboneOption,
    epochs: Optional[int] = EpochsOption,
    seed: Optional[int] = SeedOption,
    fusion_mode: Optional[str] = FusionOption,
    out: Optional[Path] = OutOption,
    split: Optional[str] = SplitOption,
):
    """Train prompts and latent domains per split and seed; writes checkpoints and logs."""
    try:
        experiment = resolve_config(config, dataset=dataset, backbone=backbone, epochs=epochs, seed=seed,
                                    fusion_mode=fusion_mode, out=out)
        configure_logging(Path(experiment.output_dir))
        print(f"[blue]Training into {experiment.output_dir} (seeds {experiment.seeds})...")
        records = ExperimentManager(experiment).cmd_train(split)
    except (LDPFError, *USAGE_ERRORS) as e:
        fail(e)
    except Exception as e:
        logger.exception("Training failed")
        fail(e)

    table = Table(title="Training runs")
    table.add_column("Seed", style="cyan")
    table.add_column("Target", style="magenta")
    table.add_column("Final train acc", style="green")
    table.add_column("Checkpoint", style="yellow")
    for record in records:
        log = record.result.log if record.result else []
        final = f"{log[-1]['train_accuracy']:.3f}" if log else "-"
        table.add_row(str(record.seed), record.target_name, final, str(record.checkpoint))
    console.print(table)
    print(f"[green]Wrote {len(records)} checkpoint(s)")


@app.command("eval")
def evaluate(
    checkpoint: Path = typer.Argument(..., help="Checkpoint file or run directory"),
    split: Optional[str] = SplitOption,
    fusion_mode: Optional[str] = FusionOption,
    out: Optional[Path] = OutOption,
):
    """Target-domain accuracy (mean ± std over seeds) and prediction dumps."""
    try:
        out_dir = out or (checkpoint if checkpoint.is_dir() else checkpoint.parent)
        configure_logging(out_dir)
        report = cmd_eval(checkpoint, out_dir, split=split, fusion_mode=fusion_mode)
    except (LDPFError, *USAGE_ERRORS) as e:
        fail(e)
    except Exception as e:
        logger.exception("Evaluation failed")
        fail(e)
    console.print(_accuracy_table("Target-domain accuracy (%)", report["summary"], [*report["fusion_modes"], "zero_shot"]))
    print(f"[green]Report written to {Path(out_dir) / 'eval_report.json'}")


@app.command()
def oracle(
    dump: Path = typer.Argument(..., help="Prediction dump written by 'eval'"),
    out: Optional[Path] = OutOption,
    plot: bool = typer.Option(False, "--plot", help="Also render a bar chart"),
):
    """Selection upper bound U_sel against fused and per-prompt accuracy."""
    try:
        out_dir = out or dump.parent
        configure_logging(out_dir)
        report = cmd_oracle(dump, out_dir, plot=plot)
    except ValueError as e:
        # malformed dump: the message names the offending row
        fail(e if isinstance(e, (ConfigError, DatasetError)) else ConfigError(str(e)))
    except (LDPFError, *USAGE_ERRORS) as e:
        fail(e)
    except Exception as e:
        logger.exception("Oracle analysis failed")
        fail(e)

    table = Table(title=f"Selection oracle ({report['num_samples']} samples)")
    table.add_column("Metric", style="cyan")
    table.add_column("Value", style="green")
    for index, value in enumerate(report["per_prompt_accuracy"]):
        table.add_row(f"prompt {index}", f"{100 * value:.2f}")
    table.add_row("fused", f"{100 * report['fused_accuracy']:.2f}")
    table.add_row("U_sel", f"{100 * report['U_sel']:.2f}")
    table.add_row("gap", f"{100 * report['gap']:.2f}")
    console.print(table)
    for flag in report["flags"]:
        print(f"[yellow]⚠️ {flag}")


@app.command()
def ablate(
    config: Optional[Path] = ConfigOption,
    dataset: Optional[str] = DatasetOption,
    backbone: Optional[str] = BackboneOption,
    epochs: Optional[int] = EpochsOption,
    seed: Optional[int] = SeedOption,
    fusion_mode: Optional[str] = FusionOption,
    out: Optional[Path] = OutOption,
    split: Optional[str] = SplitOption,
    variant: Optional[List[str]] = typer.Option(None, "--variant", help="Restrict to these variants (repeatable)"),
):
    """Run the ablation matrix and print a table of variant accuracies."""
    try:
        experiment = resolve_config(config, dataset=dataset, backbone=backbone, epochs=epochs, seed=seed,
                                    fusion_mode=fusion_mode, out=out)
        configure_logging(Path(experiment.output_dir))
        report = cmd_ablate(experiment, split=split, variants=variant or ABLATION_VARIANTS)
    except (LDPFError, *USAGE_ERRORS) as e:
        fail(e)
    except Exception as e:
        logger.exception("Ablation failed")
        fail(e)
    console.print(_accuracy_table("Ablation: target-domain accuracy (%)", report["summary"], report["variants"]))


@app.command("inspect-clusters")
def inspect_clusters(
    checkpoint: Path = typer.Argument(..., help="Checkpoint file or run directory"),
    out: Optional[Path] = OutOption,
):
    """Cluster sizes, agreement with annotated domains, ARI and class mutual information."""
    try:
        out_dir = out or (checkpoint if checkpoint.is_dir() else checkpoint.parent)
        configure_logging(out_dir)
        reports = cmd_inspect_clusters(checkpoint, out_dir)
    except (LDPFError, *USAGE_ERRORS) as e:
        fail(e)
    except Exception as e:
        logger.exception("Cluster inspection failed")
        fail(e)

    table = Table(title="Latent domains")
    table.add_column("Seed", style="cyan")
    table.add_column("Target", style="magenta")
    table.add_column("Sizes", style="yellow")
    table.add_column("Agreement", style="green")
    table.add_column("ARI", style="green")
    table.add_column("Class MI", style="blue")
    for report in reports:
        table.add_row(
            str(report["seed"]),
            report["target_name"],
            str(report["cluster_sizes"]),
            f"{report['agreement']:.3f}",
            f"{report['adjusted_rand_index']:.3f}",
            f"{report['class_mutual_information']:.3f}",
        )
    console.print(table)


def main() -> None:
    """Console-script entry: usage errors exit with 1 instead of click's 2."""
    try:
        code = app(standalone_mode=False)
    except USAGE_ERRORS as e:
        e.show()
        sys.exit(EXIT_USAGE)
    except ABORTS:
        sys.exit(EXIT_RUNTIME)
    sys.exit(code if isinstance(code, int) else EXIT_OK)


if __name__ == "__main__":
    main()
