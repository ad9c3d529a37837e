"""Command-line interface for wsolkit."""

from __future__ import annotations

import json
from collections.abc import Sequence
from pathlib import Path
from typing import Any

import typer
from rich.console import Console
from rich.table import Table

from .config import (
    DEFAULT_CONFIG_NAME,
    PIPELINE_STAGES,
    apply_overrides,
    load_config,
)
from .exceptions import ConfigError, MissingArtifactError, WsolkitError
from .logging import configure_logging, get_logger, log_error
from .models import StageManifest
from .pipeline import execute_stage

app = typer.Typer(
    add_completion=False,
    help="wsolkit - weakly supervised object localization from image-level labels.",
)
console = Console()

EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_MISSING = 3

CONFIG_OPTION = typer.Option(
    None, "--config", "-c", help=f"Config file (default ./{DEFAULT_CONFIG_NAME})"
)
WORKDIR_OPTION = typer.Option(None, "--workdir", "-w", help="Work directory for artifacts")
THREADS_OPTION = typer.Option(None, "--threads", "-j", min=1, help="Worker threads")
FORCE_OPTION = typer.Option(False, "--force", "-f", help="Run despite upstream config mismatch")
SEED_OPTION = typer.Option(None, "--seed", help="Override the global seed")
VERBOSE_OPTION = typer.Option(False, "--verbose", "-v", help="Verbose output")
JSON_LOGS_OPTION = typer.Option(False, "--json-logs", help="Output structured logs as JSON")
TOP_M_OPTION = typer.Option(None, "--top-m", min=1, help="Proposals kept per image and class")
CONTRAST_WEIGHT_OPTION = typer.Option(
    None, "--contrast-weight", min=0.0, help="Weight of the contrast cue in the fusion"
)
ACTIVATION_WEIGHT_OPTION = typer.Option(
    None, "--activation-weight", min=0.0, help="Weight of the activation cue in the fusion"
)
MINING_OVERLAP_OPTION = typer.Option(
    None, "--mining-overlap", min=0.0, max=1.0, help="IoU for CorLoc@M and recall@M"
)
FG_IOU_OPTION = typer.Option(None, "--fg-iou", min=0.0, max=1.0, help="Foreground IoU")
BG_IOU_OPTION = typer.Option(None, "--bg-iou", min=0.0, max=1.0, help="Lowest background IoU")


def _prepare(
    config_path: Path | None,
    overrides: dict[str, Any],
    seed: int | None,
    verbose: bool,
    json_logs: bool,
) -> tuple[dict[str, Any], dict[str, Any]]:
    configure_logging(verbose=verbose, json_output=json_logs)
    try:
        config = load_config(config_path)
        if seed is not None:
            config["seed"] = seed
        merged, applied = apply_overrides(config, overrides)
    except ConfigError as exc:
        log_error(exc, {"config": str(config_path) if config_path else None})
        console.print(f"[red]{exc}[/red]")
        raise typer.Exit(code=EXIT_CONFIG) from exc
    if seed is not None:
        applied = {**applied, "seed": seed}
    return merged, applied


def _execute(
    stages: Sequence[str],
    config: dict[str, Any],
    overrides: dict[str, Any],
    *,
    workdir: Path | None,
    threads: int | None,
    force: bool,
    include: Sequence[Path] = (),
) -> list[StageManifest]:
    manifests: list[StageManifest] = []
    for stage in stages:
        try:
            with console.status(f"[cyan]{stage}[/cyan]"):
                manifest = execute_stage(
                    stage,
                    config,
                    overrides,
                    workdir=workdir,
                    force=force,
                    threads=threads,
                    include=include,
                )
        except ConfigError as exc:
            log_error(exc, {"stage": stage})
            console.print(f"[red]{exc}[/red]")
            raise typer.Exit(code=EXIT_CONFIG) from exc
        except MissingArtifactError as exc:
            log_error(exc, {"stage": stage})
            console.print(f"[red]{exc}[/red]")
            raise typer.Exit(code=EXIT_MISSING) from exc
        except WsolkitError as exc:
            log_error(exc, {"stage": stage})
            console.print(f"[red]{exc}[/red]")
            raise typer.Exit(code=EXIT_FAILURE) from exc
        console.log(f"[green]{stage} done[/green] in {manifest.wall_time_sec:.1f}s")
        manifests.append(manifest)
    return manifests


def _print_outputs(manifests: Sequence[StageManifest]) -> None:
    table = Table(title="wsolkit artifacts", show_lines=False)
    table.add_column("Stage")
    table.add_column("Output")
    table.add_column("SHA-256")
    for manifest in manifests:
        for path, digest in manifest.outputs.items():
            table.add_row(manifest.stage, path, digest[:12])
    console.print(table)


def _stage_command(
    stage: str,
    config_path: Path | None,
    workdir: Path | None,
    threads: int | None,
    force: bool,
    seed: int | None,
    verbose: bool,
    json_logs: bool,
    overrides: dict[str, Any] | None = None,
    include: Sequence[Path] = (),
) -> StageManifest:
    config, applied = _prepare(config_path, overrides or {}, seed, verbose, json_logs)
    manifests = _execute(
        [stage], config, applied, workdir=workdir, threads=threads, force=force, include=include
    )
    if verbose:
        _print_outputs(manifests)
    return manifests[0]


def _mining_overrides(
    top_m: int | None,
    alpha: float | None,
    mask_out: str | None,
    no_as: bool,
    contrast_weight: float | None = None,
    activation_weight: float | None = None,
) -> dict[str, Any]:
    """Mining section overrides; --no-as wins over an explicit activation weight."""
    return {
        "mining": {
            "top_m": top_m,
            "alpha": alpha,
            "mask_out": mask_out,
            "contrast_weight": contrast_weight,
            "activation_weight": 0.0 if no_as else activation_weight,
        }
    }


@app.command("gen-data")
def gen_data(
    config_path: Path | None = CONFIG_OPTION,
    workdir: Path | None = WORKDIR_OPTION,
    num_images: int | None = typer.Option(None, "--num-images", min=1, help="Training images"),
    threads: int | None = THREADS_OPTION,
    force: bool = FORCE_OPTION,
    seed: int | None = SEED_OPTION,
    verbose: bool = VERBOSE_OPTION,
    json_logs: bool = JSON_LOGS_OPTION,
) -> None:
    """Render the synthetic train/test splits and their proposals."""
    overrides = {"data": {"num_images": num_images}}
    _stage_command(
        "gen-data", config_path, workdir, threads, force, seed, verbose, json_logs, overrides
    )


@app.command("train-cls")
def train_cls(
    config_path: Path | None = CONFIG_OPTION,
    workdir: Path | None = WORKDIR_OPTION,
    iterations: int | None = typer.Option(None, "--iterations", min=0, help="SGD iterations"),
    threads: int | None = THREADS_OPTION,
    force: bool = FORCE_OPTION,
    seed: int | None = SEED_OPTION,
    verbose: bool = VERBOSE_OPTION,
    json_logs: bool = JSON_LOGS_OPTION,
) -> None:
    """Train the multi-label classification network."""
    overrides = {"classifier": {"iterations": iterations}}
    _stage_command(
        "train-cls", config_path, workdir, threads, force, seed, verbose, json_logs, overrides
    )


@app.command("mine")
def mine(
    config_path: Path | None = CONFIG_OPTION,
    workdir: Path | None = WORKDIR_OPTION,
    top_m: int | None = TOP_M_OPTION,
    alpha: float | None = typer.Option(None, "--alpha", min=0.0, help="Size prior weight"),
    mask_out: str | None = typer.Option(None, "--mask-out", help="in-out, whole-out or in"),
    no_as: bool = typer.Option(False, "--no-as", help="Rank by contrast only"),
    contrast_weight: float | None = CONTRAST_WEIGHT_OPTION,
    activation_weight: float | None = ACTIVATION_WEIGHT_OPTION,
    threads: int | None = THREADS_OPTION,
    force: bool = FORCE_OPTION,
    seed: int | None = SEED_OPTION,
    verbose: bool = VERBOSE_OPTION,
    json_logs: bool = JSON_LOGS_OPTION,
) -> None:
    """Score, fuse and keep the top-M proposals per image and class."""
    overrides = _mining_overrides(
        top_m, alpha, mask_out, no_as, contrast_weight, activation_weight
    )
    _stage_command(
        "mine", config_path, workdir, threads, force, seed, verbose, json_logs, overrides
    )


@app.command("mil")
def mil(
    config_path: Path | None = CONFIG_OPTION,
    workdir: Path | None = WORKDIR_OPTION,
    no_mil: bool = typer.Option(False, "--no-mil", help="Keep the top mined proposal instead"),
    solver: str | None = typer.Option(None, "--solver", help="sgd or lbfgs"),
    threads: int | None = THREADS_OPTION,
    force: bool = FORCE_OPTION,
    seed: int | None = SEED_OPTION,
    verbose: bool = VERBOSE_OPTION,
    json_logs: bool = JSON_LOGS_OPTION,
) -> None:
    """Select positive instances with multiple instance learning."""
    overrides = {"mil": {"enabled": False if no_mil else None, "solver": solver}}
    _stage_command(
        "mil", config_path, workdir, threads, force, seed, verbose, json_logs, overrides
    )


@app.command("refine")
def refine(
    config_path: Path | None = CONFIG_OPTION,
    workdir: Path | None = WORKDIR_OPTION,
    no_seg: bool = typer.Option(False, "--no-seg", help="Pass selected boxes through unchanged"),
    dump_masks: bool = typer.Option(False, "--dump-masks", help="Write masks as PNG"),
    threads: int | None = THREADS_OPTION,
    force: bool = FORCE_OPTION,
    seed: int | None = SEED_OPTION,
    verbose: bool = VERBOSE_OPTION,
    json_logs: bool = JSON_LOGS_OPTION,
) -> None:
    """Tighten selected boxes around their segmented objects."""
    overrides = {
        "refine": {"enabled": False if no_seg else None, "dump_masks": True if dump_masks else None}
    }
    _stage_command(
        "refine", config_path, workdir, threads, force, seed, verbose, json_logs, overrides
    )


@app.command("train-det")
def train_det(
    config_path: Path | None = CONFIG_OPTION,
    workdir: Path | None = WORKDIR_OPTION,
    iterations: int | None = typer.Option(None, "--iterations", min=0, help="SGD iterations"),
    fg_iou: float | None = FG_IOU_OPTION,
    bg_iou: float | None = BG_IOU_OPTION,
    threads: int | None = THREADS_OPTION,
    force: bool = FORCE_OPTION,
    seed: int | None = SEED_OPTION,
    verbose: bool = VERBOSE_OPTION,
    json_logs: bool = JSON_LOGS_OPTION,
) -> None:
    """Train the detection head on refined boxes."""
    overrides = {
        "detector": {"iterations": iterations, "fg_iou": fg_iou, "bg_iou_low": bg_iou}
    }
    _stage_command(
        "train-det", config_path, workdir, threads, force, seed, verbose, json_logs, overrides
    )


@app.command("detect")
def detect(
    config_path: Path | None = CONFIG_OPTION,
    workdir: Path | None = WORKDIR_OPTION,
    score_threshold: float | None = typer.Option(
        None, "--score-threshold", min=0.0, max=1.0, help="Minimum detection score"
    ),
    nms_iou: float | None = typer.Option(None, "--nms-iou", min=0.0, max=1.0, help="NMS IoU"),
    threads: int | None = THREADS_OPTION,
    force: bool = FORCE_OPTION,
    seed: int | None = SEED_OPTION,
    verbose: bool = VERBOSE_OPTION,
    json_logs: bool = JSON_LOGS_OPTION,
) -> None:
    """Run the detector on the test images."""
    overrides = {"detect": {"score_threshold": score_threshold, "nms_iou": nms_iou}}
    _stage_command(
        "detect", config_path, workdir, threads, force, seed, verbose, json_logs, overrides
    )


@app.command("eval")
def evaluate(
    config_path: Path | None = CONFIG_OPTION,
    workdir: Path | None = WORKDIR_OPTION,
    ap_method: str | None = typer.Option(None, "--ap-method", help="all-points or voc07"),
    mining_overlap: float | None = MINING_OVERLAP_OPTION,
    threads: int | None = THREADS_OPTION,
    force: bool = FORCE_OPTION,
    seed: int | None = SEED_OPTION,
    verbose: bool = VERBOSE_OPTION,
    json_logs: bool = JSON_LOGS_OPTION,
) -> None:
    """Compute CorLoc, CorLoc@M, recall@M, AP and error breakdowns."""
    overrides = {"eval": {"ap_method": ap_method, "mining_overlap": mining_overlap}}
    _stage_command(
        "eval", config_path, workdir, threads, force, seed, verbose, json_logs, overrides
    )


@app.command("report")
def report(
    config_path: Path | None = CONFIG_OPTION,
    workdir: Path | None = WORKDIR_OPTION,
    include: list[Path] = typer.Option(
        [], "--include", "-i", help="Extra eval.json files whose ablation rows are merged"
    ),
    force: bool = FORCE_OPTION,
    seed: int | None = SEED_OPTION,
    verbose: bool = VERBOSE_OPTION,
    json_logs: bool = JSON_LOGS_OPTION,
) -> None:
    """Render report.json and the Markdown ablation report."""
    manifest = _stage_command(
        "report", config_path, workdir, None, force, seed, verbose, json_logs, include=include
    )
    markdown = next(path for path in manifest.outputs if path.endswith(".md"))
    console.log(f"[green]Report generated:[/green] {markdown}")


@app.command("compare-maskout")
def compare_maskout(
    config_path: Path | None = CONFIG_OPTION,
    workdir: Path | None = WORKDIR_OPTION,
    top_m: int | None = TOP_M_OPTION,
    mining_overlap: float | None = MINING_OVERLAP_OPTION,
    threads: int | None = THREADS_OPTION,
    force: bool = FORCE_OPTION,
    seed: int | None = SEED_OPTION,
    verbose: bool = VERBOSE_OPTION,
    json_logs: bool = JSON_LOGS_OPTION,
) -> None:
    """Mine with every mask-out strategy and compare CorLoc@M and recall@M."""
    overrides = {"mining": {"top_m": top_m}, "eval": {"mining_overlap": mining_overlap}}
    manifest = _stage_command(
        "compare-maskout", config_path, workdir, threads, force, seed, verbose, json_logs, overrides
    )
    payload = json.loads(Path(next(iter(manifest.outputs))).read_text(encoding="utf-8"))
    table = Table(title=f"Mask-out strategies (t = {payload['overlap']})")
    table.add_column("Strategy")
    m_values = sorted(next(iter(payload["strategies"].values()))["corloc_at_m"], key=int)
    for m in m_values:
        table.add_column(f"CorLoc@{m}", justify="right")
    for strategy, result in payload["strategies"].items():
        table.add_row(
            strategy,
            *(f"{100 * (result['corloc_at_m'][m]['mean'] or 0.0):.1f}" for m in m_values),
        )
    console.print(table)


@app.command("run")
def run(
    config_path: Path | None = CONFIG_OPTION,
    workdir: Path | None = WORKDIR_OPTION,
    top_m: int | None = typer.Option(None, "--top-m", min=1),
    alpha: float | None = typer.Option(None, "--alpha", min=0.0),
    mask_out: str | None = typer.Option(None, "--mask-out"),
    no_as: bool = typer.Option(False, "--no-as"),
    contrast_weight: float | None = CONTRAST_WEIGHT_OPTION,
    activation_weight: float | None = ACTIVATION_WEIGHT_OPTION,
    no_mil: bool = typer.Option(False, "--no-mil"),
    no_seg: bool = typer.Option(False, "--no-seg"),
    score_threshold: float | None = typer.Option(None, "--score-threshold", min=0.0, max=1.0),
    nms_iou: float | None = typer.Option(None, "--nms-iou", min=0.0, max=1.0),
    fg_iou: float | None = FG_IOU_OPTION,
    bg_iou: float | None = BG_IOU_OPTION,
    mining_overlap: float | None = MINING_OVERLAP_OPTION,
    from_stage: str | None = typer.Option(None, "--from", help="First stage to run"),
    threads: int | None = THREADS_OPTION,
    force: bool = FORCE_OPTION,
    seed: int | None = SEED_OPTION,
    verbose: bool = VERBOSE_OPTION,
    json_logs: bool = JSON_LOGS_OPTION,
) -> None:
    """Run the whole pipeline, from data generation to the report."""
    overrides: dict[str, Any] = {
        **_mining_overrides(top_m, alpha, mask_out, no_as, contrast_weight, activation_weight),
        "mil": {"enabled": False if no_mil else None},
        "refine": {"enabled": False if no_seg else None},
        "detector": {"fg_iou": fg_iou, "bg_iou_low": bg_iou},
        "detect": {"score_threshold": score_threshold, "nms_iou": nms_iou},
        "eval": {"mining_overlap": mining_overlap},
    }
    stages = list(PIPELINE_STAGES)
    if from_stage is not None:
        if from_stage not in stages:
            choices = ", ".join(stages)
            console.print(f"[red]Unknown stage {from_stage!r}; choose from {choices}[/red]")
            raise typer.Exit(code=EXIT_CONFIG)
        stages = stages[stages.index(from_stage) :]

    config, applied = _prepare(config_path, overrides, seed, verbose, json_logs)
    console.rule("[bold cyan]wsolkit")
    get_logger(__name__).info("Running pipeline", stages=stages, overrides=applied)
    manifests = _execute(stages, config, applied, workdir=workdir, threads=threads, force=force)
    _print_outputs(manifests)


@app.command("init")
def init_project_config(
    force: bool = typer.Option(False, "--force", "-f", help="Overwrite existing config"),
) -> None:
    """Create a starter wsolkit.yaml configuration file."""
    config_path = Path(DEFAULT_CONFIG_NAME)
    if config_path.exists() and not force:
        typer.echo("Config already exists. Use --force to overwrite.")
        raise typer.Exit(code=EXIT_FAILURE)

    template = """# wsolkit configuration
seed: 0

runtime:
  threads: 1

paths:
  workdir: wsolkit-run
  # Point these at external inputs to skip gen-data.
  dataset: null
  proposals: null
  test_dataset: null
  test_proposals: null

data:
  num_images: 200
  num_test_images: 50
  image_width: 64
  image_height: 64
  num_classes: 2
  objects_per_image: [1, 2]
  object_size: [16, 26]
  clutter_density: 0.0
  noise: 0.02
  image_format: png

classifier:
  iterations: 500
  learning_rate: 0.005
  batch_size: 32

mining:
  top_m: 50
  alpha: 5.0
  contrast_weight: 10.0
  activation_weight: 1.0   # 0 ranks by contrast only
  mask_out: in-out         # in-out | whole-out | in

mil:
  enabled: true
  outer_iterations: 10
  inner_epochs: 20
  regularization: 0.001
  solver: sgd              # sgd | lbfgs
  exhaustive_limit: 4096   # exact search below this many joint selections

refine:
  enabled: true
  expand: 0.25
  dump_masks: false

detector:
  iterations: 2000
  fg_fraction: 0.25

detect:
  score_threshold: 0.8
  nms_iou: 0.5

eval:
  iou_threshold: 0.5
  mining_overlap: 0.5
  ap_method: all-points    # all-points | voc07
  m_values: [1, 10, 50]
"""
    config_path.write_text(template, encoding="utf-8")
    console.log(f"[green]Created {config_path}[/green]")


if __name__ == "__main__":
    app()
