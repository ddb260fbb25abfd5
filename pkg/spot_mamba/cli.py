from __future__ import annotations

import json
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, Optional

import numpy as np
import pandas as pd
import typer
from platformdirs import user_config_path
from rich import print
from rich.table import Table

from spot_mamba import __version__
from spot_mamba.config import RunConfig, dump_run_config, load_run_config
from spot_mamba.data import (
    STGDataset,
    dataset_fingerprint,
    generate_synthetic,
    load_dataset_dir,
    save_dataset,
)
from spot_mamba.graph import generate_walks, load_edges
from spot_mamba.model import load_checkpoint, save_checkpoint
from spot_mamba.trainer import evaluate, grid_search, predict, run_ablation, run_training
from spot_mamba.utils import ConfigError, DataError, NumericError, ShapeError, configure_logging, ensure_finite

app = typer.Typer(
    add_completion=False,
    help="""
spotm: spatio-temporal graph forecasting with selective state-space scans.
Synthesize or load sensor data, train, evaluate, ablate and export forecasts.
""",
)

config_app = typer.Typer(name="config", help="Validate and inspect run configurations.")
app.add_typer(config_app)


DEFAULT_CONFIG_NAME = "config.yml"
DEFAULT_APP_DIRNAME = "spotm"
MANIFEST_NAME = "manifest.json"
EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4


def default_config_path() -> Path:
    cfg_dir = user_config_path(DEFAULT_APP_DIRNAME, ensure_exists=True)
    return cfg_dir / DEFAULT_CONFIG_NAME


@dataclass
class RunManifest:
    command: str
    config: Optional[Dict]
    seed: Optional[int]
    dataset_fingerprint: Optional[str]
    arguments: Dict = field(default_factory=dict)
    version: str = __version__
    started_at: str = ""
    finished_at: str = ""

    def write(self, out_dir: Path) -> Path:
        self.finished_at = _now()
        path = Path(out_dir) / MANIFEST_NAME
        path.write_text(json.dumps(asdict(self), indent=2, default=str) + "\n", encoding="utf-8")
        return path


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def _fail(message: str, code: int):
    typer.secho(f"❌ {message}", fg=typer.colors.RED, err=True)
    raise typer.Exit(code=code)


@contextmanager
def _exit_on_error():
    """Map package errors onto exit codes."""
    try:
        yield
    except ConfigError as e:
        _fail(f"Invalid config: {e}", EXIT_USAGE)
    except (DataError, ShapeError) as e:
        _fail(str(e), EXIT_DATA)
    except NumericError as e:
        _fail(f"Numeric failure: {e}", EXIT_NUMERIC)


def _write_csv(frame: pd.DataFrame, path: Path) -> Path:
    frame.to_csv(path, index=False, lineterminator="\n")
    return path


def _resolve_config(config: Optional[Path], model: Dict, train: Dict) -> RunConfig:
    return load_run_config(config).with_overrides(model=model, train=train)


def _load_data(data: Path, cfg: RunConfig) -> STGDataset:
    return load_dataset_dir(data, min_steps=cfg.model.T + cfg.model.T_out)


def _print_metrics(frame: pd.DataFrame, title: str):
    table = Table(title=title)
    for col in frame.columns:
        table.add_column(str(col))
    for row in frame.itertuples(index=False):
        table.add_row(*[f"{v:.4f}" if isinstance(v, float) else str(v) for v in row])
    print(table)


@app.callback()
def main(
    verbose: bool = typer.Option(False, "--verbose", "-v", help="Debug-level logging."),
):
    configure_logging(verbose)


@app.command()
def init(
    path: Optional[Path] = typer.Option(
        None, "--path", "-p", help="Optional path to write the default config to."
    ),
):
    """Write a default YAML run config to the OS config directory (or a given path)."""
    target = path or default_config_path()
    target.parent.mkdir(parents=True, exist_ok=True)
    if target.exists():
        typer.confirm(f"{target} exists. Overwrite?", abort=True)
    example = (Path(__file__).parent / "config.example.yml").read_text(encoding="utf-8")
    target.write_text(example, encoding="utf-8")
    typer.secho(f"Default config written to: {target}", fg=typer.colors.GREEN)


@app.command()
def synth(
    nodes: int = typer.Option(8, "--nodes", min=2, help="Number of ring nodes."),
    steps: int = typer.Option(2016, "--steps", min=24, help="Number of 5-minute steps."),
    seed: int = typer.Option(0, "--seed", min=0, help="Noise seed."),
    out: Path = typer.Option(..., "--out", help="Output directory (will be created)."),
):
    """Write a synthetic ring-sensor dataset: signals.csv, edges.csv, meta.json."""
    started = _now()
    with _exit_on_error():
        ds = generate_synthetic(nodes, steps, seed)
        paths = save_dataset(ds, out)
    RunManifest(
        "synth", None, seed, dataset_fingerprint(out),
        arguments={"nodes": nodes, "steps": steps}, started_at=started,
    ).write(out)
    for p in paths:
        typer.echo(f"Wrote {p.as_posix()}")
    typer.secho(f"Synthetic dataset: {steps} steps x {nodes} nodes", fg=typer.colors.GREEN)


@app.command()
def walks(
    data: Path = typer.Option(..., "--data", exists=True, help="Dataset directory or edge-list CSV."),
    k: int = typer.Option(20, "--K", min=1, help="Walk length."),
    m: int = typer.Option(2, "--M", min=1, help="Extractions per walk type."),
    seed: int = typer.Option(0, "--seed", min=0),
    max_workers: int = typer.Option(1, "--max-workers", min=1, help="Parallel walk workers."),
    out: Path = typer.Option(..., "--out", help="Output directory (will be created)."),
):
    """Dump the BFS/DFS/random walk sequences as CSV for inspection."""
    started = _now()
    edges = data / "edges.csv" if data.is_dir() else data
    with _exit_on_error():
        walkset = generate_walks(load_edges(edges), k, m, seed, max_workers=max_workers)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "walks.csv"
    walkset.dump_csv(path)
    RunManifest(
        "walks", None, seed, None,
        arguments={"data": data.as_posix(), "K": k, "M": m}, started_at=started,
    ).write(out)
    typer.secho(f"{3 * m * walkset.n_nodes} walks written to {path.as_posix()}", fg=typer.colors.GREEN)


def _overrides(
    epochs, patience, seed, m, batch_size, max_train_windows, walk_scan=None, temporal_scan=None
) -> tuple[Dict, Dict]:
    model = {"M": m, "walk_scan_kind": walk_scan, "temporal_scan_kind": temporal_scan}
    train = {
        "max_epochs": epochs,
        "patience": patience,
        "seed": seed,
        "batch_size": batch_size,
        "max_train_windows": max_train_windows,
    }
    return model, train


_CONFIG_OPT = typer.Option(None, "--config", "-c", help="YAML/JSON run config.")
_EPOCHS_OPT = typer.Option(None, "--epochs", help="Override train.max_epochs.")
_PATIENCE_OPT = typer.Option(None, "--patience", help="Override train.patience.")
_SEED_OPT = typer.Option(None, "--seed", help="Override train.seed.")
_M_OPT = typer.Option(None, "--M", help="Override model.M.")
_BATCH_OPT = typer.Option(None, "--batch-size", help="Override train.batch_size.")
_WINDOWS_OPT = typer.Option(None, "--max-train-windows", help="Train on the first N windows only.")
_LOG_OPT = typer.Option(None, "--log-file", help="Emit JSONL logs to this file.")


@app.command()
def train(
    data: Path = typer.Option(..., "--data", exists=True, file_okay=False, help="Dataset directory."),
    out: Path = typer.Option(..., "--out", help="Run directory (will be created)."),
    config: Optional[Path] = _CONFIG_OPT,
    epochs: Optional[int] = _EPOCHS_OPT,
    patience: Optional[int] = _PATIENCE_OPT,
    seed: Optional[int] = _SEED_OPT,
    m: Optional[int] = _M_OPT,
    batch_size: Optional[int] = _BATCH_OPT,
    max_train_windows: Optional[int] = _WINDOWS_OPT,
    walk_scan: Optional[str] = typer.Option(None, "--walk-scan", help="mamba | transformer"),
    temporal_scan: Optional[str] = typer.Option(None, "--temporal-scan", help="mamba | transformer"),
    max_workers: int = typer.Option(1, "--max-workers", min=1, help="Parallel walk workers."),
    log_file: Optional[Path] = _LOG_OPT,
):
    """Train a model, keep the best-validation checkpoint and report test metrics."""
    started = _now()
    with _exit_on_error():
        cfg = _resolve_config(
            config, *_overrides(epochs, patience, seed, m, batch_size, max_train_windows, walk_scan, temporal_scan)
        )
        ds = _load_data(data, cfg)
        result = run_training(ds, cfg, log_file=log_file, max_workers=max_workers)
        report = evaluate(result.model, ds, "test", result.walkset, cfg.train.batch_size)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(
        result.model, result.walkset, ds.normalizer, out / "checkpoint",
        extra={"walk_seed": result.walkset.seed, "best_epoch": result.best_epoch},
    )
    _write_csv(result.history, out / "history.csv")
    _write_csv(report.metrics, out / "metrics.csv")
    dump_run_config(cfg, out / "config.json")
    RunManifest(
        "train", cfg.to_dict(), cfg.train.seed, dataset_fingerprint(data),
        arguments={"data": data.as_posix()}, started_at=started,
    ).write(out)
    typer.secho(
        f"Best epoch {result.best_epoch} of {result.epochs_run}: val MAE {result.best_val_mae:.4f}, "
        f"test MAE {report.value('mae'):.4f} (naive {report.value('naive_mae'):.4f})",
        fg=typer.colors.GREEN,
    )


@app.command("eval")
def eval_cmd(
    checkpoint: Path = typer.Option(..., "--checkpoint", help="Checkpoint directory from 'train'."),
    data: Path = typer.Option(..., "--data", exists=True, file_okay=False, help="Dataset directory."),
    split: str = typer.Option("test", "--split", help="train | val | test"),
    batch_size: int = typer.Option(32, "--batch-size", min=1),
    out: Path = typer.Option(..., "--out", help="Output directory (will be created)."),
):
    """Write per-horizon metrics (with the naive baseline) and the raw predictions."""
    started = _now()
    if split not in ("train", "val", "test"):
        _fail(f"Unknown split '{split}' (expected train, val or test)", EXIT_USAGE)
    with _exit_on_error():
        model, walkset, normalizer = load_checkpoint(checkpoint)
        ds = load_dataset_dir(data, min_steps=model.cfg.T + model.cfg.T_out)
        ds.normalizer = normalizer
        report = evaluate(model, ds, split, walkset, batch_size)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(report.metrics, out / "metrics.csv")
    _write_csv(report.predictions_frame(ds), out / "predictions.csv")
    RunManifest(
        "eval", {"model": asdict(model.cfg)}, model.seed, dataset_fingerprint(data),
        arguments={"checkpoint": checkpoint.as_posix(), "split": split}, started_at=started,
    ).write(out)
    avg = report.metrics[report.metrics["horizon"] == "avg"]
    _print_metrics(avg, f"{split} metrics")


@app.command()
def ablate(
    data: Path = typer.Option(..., "--data", exists=True, file_okay=False, help="Dataset directory."),
    out: Path = typer.Option(..., "--out", help="Output directory (will be created)."),
    config: Optional[Path] = _CONFIG_OPT,
    epochs: Optional[int] = _EPOCHS_OPT,
    patience: Optional[int] = _PATIENCE_OPT,
    seed: Optional[int] = _SEED_OPT,
    m: Optional[int] = _M_OPT,
    batch_size: Optional[int] = _BATCH_OPT,
    max_train_windows: Optional[int] = _WINDOWS_OPT,
    transformer_batch_size: Optional[int] = typer.Option(
        None, "--transformer-batch-size", min=1, help="Batch size for temporal-transformer arms."
    ),
    max_workers: int = typer.Option(1, "--max-workers", min=1, help="Arms trained in parallel."),
    log_file: Optional[Path] = _LOG_OPT,
):
    """Train the four walk-scan x temporal-scan arms and compare test metrics."""
    started = _now()
    with _exit_on_error():
        cfg = _resolve_config(config, *_overrides(epochs, patience, seed, m, batch_size, max_train_windows))
        ds = _load_data(data, cfg)
        frame = run_ablation(
            ds, cfg, transformer_batch_size=transformer_batch_size, max_workers=max_workers, log_file=log_file
        )
        ensure_finite("ablation metrics", frame[["mae", "rmse", "mape"]].to_numpy())
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(frame, out / "ablation.csv")
    RunManifest(
        "ablate", cfg.to_dict(), cfg.train.seed, dataset_fingerprint(data),
        arguments={"data": data.as_posix(), "transformer_batch_size": transformer_batch_size},
        started_at=started,
    ).write(out)
    _print_metrics(frame, "Ablation (test split)")


@app.command()
def grid(
    data: Path = typer.Option(..., "--data", exists=True, file_okay=False, help="Dataset directory."),
    out: Path = typer.Option(..., "--out", help="Output directory (will be created)."),
    config: Optional[Path] = _CONFIG_OPT,
    epochs: Optional[int] = _EPOCHS_OPT,
    patience: Optional[int] = _PATIENCE_OPT,
    seed: Optional[int] = _SEED_OPT,
    max_train_windows: Optional[int] = _WINDOWS_OPT,
    max_workers: int = typer.Option(1, "--max-workers", min=1, help="Grid points trained in parallel."),
    log_file: Optional[Path] = _LOG_OPT,
):
    """Grid search over M, learning rate, weight decay and decay rate."""
    started = _now()
    with _exit_on_error():
        cfg = _resolve_config(config, *_overrides(epochs, patience, seed, None, None, max_train_windows))
        ds = _load_data(data, cfg)
        best, board = grid_search(ds, cfg, max_workers=max_workers, log_file=log_file)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(board, out / "leaderboard.csv")
    dump_run_config(best, out / "best_config.json")
    RunManifest(
        "grid", cfg.to_dict(), cfg.train.seed, dataset_fingerprint(data),
        arguments={"data": data.as_posix(), "points": len(board)}, started_at=started,
    ).write(out)
    _print_metrics(board[["rank", "M", "lr", "weight_decay", "lr_decay_rate", "mae"]], "Grid leaderboard (val)")


@app.command()
def forecast(
    checkpoint: Path = typer.Option(..., "--checkpoint", help="Checkpoint directory from 'train'."),
    data: Path = typer.Option(..., "--data", exists=True, file_okay=False, help="Dataset directory."),
    start: Optional[int] = typer.Option(None, "--from", help="First forecast step (default: earliest in test)."),
    steps: Optional[int] = typer.Option(None, "--steps", help="Steps to cover (default: up to 576)."),
    out: Path = typer.Option(..., "--out", help="Output directory (will be created)."),
):
    """
    Slide the input window one step at a time over the test split and average the
    overlapping T_out-step forecasts per target step.
    """
    started = _now()
    with _exit_on_error():
        model, walkset, normalizer = load_checkpoint(checkpoint)
        cfg = model.cfg
        ds = load_dataset_dir(data, min_steps=cfg.T + cfg.T_out)
        ds.normalizer = normalizer
        test_start, end = ds.split().test
        first = test_start + cfg.T if start is None else start
        count = min(576, end - first) if steps is None else steps
        if first < test_start + cfg.T or count < cfg.T_out or first + count > end:
            _fail(
                f"Forecast range [{first}, {first + count}) must lie in [{test_start + cfg.T}, {end}) "
                f"and span at least T_out={cfg.T_out} steps",
                EXIT_USAGE,
            )
        anchors = np.arange(first - 1, first + count - cfg.T_out, dtype=np.int64)
        pred = predict(model, ds, anchors, walkset)[..., 0]
        totals = np.zeros((count, ds.n_nodes))
        coverage = np.zeros(count, dtype=np.int64)
        for w, a in enumerate(anchors):
            offset = a + 1 - first
            totals[offset : offset + cfg.T_out] += pred[w]
            coverage[offset : offset + cfg.T_out] += 1
        averaged = totals / coverage[:, None]
        ensure_finite("forecast", averaged)
        times = np.arange(first, first + count)
        frame = pd.DataFrame(
            {
                "time": np.repeat(times, ds.n_nodes),
                "node": np.tile(np.arange(ds.n_nodes), count),
                "truth": ds.signals[first : first + count, :, 0].reshape(-1),
                "pred": averaged.reshape(-1),
            }
        )
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(frame, out / "forecast.csv")
    RunManifest(
        "forecast", {"model": asdict(cfg)}, model.seed, dataset_fingerprint(data),
        arguments={"checkpoint": checkpoint.as_posix(), "from": first, "steps": count},
        started_at=started,
    ).write(out)
    typer.secho(
        f"Forecast for steps {first}..{first + count - 1} from {len(anchors)} windows", fg=typer.colors.GREEN
    )


@config_app.command("validate")
def validate_config(
    config: Path = typer.Option(
        ..., "--config", "-c", exists=True, help="Path to YAML/JSON config to validate."
    ),
):
    """Validate a run configuration file."""
    try:
        load_run_config(config)
        typer.secho("✅ Config is valid.", fg=typer.colors.GREEN)
    except ConfigError as e:
        typer.secho(f"❌ Invalid config: {e}", fg=typer.colors.RED)
        raise typer.Exit(code=EXIT_USAGE)


@config_app.command("show")
def show_config(
    config: Optional[Path] = typer.Option(None, "--config", "-c", exists=True, help="YAML/JSON config."),
    json_output: bool = typer.Option(False, "--json", help="Emit the resolved config as JSON."),
):
    """Print the configuration with every default filled in."""
    with _exit_on_error():
        cfg = load_run_config(config)
    if json_output:
        typer.echo(json.dumps(cfg.to_dict(), indent=2))
        return
    table = Table(title="Run configuration")
    table.add_column("Section")
    table.add_column("Key")
    table.add_column("Value")
    for section, values in cfg.to_dict().items():
        for key, value in values.items():
            table.add_row(section, key, str(value))
    print(table)


if __name__ == "__main__":
    app()
