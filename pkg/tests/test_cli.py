import json
from pathlib import Path

import numpy as np
import pandas as pd
import pytest
import yaml
from typer.testing import CliRunner

from spot_mamba.cli import app
from spot_mamba.data import load_dataset_dir
from spot_mamba.model import load_checkpoint
from spot_mamba.trainer import predict

runner = CliRunner()

TINY_CONFIG = {
    "model": {
        "D": 4, "K": 4, "M": 1, "T": 3, "T_out": 3, "n_layers": 1, "ff_dim": 8,
        "dropout": 0.0, "d_state": 4, "conv_width": 2, "n_heads": 2,
    },
    "train": {"max_epochs": 2, "patience": 1, "batch_size": 16, "seed": 3, "max_train_windows": 16},
}


@pytest.fixture
def dataset(tmp_path: Path) -> Path:
    out = tmp_path / "data"
    result = runner.invoke(app, ["synth", "--nodes", "4", "--steps", "288", "--seed", "0", "--out", str(out)])
    assert result.exit_code == 0, result.output
    return out


@pytest.fixture
def tiny_config(tmp_path: Path) -> Path:
    path = tmp_path / "tiny.yml"
    with path.open("w") as f:
        yaml.dump(TINY_CONFIG, f)
    return path


@pytest.fixture
def trained(tmp_path: Path, dataset: Path, tiny_config: Path) -> Path:
    run = tmp_path / "run"
    result = runner.invoke(
        app,
        ["train", "--data", str(dataset), "--out", str(run), "--config", str(tiny_config)],
        catch_exceptions=False,
    )
    assert result.exit_code == 0, result.output
    return run


def test_help():
    result = runner.invoke(app, ["--help"])
    assert result.exit_code == 0
    assert "spotm" in result.stdout
    assert "forecast" in result.stdout


def test_init_writes_example_config(tmp_path: Path):
    target = tmp_path / "conf" / "config.yml"
    result = runner.invoke(app, ["init", "--path", str(target)])
    assert result.exit_code == 0
    assert yaml.safe_load(target.read_text())["model"]["D"] == 32


def test_synth_writes_dataset_and_manifest(dataset: Path):
    assert {p.name for p in dataset.iterdir()} == {"signals.csv", "edges.csv", "meta.json", "manifest.json"}
    manifest = json.loads((dataset / "manifest.json").read_text())
    assert manifest["command"] == "synth"
    assert manifest["seed"] == 0
    assert manifest["arguments"] == {"nodes": 4, "steps": 288}
    assert len(manifest["dataset_fingerprint"]) == 64
    assert len((dataset / "signals.csv").read_text().splitlines()) == 288


def test_synth_is_reproducible(tmp_path: Path, dataset: Path):
    again = tmp_path / "again"
    runner.invoke(app, ["synth", "--nodes", "4", "--steps", "288", "--seed", "0", "--out", str(again)])
    first = json.loads((dataset / "manifest.json").read_text())["dataset_fingerprint"]
    second = json.loads((again / "manifest.json").read_text())["dataset_fingerprint"]
    assert first == second
    assert (dataset / "signals.csv").read_bytes() == (again / "signals.csv").read_bytes()


def test_synth_rejects_short_series(tmp_path: Path):
    result = runner.invoke(app, ["synth", "--steps", "10", "--out", str(tmp_path / "x")])
    assert result.exit_code == 2
    assert not (tmp_path / "x").exists()


def test_walks_dump(tmp_path: Path, dataset: Path):
    out = tmp_path / "walks"
    result = runner.invoke(app, ["walks", "--data", str(dataset), "--K", "5", "--M", "2", "--out", str(out)])
    assert result.exit_code == 0, result.output
    rows = (out / "walks.csv").read_text().splitlines()
    assert len(rows) == 3 * 2 * 4
    assert all(len(r.split(",")) == 3 + 5 for r in rows)
    assert rows[0].startswith("bfs,0,0,0,")


def test_train_writes_run_directory(trained: Path):
    assert (trained / "checkpoint" / "manifest.txt").exists()
    history = pd.read_csv(trained / "history.csv")
    assert list(history.columns) == ["epoch", "train_loss", "val_mae", "lr"]
    assert 1 <= len(history) <= 2
    metrics = pd.read_csv(trained / "metrics.csv", dtype={"horizon": str})
    assert set(metrics["metric"]) == {"mae", "rmse", "mape", "naive_mae", "naive_rmse", "naive_mape"}
    assert set(metrics["horizon"]) == {"1", "2", "3", "avg"}
    config = json.loads((trained / "config.json").read_text())
    assert config["model"]["D"] == 4
    manifest = json.loads((trained / "manifest.json").read_text())
    assert manifest["command"] == "train" and manifest["seed"] == 3


def test_train_overrides_are_validated(tmp_path: Path, dataset: Path, tiny_config: Path):
    result = runner.invoke(
        app,
        ["train", "--data", str(dataset), "--out", str(tmp_path / "r"), "--config", str(tiny_config),
         "--epochs", "1"],
    )
    assert result.exit_code == 2


def test_train_without_signals_is_a_data_error(tmp_path: Path, tiny_config: Path):
    empty = tmp_path / "empty"
    empty.mkdir()
    result = runner.invoke(
        app, ["train", "--data", str(empty), "--out", str(tmp_path / "r"), "--config", str(tiny_config)]
    )
    assert result.exit_code == 3


def test_eval_reproduces_training_metrics(tmp_path: Path, dataset: Path, trained: Path):
    out = tmp_path / "eval"
    result = runner.invoke(
        app, ["eval", "--checkpoint", str(trained / "checkpoint"), "--data", str(dataset), "--out", str(out)]
    )
    assert result.exit_code == 0, result.output
    from_train = pd.read_csv(trained / "metrics.csv")
    from_eval = pd.read_csv(out / "metrics.csv")
    assert from_train["metric"].tolist() == from_eval["metric"].tolist()
    assert np.allclose(from_train["value"], from_eval["value"], rtol=1e-9)


def test_eval_predictions_recompute_metrics(tmp_path: Path, dataset: Path, trained: Path):
    out = tmp_path / "eval"
    runner.invoke(
        app,
        ["eval", "--checkpoint", str(trained / "checkpoint"), "--data", str(dataset), "--split", "val",
         "--out", str(out)],
    )
    predictions = pd.read_csv(out / "predictions.csv")
    metrics = pd.read_csv(out / "metrics.csv", dtype={"horizon": str})
    mae = metrics[(metrics.metric == "mae") & (metrics.horizon == "avg")]["value"].item()
    assert (predictions["truth"] - predictions["pred"]).abs().mean() == pytest.approx(mae)
    assert predictions["time"].min() >= 172


def test_eval_rejects_unknown_split(tmp_path: Path, dataset: Path, trained: Path):
    result = runner.invoke(
        app,
        ["eval", "--checkpoint", str(trained / "checkpoint"), "--data", str(dataset), "--split", "dev",
         "--out", str(tmp_path / "e")],
    )
    assert result.exit_code == 2


def test_eval_missing_checkpoint(tmp_path: Path, dataset: Path):
    result = runner.invoke(
        app, ["eval", "--checkpoint", str(tmp_path / "none"), "--data", str(dataset), "--out", str(tmp_path / "e")]
    )
    assert result.exit_code == 3


def test_forecast_averages_overlapping_windows(tmp_path: Path, dataset: Path, trained: Path):
    out = tmp_path / "fc"
    result = runner.invoke(
        app, ["forecast", "--checkpoint", str(trained / "checkpoint"), "--data", str(dataset), "--out", str(out)]
    )
    assert result.exit_code == 0, result.output
    frame = pd.read_csv(out / "forecast.csv")
    assert list(frame.columns) == ["time", "node", "truth", "pred"]
    # test split starts at 229; T = 3
    assert frame["time"].min() == 232 and frame["time"].max() == 287
    assert len(frame) == 56 * 4

    model, walks, normalizer = load_checkpoint(trained / "checkpoint")
    ds = load_dataset_dir(dataset, min_steps=6)
    ds.normalizer = normalizer
    pred = predict(model, ds, [231, 232], walks)[..., 0]
    first = frame[frame["time"] == 232]["pred"].to_numpy()
    second = frame[frame["time"] == 233]["pred"].to_numpy()
    assert np.allclose(first, pred[0, 0])
    assert np.allclose(second, (pred[0, 1] + pred[1, 0]) / 2)
    assert np.allclose(frame[frame["time"] == 232]["truth"], ds.signals[232, :, 0])


@pytest.mark.parametrize("args", [["--from", "100"], ["--steps", "2"], ["--from", "280", "--steps", "20"]])
def test_forecast_rejects_bad_ranges(tmp_path: Path, dataset: Path, trained: Path, args):
    result = runner.invoke(
        app,
        ["forecast", "--checkpoint", str(trained / "checkpoint"), "--data", str(dataset),
         "--out", str(tmp_path / "fc"), *args],
    )
    assert result.exit_code == 2


def test_ablate_writes_four_arms(tmp_path: Path, dataset: Path, tiny_config: Path):
    out = tmp_path / "ablation"
    result = runner.invoke(
        app,
        ["ablate", "--data", str(dataset), "--out", str(out), "--config", str(tiny_config),
         "--transformer-batch-size", "8"],
    )
    assert result.exit_code == 0, result.output
    frame = pd.read_csv(out / "ablation.csv")
    assert len(frame) == 4
    assert list(frame.columns) == ["walk_scan", "temporal_scan", "mae", "rmse", "mape", "avg_rank"]


@pytest.mark.slow
def test_grid_writes_leaderboard(tmp_path: Path, dataset: Path, tiny_config: Path):
    out = tmp_path / "grid"
    result = runner.invoke(app, ["grid", "--data", str(dataset), "--out", str(out), "--config", str(tiny_config)])
    assert result.exit_code == 0, result.output
    board = pd.read_csv(out / "leaderboard.csv")
    assert len(board) == 16
    best = json.loads((out / "best_config.json").read_text())
    assert best["train"]["lr"] == board["lr"].iloc[0]


def test_config_validate(tmp_path: Path, tiny_config: Path):
    result = runner.invoke(app, ["config", "validate", "--config", str(tiny_config)])
    assert result.exit_code == 0
    assert "Config is valid" in result.stdout

    bad = tmp_path / "bad.yml"
    bad.write_text("model:\n  D: 4\n  n_heads: 3\n")
    result = runner.invoke(app, ["config", "validate", "--config", str(bad)])
    assert result.exit_code == 2
    assert "not divisible" in result.stdout


def test_config_show_json(tiny_config: Path):
    result = runner.invoke(app, ["config", "show", "--config", str(tiny_config), "--json"])
    assert result.exit_code == 0
    doc = json.loads(result.stdout)
    assert doc["model"]["K"] == 4
    assert doc["train"]["decay_epochs"] == [20, 40, 60]


def test_walks_on_path_graph_are_reproducible(tmp_path: Path):
    edges = tmp_path / "path.csv"
    edges.write_text("0,1\n1,2\n2,3\n")
    for name in ("a", "b"):
        result = runner.invoke(
            app, ["walks", "--data", str(edges), "--K", "4", "--M", "1", "--seed", "5", "--out", str(tmp_path / name)]
        )
        assert result.exit_code == 0, result.output
    rows = (tmp_path / "a" / "walks.csv").read_text().splitlines()
    assert rows[0] == "bfs,0,0,0,1,2,3"
    assert len(rows) == 3 * 1 * 4
    assert (tmp_path / "a" / "walks.csv").read_bytes() == (tmp_path / "b" / "walks.csv").read_bytes()


def test_forecast_of_one_window_is_that_window(tmp_path: Path, dataset: Path, trained: Path):
    out = tmp_path / "fc"
    result = runner.invoke(
        app,
        ["forecast", "--checkpoint", str(trained / "checkpoint"), "--data", str(dataset),
         "--from", "240", "--steps", "3", "--out", str(out)],
    )
    assert result.exit_code == 0, result.output
    frame = pd.read_csv(out / "forecast.csv")
    assert len(frame) == 3 * 4

    model, walks, normalizer = load_checkpoint(trained / "checkpoint")
    ds = load_dataset_dir(dataset, min_steps=6)
    ds.normalizer = normalizer
    pred = predict(model, ds, [239], walks)[0, ..., 0]
    assert np.allclose(frame["pred"].to_numpy().reshape(3, 4), pred)


def test_ablation_mamba_arm_matches_train(tmp_path: Path, dataset: Path, tiny_config: Path, trained: Path):
    out = tmp_path / "ablation"
    result = runner.invoke(app, ["ablate", "--data", str(dataset), "--out", str(out), "--config", str(tiny_config)])
    assert result.exit_code == 0, result.output
    ablation = pd.read_csv(out / "ablation.csv")
    metrics = pd.read_csv(trained / "metrics.csv", dtype={"horizon": str})
    train_mae = metrics[(metrics.metric == "mae") & (metrics.horizon == "avg")]["value"].item()
    assert ablation["mae"].iloc[0] == pytest.approx(train_mae, rel=1e-12)


@pytest.mark.slow
def test_train_on_a_week_improves_on_naive(tmp_path: Path):
    data = tmp_path / "week"
    result = runner.invoke(app, ["synth", "--nodes", "8", "--steps", "2016", "--seed", "0", "--out", str(data)])
    assert result.exit_code == 0, result.output
    config = tmp_path / "small.yml"
    config.write_text(yaml.dump({
        "model": {"D": 8, "K": 6, "M": 2, "n_layers": 1, "ff_dim": 32, "dropout": 0.0,
                  "d_state": 4, "conv_width": 2, "n_heads": 2},
        "train": {"lr": 0.003, "max_epochs": 10, "patience": 3, "seed": 0},
    }))
    run = tmp_path / "run"
    result = runner.invoke(app, ["train", "--data", str(data), "--out", str(run), "--config", str(config)])
    assert result.exit_code == 0, result.output
    metrics = pd.read_csv(run / "metrics.csv", dtype={"horizon": str})
    avg = metrics[metrics.horizon == "avg"].set_index("metric")["value"]
    assert avg["mae"] < avg["naive_mae"]
