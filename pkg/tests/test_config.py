from pathlib import Path

import pytest

import spot_mamba
from spot_mamba.config import (
    ModelConfig,
    RunConfig,
    TrainConfig,
    dump_run_config,
    load_run_config,
    run_config_from_dict,
)
from spot_mamba.utils import ConfigError


def test_defaults():
    cfg = RunConfig()
    assert (cfg.model.D, cfg.model.K, cfg.model.M, cfg.model.T, cfg.model.T_out) == (32, 20, 2, 12, 12)
    assert cfg.model.width == 128
    assert cfg.train.decay_epochs == (20, 40, 60)
    assert (cfg.train.max_epochs, cfg.train.patience, cfg.train.batch_size) == (300, 20, 32)


def test_example_config_matches_defaults():
    example = Path(spot_mamba.__file__).parent / "config.example.yml"
    assert load_run_config(example) == RunConfig()


def test_none_gives_defaults():
    assert load_run_config(None) == RunConfig()


def test_scientific_notation_is_read_as_float(tmp_path: Path):
    path = tmp_path / "config.yml"
    path.write_text("train:\n  lr: 1e-3\n  weight_decay: 5e-4\n")
    cfg = load_run_config(path)
    assert cfg.train.lr == 0.001
    assert cfg.train.weight_decay == 0.0005


def test_json_round_trip(tmp_path: Path):
    cfg = RunConfig(ModelConfig(D=8, n_heads=2), TrainConfig(decay_epochs=(5,), seed=4))
    path = tmp_path / "config.json"
    dump_run_config(cfg, path)
    assert load_run_config(path) == cfg


@pytest.mark.parametrize(
    "model,match",
    [
        ({"D": 0}, "'D' must be a positive integer"),
        ({"K": 2.5}, "'K' must be a positive integer"),
        ({"T": True}, "'T' must be a positive integer"),
        ({"dropout": 1.0}, "'dropout' must lie in"),
        ({"walk_scan_kind": "lstm"}, "must be one of mamba, transformer"),
        ({"D": 4, "n_heads": 3}, "not divisible by n_heads=3"),
        ({"D": 6, "n_heads": 4, "walk_scan_kind": "transformer"}, "D=6 is not divisible"),
        ({"huber_delta": "wide"}, "'huber_delta' must be a number"),
    ],
)
def test_invalid_model_values(model, match):
    with pytest.raises(ConfigError, match=match):
        run_config_from_dict({"model": model})


@pytest.mark.parametrize(
    "train,match",
    [
        ({"lr": 0}, "'lr' must be positive"),
        ({"weight_decay": -1e-4}, "'weight_decay' must be >= 0"),
        ({"lr_decay_rate": 1.5}, "'lr_decay_rate' must lie in"),
        ({"max_epochs": 5, "patience": 5}, "must be smaller than 'max_epochs'"),
        ({"batch_size": 0}, "'batch_size' must be a positive integer"),
        ({"seed": -1}, "'seed' must be a non-negative integer"),
        ({"max_train_windows": 0}, "'max_train_windows' must be >= 1"),
    ],
)
def test_invalid_train_values(train, match):
    with pytest.raises(ConfigError, match=match):
        run_config_from_dict({"train": train})


def test_unexpected_keys_and_sections():
    with pytest.raises(ConfigError, match="Section 'model' has unexpected keys: Dx"):
        run_config_from_dict({"model": {"Dx": 4}})
    with pytest.raises(ConfigError, match="unexpected sections: optim"):
        run_config_from_dict({"optim": {}})
    with pytest.raises(ConfigError, match="must be a mapping"):
        run_config_from_dict({"train": [1, 2]})


def test_missing_and_malformed_files(tmp_path: Path):
    with pytest.raises(ConfigError, match="Config not found"):
        load_run_config(tmp_path / "nope.yml")
    bad = tmp_path / "bad.yml"
    bad.write_text("model: [\n")
    with pytest.raises(ConfigError, match="not a valid YAML"):
        load_run_config(bad)


def test_overrides_skip_none_and_validate():
    cfg = RunConfig().with_overrides(model={"M": 4, "K": None}, train={"max_epochs": 30, "seed": None})
    assert cfg.model.M == 4 and cfg.model.K == 20
    assert cfg.train.max_epochs == 30 and cfg.train.seed == 0
    with pytest.raises(ConfigError, match="unexpected keys: epochs"):
        RunConfig().with_overrides(train={"epochs": 3})
    with pytest.raises(ConfigError, match="must be smaller"):
        RunConfig().with_overrides(train={"max_epochs": 10})
