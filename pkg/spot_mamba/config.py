from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

import yaml

from spot_mamba.utils import ConfigError

SCAN_KINDS = ("mamba", "transformer")


def _require(cond: bool, section: str, message: str) -> None:
    if not cond:
        raise ConfigError(f"Section '{section}': {message}")


def _coerce_floats(obj, section: str, names) -> None:
    # YAML reads 1e-3 as a string
    for name in names:
        value = getattr(obj, name)
        try:
            object.__setattr__(obj, name, float(value))
        except (TypeError, ValueError):
            raise ConfigError(f"Section '{section}': '{name}' must be a number, got {value!r}") from None


@dataclass(frozen=True)
class ModelConfig:
    D: int = 32
    K: int = 20
    M: int = 2
    T: int = 12
    T_out: int = 12
    D_in: int = 1
    D_out: int = 1
    n_layers: int = 3
    ff_dim: int = 256
    dropout: float = 0.1
    steps_per_day: int = 288
    walk_scan_kind: str = "mamba"
    temporal_scan_kind: str = "mamba"
    d_state: int = 16
    conv_width: int = 4
    expand: int = 2
    n_heads: int = 4
    huber_delta: float = 1.0

    def __post_init__(self):
        _coerce_floats(self, "model", ("dropout", "huber_delta"))
        for name in ("D", "K", "M", "T", "T_out", "D_in", "D_out", "n_layers", "ff_dim",
                     "steps_per_day", "d_state", "conv_width", "expand", "n_heads"):
            value = getattr(self, name)
            _require(
                isinstance(value, int) and not isinstance(value, bool) and value >= 1,
                "model", f"'{name}' must be a positive integer, got {value!r}",
            )
        _require(0.0 <= float(self.dropout) < 1.0, "model", f"'dropout' must lie in [0, 1), got {self.dropout!r}")
        _require(float(self.huber_delta) > 0, "model", f"'huber_delta' must be positive, got {self.huber_delta!r}")
        for name in ("walk_scan_kind", "temporal_scan_kind"):
            value = getattr(self, name)
            _require(value in SCAN_KINDS, "model", f"'{name}' must be one of {', '.join(SCAN_KINDS)}, got {value!r}")
        width = 4 * self.D
        _require(width % self.n_heads == 0, "model", f"4*D={width} is not divisible by n_heads={self.n_heads}")
        if self.walk_scan_kind == "transformer":
            _require(self.D % self.n_heads == 0, "model", f"D={self.D} is not divisible by n_heads={self.n_heads}")

    @property
    def width(self) -> int:
        """Width of the joint per-step feature."""
        return 4 * self.D


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.001
    weight_decay: float = 0.0001
    lr_decay_rate: float = 0.5
    decay_epochs: Tuple[int, ...] = (20, 40, 60)
    max_epochs: int = 300
    patience: int = 20
    batch_size: int = 32
    seed: int = 0
    resample_walks: bool = False
    max_train_windows: Optional[int] = None

    def __post_init__(self):
        _coerce_floats(self, "train", ("lr", "weight_decay", "lr_decay_rate"))
        object.__setattr__(self, "decay_epochs", tuple(int(e) for e in self.decay_epochs))
        _require(float(self.lr) > 0, "train", f"'lr' must be positive, got {self.lr!r}")
        _require(float(self.weight_decay) >= 0, "train", f"'weight_decay' must be >= 0, got {self.weight_decay!r}")
        _require(0 < float(self.lr_decay_rate) <= 1, "train", f"'lr_decay_rate' must lie in (0, 1], got {self.lr_decay_rate!r}")
        _require(all(e >= 1 for e in self.decay_epochs), "train", f"'decay_epochs' must be positive, got {list(self.decay_epochs)}")
        for name in ("max_epochs", "patience", "batch_size"):
            value = getattr(self, name)
            _require(
                isinstance(value, int) and not isinstance(value, bool) and value >= 1,
                "train", f"'{name}' must be a positive integer, got {value!r}",
            )
        _require(self.patience < self.max_epochs, "train",
                 f"'patience' ({self.patience}) must be smaller than 'max_epochs' ({self.max_epochs})")
        _require(isinstance(self.seed, int) and self.seed >= 0, "train", f"'seed' must be a non-negative integer, got {self.seed!r}")
        if self.max_train_windows is not None:
            _require(self.max_train_windows >= 1, "train", f"'max_train_windows' must be >= 1, got {self.max_train_windows!r}")


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self) -> Dict[str, Dict[str, Any]]:
        doc = dataclasses.asdict(self)
        doc["train"]["decay_epochs"] = list(self.train.decay_epochs)
        return doc

    def with_overrides(self, model: Optional[Dict[str, Any]] = None, train: Optional[Dict[str, Any]] = None) -> "RunConfig":
        """Apply non-None overrides, e.g. from command-line flags."""
        model = {k: v for k, v in (model or {}).items() if v is not None}
        train = {k: v for k, v in (train or {}).items() if v is not None}
        _validate_section_keys("model", ModelConfig, model)
        _validate_section_keys("train", TrainConfig, train)
        return RunConfig(dataclasses.replace(self.model, **model), dataclasses.replace(self.train, **train))


def _validate_section_keys(section: str, cls, data: Dict) -> None:
    """Check for unexpected keys in a config section."""
    allowed = {f.name for f in dataclasses.fields(cls)}
    extra = set(data.keys()) - allowed
    if extra:
        raise ConfigError(f"Section '{section}' has unexpected keys: {', '.join(sorted(extra))}")


def run_config_from_dict(doc: Optional[Dict]) -> RunConfig:
    doc = doc or {}
    if not isinstance(doc, dict):
        raise ConfigError(f"Config must be a mapping with 'model' and 'train' sections, got {type(doc).__name__}")
    extra = set(doc) - {"model", "train"}
    if extra:
        raise ConfigError(f"Config has unexpected sections: {', '.join(sorted(extra))}")
    sections = {}
    for name, cls in (("model", ModelConfig), ("train", TrainConfig)):
        data = doc.get(name) or {}
        if not isinstance(data, dict):
            raise ConfigError(f"Section '{name}' must be a mapping, got {type(data).__name__}")
        _validate_section_keys(name, cls, data)
        try:
            sections[name] = cls(**data)
        except TypeError as e:
            raise ConfigError(f"Section '{name}': {e}") from e
    return RunConfig(**sections)


def load_run_config(path: Optional[Path]) -> RunConfig:
    """YAML or JSON run configuration; None gives the defaults."""
    if path is None:
        return RunConfig()
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"Config not found: {p}")
    try:
        with p.open("r", encoding="utf-8") as f:
            data = yaml.safe_load(f) or {}
    except yaml.YAMLError as e:
        raise ConfigError(f"{p}: not a valid YAML/JSON document ({e})") from e
    return run_config_from_dict(data)


def dump_run_config(cfg: RunConfig, path: Path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2) + "\n", encoding="utf-8")
