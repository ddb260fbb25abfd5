from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from spot_mamba.graph import Graph, load_edges, ring_graph, save_edges
from spot_mamba.utils import DataError, ShapeError, hash_files

logger = logging.getLogger(__name__)

SIGNALS_FILE = "signals.csv"
EDGES_FILE = "edges.csv"
META_FILE = "meta.json"
MINUTES_PER_DAY = 1440
SYNTHETIC_START = datetime(2018, 1, 1)  # a Monday

Range = Tuple[int, int]


@dataclass(frozen=True)
class SplitRanges:
    train: Range
    val: Range
    test: Range

    def get(self, name: str) -> Range:
        if name not in ("train", "val", "test"):
            raise DataError(f"unknown split {name!r} (expected train, val or test)")
        return getattr(self, name)


def split_622(n_steps: Union[int, "STGDataset"]) -> SplitRanges:
    """Temporal 6:2:2 split with floor arithmetic; the remainder goes to test."""
    tau = n_steps.n_steps if isinstance(n_steps, STGDataset) else int(n_steps)
    n_train = math.floor(0.6 * tau)
    n_val = math.floor(0.2 * tau)
    return SplitRanges((0, n_train), (n_train, n_train + n_val), (n_train + n_val, tau))


@dataclass
class Normalizer:
    """Per-channel z-score statistics."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        self.std = np.asarray(self.std, dtype=np.float64).reshape(-1)
        if np.any(~np.isfinite(self.std)) or np.any(self.std <= 0):
            raise DataError(f"normalize: channel std must be positive, got {self.std.tolist()}")

    @classmethod
    def fit(cls, values: np.ndarray) -> "Normalizer":
        """Statistics over every step and node of `values` (steps, N, channels)."""
        flat = values.reshape(-1, values.shape[-1])
        return cls(flat.mean(axis=0), flat.std(axis=0))

    def normalize(self, values: np.ndarray) -> np.ndarray:
        return (values - self.mean[: values.shape[-1]]) / self.std[: values.shape[-1]]

    def denormalize(self, values: np.ndarray) -> np.ndarray:
        return values * self.std[: values.shape[-1]] + self.mean[: values.shape[-1]]

    def to_dict(self) -> Dict[str, List[float]]:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, doc: Dict) -> "Normalizer":
        return cls(np.asarray(doc["mean"]), np.asarray(doc["std"]))


@dataclass
class STGDataset:
    """
    Observations `signals` (steps, N, channels) on a fixed graph. Normalisation
    statistics are fitted on the training split only.
    """

    signals: np.ndarray
    start_time: datetime
    interval_minutes: int
    graph: Graph
    min_steps: int = 24
    normalizer: Normalizer = field(init=False)

    def __post_init__(self):
        self.signals = np.asarray(self.signals, dtype=np.float64)
        if self.signals.ndim == 2:
            self.signals = self.signals[:, :, None]
        if self.signals.ndim != 3:
            raise DataError(f"dataset: signals must be (steps, N, channels), got {self.signals.shape}")
        if self.signals.shape[1] != self.graph.n_nodes:
            raise DataError(
                f"dataset: signals have {self.signals.shape[1]} nodes, graph has {self.graph.n_nodes}"
            )
        if self.n_steps < self.min_steps:
            raise DataError(f"dataset: {self.n_steps} steps, need at least {self.min_steps}")
        if self.interval_minutes <= 0 or MINUTES_PER_DAY % self.interval_minutes:
            raise DataError(
                f"dataset: interval of {self.interval_minutes} min does not divide a day evenly"
            )
        if not np.all(np.isfinite(self.signals)):
            raise DataError("dataset: signals contain non-finite values")
        train = self.split().train
        self.normalizer = Normalizer.fit(self.signals[train[0] : train[1]])

    @property
    def n_steps(self) -> int:
        return int(self.signals.shape[0])

    @property
    def n_nodes(self) -> int:
        return int(self.signals.shape[1])

    @property
    def n_channels(self) -> int:
        return int(self.signals.shape[2])

    @property
    def steps_per_day(self) -> int:
        return MINUTES_PER_DAY // self.interval_minutes

    def split(self) -> SplitRanges:
        return split_622(self.n_steps)

    def normalized(self) -> np.ndarray:
        return self.normalizer.normalize(self.signals)

    def calendar(self) -> Tuple[np.ndarray, np.ndarray]:
        """Time-of-day slot and day-of-week (Monday = 0) for every step."""
        t = np.arange(self.n_steps, dtype=np.int64)
        minutes = self.start_time.hour * 60 + self.start_time.minute + t * self.interval_minutes
        tod = (minutes % MINUTES_PER_DAY) // self.interval_minutes
        dow = (self.start_time.weekday() + minutes // MINUTES_PER_DAY) % 7
        return tod, dow


def calendar_indices(ds: STGDataset, t: int) -> Tuple[int, int]:
    minutes = ds.start_time.hour * 60 + ds.start_time.minute + int(t) * ds.interval_minutes
    tod = (minutes % MINUTES_PER_DAY) // ds.interval_minutes
    dow = (ds.start_time.weekday() + minutes // MINUTES_PER_DAY) % 7
    return int(tod), int(dow)


def normalize(ds: STGDataset) -> np.ndarray:
    return ds.normalized()


def denormalize(ds: STGDataset, values: np.ndarray) -> np.ndarray:
    return ds.normalizer.denormalize(values)


# ---------------------------------------------------------------------------
# windows


def make_windows(split_range: Range, T: int, T_out: int) -> np.ndarray:
    """
    Anchors t (index of the last input step) whose input window [t-T+1, t] and
    target window [t+1, t+T_out] both lie in `split_range`.
    """
    start, stop = split_range
    count = (stop - start) - T - T_out + 1
    if count <= 0:
        return np.zeros(0, dtype=np.int64)
    return np.arange(start + T - 1, start + T - 1 + count, dtype=np.int64)


@dataclass
class WindowBatch:
    anchors: np.ndarray
    inputs: np.ndarray
    targets: np.ndarray
    targets_raw: np.ndarray
    tod_idx: np.ndarray
    dow_idx: np.ndarray
    target_tod_idx: np.ndarray
    target_dow_idx: np.ndarray

    def __len__(self) -> int:
        return int(self.anchors.shape[0])


def gather_windows(ds: STGDataset, anchors: Sequence[int], T: int, T_out: int, d_out: int = 1) -> WindowBatch:
    """Normalised inputs/targets plus raw targets for the windows ending at `anchors`."""
    anchors = np.asarray(anchors, dtype=np.int64)
    if anchors.size and (anchors.min() - T + 1 < 0 or anchors.max() + T_out >= ds.n_steps):
        raise DataError(f"windows: anchors {anchors.min()}..{anchors.max()} fall outside the series")
    inp = anchors[:, None] + np.arange(-T + 1, 1)
    tgt = anchors[:, None] + np.arange(1, T_out + 1)
    norm = ds.normalized()
    tod, dow = ds.calendar()
    return WindowBatch(
        anchors=anchors,
        inputs=norm[inp],
        targets=norm[tgt][..., :d_out],
        targets_raw=ds.signals[tgt][..., :d_out],
        tod_idx=tod[inp],
        dow_idx=dow[inp],
        target_tod_idx=tod[tgt],
        target_dow_idx=dow[tgt],
    )


def naive_predict(window: np.ndarray, T_out: int) -> np.ndarray:
    """Repeat the last T_out observed steps of (..., T, N, D) as the forecast."""
    window = np.asarray(window)
    if window.ndim < 3 or window.shape[-3] < T_out:
        raise DataError(f"naive_predict: window {window.shape} is shorter than T_out={T_out}")
    return window[..., window.shape[-3] - T_out :, :, :].copy()


# ---------------------------------------------------------------------------
# metrics


def _check_pair(name: str, pred: np.ndarray, truth: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    pred, truth = np.asarray(pred, dtype=np.float64), np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ShapeError(f"{name}: prediction shape {pred.shape} != truth shape {truth.shape}")
    return pred, truth


def metric_mae(pred: np.ndarray, truth: np.ndarray) -> float:
    pred, truth = _check_pair("mae", pred, truth)
    return float(np.mean(np.abs(pred - truth)))


def metric_rmse(pred: np.ndarray, truth: np.ndarray) -> float:
    pred, truth = _check_pair("rmse", pred, truth)
    return float(np.sqrt(np.mean((pred - truth) ** 2)))


def metric_mape(pred: np.ndarray, truth: np.ndarray) -> float:
    """Percent error over entries with nonzero truth."""
    pred, truth = _check_pair("mape", pred, truth)
    mask = truth != 0
    if not np.any(mask):
        raise DataError("mape: every ground-truth value is zero")
    return float(np.mean(np.abs((pred[mask] - truth[mask]) / truth[mask])) * 100.0)


METRICS = {"mae": metric_mae, "rmse": metric_rmse, "mape": metric_mape}


def metrics_by_horizon(pred: np.ndarray, truth: np.ndarray, prefix: str = "") -> pd.DataFrame:
    """
    Rows `metric,horizon,value` for every horizon 1..T_out and "avg", with
    pred/truth shaped (windows, T_out, N, D).
    """
    pred, truth = _check_pair("metrics", pred, truth)
    rows = []
    for name, fn in METRICS.items():
        for h in range(pred.shape[1]):
            rows.append((prefix + name, str(h + 1), fn(pred[:, h], truth[:, h])))
        rows.append((prefix + name, "avg", fn(pred, truth)))
    return pd.DataFrame(rows, columns=["metric", "horizon", "value"])


# ---------------------------------------------------------------------------
# files


def _read_meta(path: Path) -> Tuple[datetime, int]:
    try:
        meta = json.loads(Path(path).read_text(encoding="utf-8"))
        return datetime.fromisoformat(meta["start_time"]), int(meta["interval_minutes"])
    except (OSError, ValueError, KeyError, TypeError) as e:
        raise DataError(f"{path}: invalid meta document ({e})") from e


def _read_signals(path: Path) -> np.ndarray:
    path = Path(path)
    if path.suffix == ".npz":
        with np.load(path) as archive:
            if "data" not in archive:
                raise DataError(f"{path}: archive has no 'data' array")
            data = np.asarray(archive["data"], dtype=np.float64)
        if data.ndim == 3:
            data = data[:, :, :1]
        elif data.ndim != 2:
            raise DataError(f"{path}: expected (steps, N) or (steps, N, C), got {data.shape}")
        return data
    try:
        frame = pd.read_csv(path, header=None, dtype=str, keep_default_na=False)
    except pd.errors.EmptyDataError:
        raise DataError(f"{path}: no rows") from None
    except (OSError, pd.errors.ParserError) as e:
        raise DataError(f"{path}: cannot read signals ({e})") from e
    first_data_row = 1
    if len(frame) and pd.to_numeric(frame.iloc[0], errors="coerce").isna().all():
        frame = frame.iloc[1:]
        first_data_row = 2
    try:
        values = frame.to_numpy(dtype=np.float64)
    except ValueError:
        values = None
    if values is None or not np.all(np.isfinite(values)):
        coerced = frame.apply(pd.to_numeric, errors="coerce").to_numpy(dtype=np.float64)
        bad = np.argwhere(~np.isfinite(coerced))
        row, col = (int(bad[0][0]), int(bad[0][1])) if len(bad) else (0, 0)
        raise DataError(
            f"{path}: non-numeric cell at row {row + first_data_row}, column {col + 1}: "
            f"{frame.iat[row, col]!r}"
        )
    return values


def load_dataset(
    signals_path: Path, edges_path: Path, meta_path: Path, min_steps: int = 24
) -> STGDataset:
    """Signals CSV (steps x N) or PEMS .npz, edge list CSV and meta JSON."""
    values = _read_signals(signals_path)
    graph = load_edges(edges_path)
    if values.shape[1] != graph.n_nodes:
        raise DataError(
            f"{signals_path}: {values.shape[1]} signal columns but the edge list spans "
            f"{graph.n_nodes} nodes"
        )
    start, interval = _read_meta(meta_path)
    ds = STGDataset(values, start, interval, graph, min_steps=min_steps)
    logger.info("loaded dataset: %d steps, %d nodes, %d-minute interval", ds.n_steps, ds.n_nodes, interval)
    return ds


def load_dataset_dir(directory: Path, min_steps: int = 24) -> STGDataset:
    directory = Path(directory)
    signals = directory / SIGNALS_FILE
    if not signals.exists() and (directory / "signals.npz").exists():
        signals = directory / "signals.npz"
    return load_dataset(signals, directory / EDGES_FILE, directory / META_FILE, min_steps=min_steps)


def save_dataset(ds: STGDataset, out_dir: Path) -> List[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    signals_path = out_dir / SIGNALS_FILE
    pd.DataFrame(ds.signals[:, :, 0]).to_csv(
        signals_path, index=False, header=False, float_format="%.17g", lineterminator="\n"
    )
    edges_path = out_dir / EDGES_FILE
    save_edges(ds.graph, edges_path)
    meta_path = out_dir / META_FILE
    meta = {"start_time": ds.start_time.isoformat(), "interval_minutes": ds.interval_minutes}
    meta_path.write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
    return [signals_path, edges_path, meta_path]


def dataset_fingerprint(directory: Path) -> str:
    directory = Path(directory)
    signals = directory / SIGNALS_FILE
    if not signals.exists():
        signals = directory / "signals.npz"
    return hash_files([signals, directory / EDGES_FILE, directory / META_FILE])


def generate_synthetic(n_nodes: int, n_steps: int, seed: int, min_steps: int = 24) -> STGDataset:
    """
    Ring of `n_nodes` sensors, 5-minute data starting Monday 00:00. Node i carries a
    daily sinusoid phase-shifted by 12 i steps, its second harmonic, and N(0, 1) noise.
    """
    if n_nodes < 2:
        raise DataError(f"synthetic: need at least 2 nodes, got {n_nodes}")
    rng = np.random.default_rng(seed)
    period = 288
    phase = np.arange(n_steps)[:, None] + 12 * np.arange(n_nodes)[None, :]
    angle = 2.0 * np.pi * phase / period
    signal = 50.0 + 20.0 * np.sin(angle) + 5.0 * np.sin(2.0 * angle)
    signal = signal + rng.normal(0.0, 1.0, size=signal.shape)
    return STGDataset(signal, SYNTHETIC_START, 5, ring_graph(n_nodes), min_steps=min_steps)
