from __future__ import annotations

import concurrent.futures
import dataclasses
import itertools
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from spot_mamba import numerics as nx
from spot_mamba.config import ModelConfig, RunConfig, TrainConfig
from spot_mamba.data import STGDataset, gather_windows, make_windows, metrics_by_horizon, naive_predict
from spot_mamba.graph import WalkSet, generate_walks
from spot_mamba.model import SpotModel, embed_walks, forecast, huber_loss
from spot_mamba.numerics import Tape, Tensor
from spot_mamba.utils import ConfigError, DataError, NumericError, derive_rng, ensure_finite, log_event

logger = logging.getLogger(__name__)

HISTORY_COLUMNS = ["epoch", "train_loss", "val_mae", "lr"]
GRID: Dict[str, List] = {
    "M": [2, 4],
    "lr": [0.001, 0.0005],
    "weight_decay": [0.001, 0.0001],
    "lr_decay_rate": [0.1, 0.5],
}
ABLATION_ARMS: Tuple[Tuple[str, str], ...] = (
    ("mamba", "mamba"),
    ("mamba", "transformer"),
    ("transformer", "mamba"),
    ("transformer", "transformer"),
)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(
    state: AdamState, params: Dict[str, Tensor], lr: float, weight_decay: float = 0.0
) -> None:
    """Bias-corrected Adam; weight decay enters as an L2 term added to the gradient."""
    missing = [name for name, p in params.items() if p.grad is None]
    if missing:
        raise ValueError(f"adam_step: no gradient for parameter '{missing[0]}'")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = p.grad + weight_decay * p.data if weight_decay else p.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def lr_after_epoch(cfg: TrainConfig, epoch: int) -> float:
    """lr0 * rate^k with k the number of decay epochs <= `epoch` (0 before training)."""
    k = sum(1 for d in cfg.decay_epochs if d <= epoch)
    return cfg.lr * cfg.lr_decay_rate**k


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    model: SpotModel
    walkset: WalkSet
    history: pd.DataFrame
    best_epoch: int
    best_val_mae: float
    epochs_run: int
    config: RunConfig

    @property
    def stopped_early(self) -> bool:
        return self.epochs_run < self.config.train.max_epochs


def _batches(anchors: np.ndarray, batch_size: int):
    for b, start in enumerate(range(0, len(anchors), batch_size)):
        yield b, anchors[start : start + batch_size]


def _walk_seed(seed: int, epoch: int) -> int:
    return int(derive_rng(seed, 3, epoch).integers(2**31 - 1))


def train(
    model: SpotModel,
    ds: STGDataset,
    cfg: TrainConfig,
    walkset: WalkSet,
    log_file: Optional[Path] = None,
    run_cfg: Optional[RunConfig] = None,
) -> TrainResult:
    """
    Minibatch Adam on the Huber loss over normalised training windows, validating
    denormalised MAE each epoch. Returns the model restored to its best epoch.
    """
    mcfg = model.cfg
    split = ds.split()
    train_anchors = make_windows(split.train, mcfg.T, mcfg.T_out)
    if cfg.max_train_windows is not None:
        train_anchors = train_anchors[: cfg.max_train_windows]
    if len(train_anchors) == 0:
        raise DataError(
            f"train: the training split {split.train} holds no windows of T={mcfg.T}, T_out={mcfg.T_out}"
        )
    if len(make_windows(split.val, mcfg.T, mcfg.T_out)) == 0:
        raise DataError(f"train: the validation split {split.val} holds no windows")

    params = model.named_parameters()
    state = AdamState()
    rows: List[Dict] = []
    best_val, best_epoch, bad_epochs = math.inf, 0, 0
    best_state = model.state_dict()
    best_walkset = walkset
    epoch = 0
    for epoch in range(1, cfg.max_epochs + 1):
        lr = lr_after_epoch(cfg, epoch - 1)
        if cfg.resample_walks and epoch > 1:
            walkset = generate_walks(ds.graph, walkset.K, walkset.M, _walk_seed(cfg.seed, epoch))
        order = derive_rng(cfg.seed, 0, epoch).permutation(train_anchors)
        model.train()
        model.reseed_dropout(epoch)
        total, count = 0.0, 0
        for b, anchors in _batches(order, cfg.batch_size):
            batch = gather_windows(ds, anchors, mcfg.T, mcfg.T_out, mcfg.D_out)
            with Tape() as tape:
                pred = forecast(model, batch.inputs, batch.tod_idx, batch.dow_idx, walkset)
                loss = huber_loss(pred, batch.targets, mcfg.huber_delta)
            value = loss.item()
            if not math.isfinite(value):
                raise NumericError(f"train: non-finite loss {value} at epoch {epoch}, batch {b}")
            model.zero_grad()
            nx.backward(tape, loss, retain_intermediate=False)
            adam_step(state, params, lr, cfg.weight_decay)
            total += value * len(anchors)
            count += len(anchors)
        train_loss = total / count
        val_mae = validation_mae(model, ds, walkset, cfg.batch_size)
        rows.append({"epoch": epoch, "train_loss": train_loss, "val_mae": val_mae, "lr": lr})
        logger.info("epoch %d: train_loss=%.6f val_mae=%.4f lr=%g", epoch, train_loss, val_mae, lr)
        log_event(log_file, "epoch", epoch=epoch, train_loss=train_loss, val_mae=val_mae, lr=lr)
        if val_mae < best_val:
            best_val, best_epoch, bad_epochs = val_mae, epoch, 0
            best_state = model.state_dict()
            best_walkset = walkset
        else:
            bad_epochs += 1
            if bad_epochs >= cfg.patience:
                logger.info("early stop after epoch %d (best epoch %d)", epoch, best_epoch)
                log_event(log_file, "early_stop", epoch=epoch, best_epoch=best_epoch)
                break
    model.load_state_dict(best_state)
    model.eval()
    history = pd.DataFrame(rows, columns=HISTORY_COLUMNS)
    return TrainResult(
        model=model,
        walkset=best_walkset,
        history=history,
        best_epoch=best_epoch,
        best_val_mae=best_val,
        epochs_run=epoch,
        config=run_cfg or RunConfig(mcfg, cfg),
    )


def check_compatible(ds: STGDataset, mcfg: ModelConfig) -> None:
    if mcfg.steps_per_day != ds.steps_per_day:
        raise ConfigError(
            f"Section 'model': 'steps_per_day' is {mcfg.steps_per_day} but the dataset's "
            f"{ds.interval_minutes}-minute interval gives {ds.steps_per_day}"
        )
    if mcfg.D_in != ds.n_channels:
        raise ConfigError(f"Section 'model': 'D_in' is {mcfg.D_in} but the dataset has {ds.n_channels} channel(s)")
    if mcfg.D_out > ds.n_channels:
        raise ConfigError(f"Section 'model': 'D_out' is {mcfg.D_out} but the dataset has {ds.n_channels} channel(s)")


def build_run(ds: STGDataset, run_cfg: RunConfig, max_workers: int = 1) -> Tuple[SpotModel, WalkSet]:
    """Fresh model and walks for `run_cfg`, both seeded by the training seed."""
    check_compatible(ds, run_cfg.model)
    seed = run_cfg.train.seed
    walkset = generate_walks(ds.graph, run_cfg.model.K, run_cfg.model.M, seed, max_workers=max_workers)
    return SpotModel(run_cfg.model, ds.n_nodes, seed=seed), walkset


def run_training(
    ds: STGDataset, run_cfg: RunConfig, log_file: Optional[Path] = None, max_workers: int = 1
) -> TrainResult:
    model, walkset = build_run(ds, run_cfg, max_workers=max_workers)
    log_event(log_file, "train_start", config=run_cfg.to_dict(), n_nodes=ds.n_nodes, n_steps=ds.n_steps)
    result = train(model, ds, run_cfg.train, walkset, log_file=log_file, run_cfg=run_cfg)
    log_event(log_file, "train_end", best_epoch=result.best_epoch, best_val_mae=result.best_val_mae,
              epochs_run=result.epochs_run)
    return result


# ---------------------------------------------------------------------------
# evaluation


def predict(
    model: SpotModel, ds: STGDataset, anchors: Sequence[int], walkset: WalkSet, batch_size: int = 32
) -> np.ndarray:
    """Denormalised forecasts (windows, T_out, N, D_out); leaves the model untouched."""
    cfg = model.cfg
    anchors = np.asarray(anchors, dtype=np.int64)
    was_training = model.training
    model.eval()
    try:
        with nx.no_tape():
            W = embed_walks(model, walkset)
            chunks = []
            for _, chunk in _batches(anchors, batch_size):
                batch = gather_windows(ds, chunk, cfg.T, cfg.T_out, cfg.D_out)
                chunks.append(forecast(model, batch.inputs, batch.tod_idx, batch.dow_idx, walkset, W=W).data)
    finally:
        model.train(was_training)
    shape = (0, cfg.T_out, ds.n_nodes, cfg.D_out)
    pred = np.concatenate(chunks, axis=0) if chunks else np.zeros(shape)
    pred = ds.normalizer.denormalize(pred)
    ensure_finite("predict", pred)
    return pred


def validation_mae(model: SpotModel, ds: STGDataset, walkset: WalkSet, batch_size: int = 32) -> float:
    cfg = model.cfg
    anchors = make_windows(ds.split().val, cfg.T, cfg.T_out)
    pred = predict(model, ds, anchors, walkset, batch_size)
    truth = gather_windows(ds, anchors, cfg.T, cfg.T_out, cfg.D_out).targets_raw
    return float(np.mean(np.abs(pred - truth)))


@dataclass
class EvalReport:
    split: str
    anchors: np.ndarray
    pred: np.ndarray
    truth: np.ndarray
    metrics: pd.DataFrame

    def value(self, metric: str, horizon: str = "avg") -> float:
        rows = self.metrics[(self.metrics["metric"] == metric) & (self.metrics["horizon"] == horizon)]
        return float(rows["value"].iloc[0])

    def predictions_frame(self, ds: STGDataset) -> pd.DataFrame:
        """One row per (window, horizon, node): anchor,horizon,time,node,truth,pred."""
        W, H, N = self.pred.shape[:3]
        anchor = np.repeat(self.anchors, H * N)
        horizon = np.tile(np.repeat(np.arange(1, H + 1), N), W)
        return pd.DataFrame(
            {
                "anchor": anchor,
                "horizon": horizon,
                "time": anchor + horizon,
                "node": np.tile(np.arange(N), W * H),
                "truth": self.truth[..., 0].reshape(-1),
                "pred": self.pred[..., 0].reshape(-1),
            }
        )


def evaluate(
    model: SpotModel, ds: STGDataset, split: str, walkset: WalkSet, batch_size: int = 32
) -> EvalReport:
    """
    Denormalised MAE/RMSE/MAPE per horizon and averaged, followed by the same rows
    for the naive predictor prefixed with `naive_`.
    """
    cfg = model.cfg
    anchors = make_windows(ds.split().get(split), cfg.T, cfg.T_out)
    if len(anchors) == 0:
        raise DataError(f"evaluate: the {split} split holds no windows of T={cfg.T}, T_out={cfg.T_out}")
    pred = predict(model, ds, anchors, walkset, batch_size)
    truth = gather_windows(ds, anchors, cfg.T, cfg.T_out, cfg.D_out).targets_raw
    inputs_raw = ds.signals[anchors[:, None] + np.arange(-cfg.T + 1, 1)][..., : cfg.D_out]
    naive = naive_predict(inputs_raw, cfg.T_out)
    metrics = pd.concat(
        [metrics_by_horizon(pred, truth), metrics_by_horizon(naive, truth, prefix="naive_")],
        ignore_index=True,
    )
    report = EvalReport(split, anchors, pred, truth, metrics)
    for prefix in ("", "naive_"):
        mae, rmse = report.value(prefix + "mae"), report.value(prefix + "rmse")
        if mae > rmse * (1 + 1e-12):
            raise NumericError(f"evaluate: {prefix}mae {mae} exceeds {prefix}rmse {rmse}")
    return report


# ---------------------------------------------------------------------------
# comparisons


def add_ranks(frame: pd.DataFrame, metrics: Sequence[str] = ("mae", "rmse", "mape")) -> pd.DataFrame:
    """Rank rows per metric (1 = lowest) and average the ranks."""
    frame = frame.copy()
    for m in metrics:
        frame[f"rank_{m}"] = frame[m].rank(method="min").astype(int)
    frame["avg_rank"] = frame[[f"rank_{m}" for m in metrics]].mean(axis=1)
    return frame


def expand_grid(base: RunConfig, grid: Optional[Dict[str, Sequence]] = None) -> List[RunConfig]:
    """Cartesian product of `grid` over `base`; each point gets a seed derived from the base seed."""
    grid = GRID if grid is None else grid
    model_fields = {f.name for f in dataclasses.fields(ModelConfig)}
    train_fields = {f.name for f in dataclasses.fields(TrainConfig)}
    unknown = [k for k in grid if k not in model_fields | train_fields]
    if unknown:
        raise ConfigError(f"Grid has unexpected keys: {', '.join(sorted(unknown))}")
    keys = list(grid)
    points = []
    for i, values in enumerate(itertools.product(*(grid[k] for k in keys))):
        point = dict(zip(keys, values))
        seed = int(derive_rng(base.train.seed, 4, i).integers(2**31 - 1))
        points.append(
            base.with_overrides(
                model={k: v for k, v in point.items() if k in model_fields},
                train={**{k: v for k, v in point.items() if k in train_fields}, "seed": seed},
            )
        )
    return points


def _fan_out(jobs: List, fn, max_workers: int) -> List:
    if max_workers <= 1:
        return [fn(job) for job in jobs]
    with concurrent.futures.ThreadPoolExecutor(max_workers=max_workers) as executor:
        return list(executor.map(fn, jobs))


def _summary(report: EvalReport) -> Dict[str, float]:
    return {m: report.value(m) for m in ("mae", "rmse", "mape")}


def grid_search(
    ds: STGDataset,
    base: RunConfig,
    grid: Optional[Dict[str, Sequence]] = None,
    max_workers: int = 1,
    log_file: Optional[Path] = None,
) -> Tuple[RunConfig, pd.DataFrame]:
    """Train every grid point; the leaderboard is ordered by validation MAE."""
    grid = GRID if grid is None else grid
    points = expand_grid(base, grid)
    logger.info("grid search over %d configurations", len(points))

    def run_point(args):
        i, cfg = args
        result = run_training(ds, cfg, log_file=log_file)
        report = evaluate(result.model, ds, "val", result.walkset, cfg.train.batch_size)
        row = {"point": i}
        for key in grid:
            row[key] = getattr(cfg.model, key) if hasattr(cfg.model, key) else getattr(cfg.train, key)
        row.update(seed=cfg.train.seed, best_epoch=result.best_epoch, epochs_run=result.epochs_run)
        row.update(_summary(report))
        log_event(log_file, "grid_point", **row)
        return row

    rows = _fan_out(list(enumerate(points)), run_point, max_workers)
    board = add_ranks(pd.DataFrame(rows))
    board = board.sort_values(["mae", "point"], kind="mergesort").reset_index(drop=True)
    board.insert(0, "rank", np.arange(1, len(board) + 1))
    best = points[int(board["point"].iloc[0])]
    return best, board


def run_ablation(
    ds: STGDataset,
    base: RunConfig,
    transformer_batch_size: Optional[int] = None,
    max_workers: int = 1,
    log_file: Optional[Path] = None,
) -> pd.DataFrame:
    """Test-split metrics for the four (walk_scan, temporal_scan) arms under one seed."""

    def run_arm(arm):
        walk_kind, temporal_kind = arm
        train_over = {}
        if temporal_kind == "transformer" and transformer_batch_size:
            train_over["batch_size"] = transformer_batch_size
        cfg = base.with_overrides(
            model={"walk_scan_kind": walk_kind, "temporal_scan_kind": temporal_kind}, train=train_over
        )
        result = run_training(ds, cfg, log_file=log_file)
        report = evaluate(result.model, ds, "test", result.walkset, cfg.train.batch_size)
        row = {"walk_scan": walk_kind, "temporal_scan": temporal_kind, **_summary(report)}
        log_event(log_file, "ablation_arm", **row)
        return row

    rows = _fan_out(list(ABLATION_ARMS), run_arm, max_workers)
    frame = add_ranks(pd.DataFrame(rows))
    return frame[["walk_scan", "temporal_scan", "mae", "rmse", "mape", "avg_rank"]]
