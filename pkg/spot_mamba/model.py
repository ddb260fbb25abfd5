"""
The forecasting network.

Walks over the sensor graph are scanned into node embeddings W (N x D). Each input
step is then described per node by [projected signal, w_i, time-of-day,
day-of-week] (width 4D), scanned along time per node, mixed across nodes per step
by a transformer, and mapped to T_out future values per node by an MLP head.

Batched tensors are laid out (batch, time, node, channel).
"""
from __future__ import annotations

import dataclasses
import json
import logging
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from spot_mamba import numerics as nx
from spot_mamba.config import ModelConfig
from spot_mamba.data import Normalizer
from spot_mamba.graph import WALK_TYPES, WalkSet
from spot_mamba.nn import MLP, Linear, Module, TransformerEncoder
from spot_mamba.numerics import Tensor
from spot_mamba.ssm import MambaStack
from spot_mamba.utils import DataError, ShapeError, derive_rng

logger = logging.getLogger(__name__)

MANIFEST_FILE = "manifest.txt"
CONFIG_FILE = "config.json"
WALKS_FILE = "walks.csv"
STATS_FILE = "stats.json"


class SpotModel(Module):
    def __init__(self, cfg: ModelConfig, n_nodes: int, seed: int = 0):
        if n_nodes < 1:
            raise ShapeError(f"SpotModel: need at least one node, got {n_nodes}")
        self.cfg = cfg
        self.n_nodes = n_nodes
        self.seed = seed
        rng = derive_rng(seed, 1)
        self.dropout_rng = derive_rng(seed, 2)
        D, width = cfg.D, cfg.width

        self.node_table = Tensor.parameter(rng.normal(0.0, 1.0, size=(n_nodes, D)))
        self.walk_scanners = [self._walk_scanner(rng) for _ in WALK_TYPES]
        # 1x1 convolution over the M extractions, one aggregator per walk type
        self.walk_mix_weight = Tensor.parameter(np.full((len(WALK_TYPES), cfg.M), 1.0 / cfg.M))
        self.walk_mix_bias = Tensor.parameter(np.zeros(len(WALK_TYPES)))
        self.fusion = MLP([3 * D, D, D], rng, cfg.dropout, self.dropout_rng)

        self.input_proj = Linear(cfg.D_in, D, rng)
        self.tod_table = Tensor.parameter(rng.normal(0.0, 1.0, size=(cfg.steps_per_day, D)))
        self.dow_table = Tensor.parameter(rng.normal(0.0, 1.0, size=(7, D)))

        if cfg.temporal_scan_kind == "mamba":
            self.temporal = MambaStack(
                width, cfg.n_layers, rng, bidirectional=False,
                d_state=cfg.d_state, expand=cfg.expand, conv_width=cfg.conv_width,
            )
        else:
            self.temporal = TransformerEncoder(
                width, cfg.n_layers, cfg.n_heads, cfg.ff_dim, cfg.dropout, rng, self.dropout_rng,
                positional=True, max_len=max(512, cfg.T),
            )
        self.spatial = TransformerEncoder(
            width, cfg.n_layers, cfg.n_heads, cfg.ff_dim, cfg.dropout, rng, self.dropout_rng
        )
        self.head = MLP(
            [cfg.T * width, cfg.ff_dim, cfg.T_out * cfg.D_out], rng, cfg.dropout, self.dropout_rng
        )

    def _walk_scanner(self, rng: np.random.Generator) -> Module:
        cfg = self.cfg
        if cfg.walk_scan_kind == "mamba":
            return MambaStack(
                cfg.D, cfg.n_layers, rng, bidirectional=True,
                d_state=cfg.d_state, expand=cfg.expand, conv_width=cfg.conv_width,
            )
        return TransformerEncoder(
            cfg.D, cfg.n_layers, cfg.n_heads, cfg.ff_dim, cfg.dropout, rng, self.dropout_rng
        )

    def reseed_dropout(self, *keys: int) -> None:
        """Reset the shared dropout stream to the substream (seed, *keys)."""
        self.dropout_rng.bit_generator.state = derive_rng(self.seed, 2, *keys).bit_generator.state

    def forward(self, x, tod_idx, dow_idx, walkset: WalkSet) -> Tensor:
        return forecast(self, x, tod_idx, dow_idx, walkset)


def embed_walks(model: SpotModel, walkset: WalkSet) -> Tensor:
    """Node embeddings W (N x D) from the model's walk-scan path."""
    cfg = model.cfg
    if walkset.n_nodes != model.n_nodes:
        raise ShapeError(f"embed_walks: walks cover {walkset.n_nodes} nodes, model has {model.n_nodes}")
    if walkset.M != cfg.M or walkset.K != cfg.K:
        raise ShapeError(
            f"embed_walks: walks have M={walkset.M}, K={walkset.K}; model expects M={cfg.M}, K={cfg.K}"
        )
    M, N, D = cfg.M, model.n_nodes, cfg.D
    per_type = []
    for ti, scanner in enumerate(model.walk_scanners):
        seqs = walkset.walks[ti].reshape(M * N, cfg.K)
        scanned = scanner(nx.embedding(model.node_table, seqs))
        pooled = nx.reduce_mean(scanned, axis=1).reshape(M, N * D)
        mixed = nx.matmul(model.walk_mix_weight[ti : ti + 1], pooled).reshape(N, D)
        per_type.append(mixed + model.walk_mix_bias[ti])
    return model.fusion(nx.concat(per_type, axis=-1))


def _check_calendar(name: str, idx: np.ndarray, limit: int) -> None:
    if not np.issubdtype(idx.dtype, np.integer):
        raise ShapeError(f"assemble_features: {name} must be integers, got dtype {idx.dtype}")
    if idx.size and (idx.min() < 0 or idx.max() >= limit):
        raise ShapeError(
            f"assemble_features: {name} out of range [0, {limit}) (min {int(idx.min())}, max {int(idx.max())})"
        )


def assemble_features(model: SpotModel, x, tod_idx, dow_idx, W: Tensor) -> Tensor:
    """
    Per step and node: concat(input_proj(x), w_i, tod_table[tod], dow_table[dow]).
    x: (B, T, N, D_in) with indices (B, T); returns (B, T, N, 4D).
    """
    cfg = model.cfg
    x = nx.as_tensor(x)
    tod_idx, dow_idx = np.asarray(tod_idx), np.asarray(dow_idx)
    if x.ndim != 4 or x.shape[2] != model.n_nodes or x.shape[3] != cfg.D_in:
        raise ShapeError(
            f"assemble_features: inputs {x.shape} do not match (batch, T, {model.n_nodes}, {cfg.D_in})"
        )
    if tod_idx.shape != x.shape[:2] or dow_idx.shape != x.shape[:2]:
        raise ShapeError(
            f"assemble_features: calendar indices {tod_idx.shape}/{dow_idx.shape} do not match {x.shape[:2]}"
        )
    _check_calendar("tod_idx", tod_idx, cfg.steps_per_day)
    _check_calendar("dow_idx", dow_idx, 7)
    B, T, N = x.shape[:3]
    D = cfg.D
    tod = nx.embedding(model.tod_table, tod_idx).reshape(B, T, 1, D)
    dow = nx.embedding(model.dow_table, dow_idx).reshape(B, T, 1, D)
    return nx.concat(
        [
            model.input_proj(x),
            nx.broadcast_to(W, (B, T, N, D)),
            nx.broadcast_to(tod, (B, T, N, D)),
            nx.broadcast_to(dow, (B, T, N, D)),
        ],
        axis=-1,
    )


def temporal_scan(model: SpotModel, F: Tensor) -> Tensor:
    """Scan each node's length-T feature sequence independently."""
    B, T, N, width = F.shape
    seqs = nx.transpose(F, (0, 2, 1, 3)).reshape(B * N, T, width)
    out = model.temporal(seqs).reshape(B, N, T, width)
    return nx.transpose(out, (0, 2, 1, 3))


def spatial_mix(model: SpotModel, Z: Tensor) -> Tensor:
    """Self-attention across the N node tokens of every step."""
    B, T, N, width = Z.shape
    out = model.spatial(Z.reshape(B * T, N, width))
    return out.reshape(B, T, N, width)


def forecast(
    model: SpotModel, x, tod_idx, dow_idx, walkset: WalkSet, W: Optional[Tensor] = None
) -> Tensor:
    """
    Predict (B, T_out, N, D_out) from inputs (B, T, N, D_in). A single window
    (T, N, D_in) with (T,) indices gives (T_out, N, D_out). Pass `W` to reuse
    node embeddings computed earlier.
    """
    cfg = model.cfg
    x = nx.as_tensor(x)
    single = x.ndim == 3
    if single:
        x = x.reshape(1, *x.shape)
        tod_idx, dow_idx = np.asarray(tod_idx)[None], np.asarray(dow_idx)[None]
    if x.ndim != 4 or x.shape[1] != cfg.T:
        raise ShapeError(f"forecast: expected inputs (batch, {cfg.T}, N, {cfg.D_in}), got {x.shape}")
    if W is None:
        W = embed_walks(model, walkset)
    Z = spatial_mix(model, temporal_scan(model, assemble_features(model, x, tod_idx, dow_idx, W)))
    B, T, N, width = Z.shape
    flat = nx.transpose(Z, (0, 2, 1, 3)).reshape(B, N, T * width)
    out = model.head(flat).reshape(B, N, cfg.T_out, cfg.D_out)
    out = nx.transpose(out, (0, 2, 1, 3))
    return out.reshape(*out.shape[1:]) if single else out


def huber_loss(pred: Tensor, target, delta: float = 1.0) -> Tensor:
    """Mean of 0.5 e^2 for |e| <= delta and delta (|e| - delta / 2) beyond."""
    target = nx.as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"huber_loss: prediction shape {pred.shape} != target shape {target.shape}")
    if delta <= 0:
        raise ValueError(f"huber_loss: delta must be positive, got {delta}")
    err = nx.abs(pred - target)
    clipped = nx.minimum(err, delta)
    return nx.reduce_mean(clipped * (err - 0.5 * clipped))


# ---------------------------------------------------------------------------
# checkpoints


def _tensor_file(name: str) -> str:
    return f"{name}.bin"


def save_checkpoint(
    model: SpotModel,
    walkset: WalkSet,
    normalizer: Normalizer,
    out_dir: Path,
    extra: Optional[Dict] = None,
) -> Path:
    """Write one binary file per parameter plus manifest, config, walks and statistics."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines: List[str] = []
    for name, p in model.named_parameters().items():
        nx.save_tensor(p, out_dir / _tensor_file(name))
        lines.append(f"{name}\t{','.join(str(s) for s in p.shape)}")
    (out_dir / MANIFEST_FILE).write_text("\n".join(lines) + "\n", encoding="utf-8")
    doc = {"model": dataclasses.asdict(model.cfg), "n_nodes": model.n_nodes, "seed": model.seed}
    doc.update(extra or {})
    (out_dir / CONFIG_FILE).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    walkset.dump_csv(out_dir / WALKS_FILE)
    (out_dir / STATS_FILE).write_text(json.dumps(normalizer.to_dict(), indent=2) + "\n", encoding="utf-8")
    logger.debug("checkpoint with %d tensors written to %s", len(lines), out_dir)
    return out_dir


def read_checkpoint_config(ckpt_dir: Path) -> Dict:
    path = Path(ckpt_dir) / CONFIG_FILE
    if not path.exists():
        raise DataError(f"Checkpoint not found: {ckpt_dir} (no {CONFIG_FILE})")
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except ValueError as e:
        raise DataError(f"{path}: invalid checkpoint config ({e})") from e


def load_checkpoint(ckpt_dir: Path) -> Tuple[SpotModel, WalkSet, Normalizer]:
    ckpt_dir = Path(ckpt_dir)
    doc = read_checkpoint_config(ckpt_dir)
    cfg = ModelConfig(**doc["model"])
    model = SpotModel(cfg, int(doc["n_nodes"]), seed=int(doc.get("seed", 0)))
    manifest = ckpt_dir / MANIFEST_FILE
    if not manifest.exists():
        raise DataError(f"Checkpoint {ckpt_dir} has no {MANIFEST_FILE}")
    state = {}
    for line in manifest.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        name, _shape = line.split("\t")
        path = ckpt_dir / _tensor_file(name)
        if not path.exists():
            raise DataError(f"Checkpoint {ckpt_dir} is missing tensor file {path.name}")
        state[name] = nx.load_tensor(path).data
    model.load_state_dict(state)
    walkset = WalkSet.load_csv(ckpt_dir / WALKS_FILE, seed=int(doc.get("walk_seed", 0)))
    normalizer = Normalizer.from_dict(json.loads((ckpt_dir / STATS_FILE).read_text(encoding="utf-8")))
    return model, walkset, normalizer
