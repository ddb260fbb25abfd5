from __future__ import annotations

import math
from typing import Dict, Iterator, List, Optional, Sequence

import numpy as np

from spot_mamba import numerics as nx
from spot_mamba.numerics import Tensor
from spot_mamba.utils import ShapeError


class Module:
    """Container of named parameters and sub-modules with a train/eval switch."""

    training: bool = True

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def _children(self) -> Iterator[tuple[str, object]]:
        for key, value in vars(self).items():
            if isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    yield f"{key}.{i}", item
            else:
                yield key, value

    def named_parameters(self, prefix: str = "") -> Dict[str, Tensor]:
        out: Dict[str, Tensor] = {}
        for name, value in self._children():
            if isinstance(value, Tensor) and value.requires_grad:
                out[prefix + name] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(f"{prefix}{name}."))
        return out

    def parameters(self) -> List[Tensor]:
        return list(self.named_parameters().values())

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        nx.zero_grad(self.parameters())

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters().items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = sorted(set(params) - set(state))
        unexpected = sorted(set(state) - set(params))
        if missing or unexpected:
            raise ShapeError(
                f"load_state_dict: missing {missing or 'none'}, unexpected {unexpected or 'none'}"
            )
        for name, p in params.items():
            value = np.asarray(state[name], dtype=nx.DTYPE)
            if value.shape != p.shape:
                raise ShapeError(
                    f"load_state_dict: '{name}' has shape {p.shape}, checkpoint has {value.shape}"
                )
            p.data[...] = value


def uniform(rng: np.random.Generator, shape: Sequence[int], bound: float) -> Tensor:
    return Tensor.parameter(rng.uniform(-bound, bound, size=tuple(shape)))


class Linear(Module):
    """y = x @ W + b with W stored as (d_in, d_out)."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        bound = 1.0 / math.sqrt(d_in)
        self.weight = uniform(rng, (d_in, d_out), bound)
        self.bias = uniform(rng, (d_out,), bound) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = nx.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.weight = Tensor.parameter(np.ones(d))
        self.bias = Tensor.parameter(np.zeros(d))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return nx.layer_norm(x, self.eps) * self.weight + self.bias


class Dropout(Module):
    """Masks come from a generator shared by the whole model, so a reseed covers all layers."""

    def __init__(self, p: float, rng: np.random.Generator):
        self.p = p
        self.rng = rng

    def forward(self, x: Tensor) -> Tensor:
        return nx.dropout(x, self.p, self.rng, training=self.training)


class MLP(Module):
    def __init__(
        self,
        dims: Sequence[int],
        rng: np.random.Generator,
        dropout: float = 0.0,
        dropout_rng: Optional[np.random.Generator] = None,
    ):
        if len(dims) < 2:
            raise ShapeError(f"MLP: need at least input and output widths, got {list(dims)}")
        self.layers = [Linear(a, b, rng) for a, b in zip(dims[:-1], dims[1:])]
        self.drop = Dropout(dropout, dropout_rng or rng)

    def forward(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = self.drop(nx.relu(x))
        return x


class MultiHeadSelfAttention(Module):
    def __init__(
        self, d: int, n_heads: int, rng: np.random.Generator, dropout: float,
        dropout_rng: np.random.Generator,
    ):
        if d % n_heads:
            raise ShapeError(f"attention: width {d} is not divisible by {n_heads} heads")
        self.n_heads = n_heads
        self.qkv = Linear(d, 3 * d, rng)
        self.out = Linear(d, d, rng)
        self.drop = Dropout(dropout, dropout_rng)

    def forward(self, x: Tensor) -> Tensor:
        batch, seq, d = x.shape
        dh = d // self.n_heads
        qkv = self.qkv(x).reshape(batch, seq, 3, self.n_heads, dh)
        qkv = nx.transpose(qkv, (2, 0, 3, 1, 4))
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = nx.matmul(q, nx.transpose(k)) * (1.0 / math.sqrt(dh))
        weights = self.drop(nx.softmax(scores))
        ctx = nx.transpose(nx.matmul(weights, v), (0, 2, 1, 3)).reshape(batch, seq, d)
        return self.out(ctx)


class TransformerEncoderLayer(Module):
    """Pre-norm encoder layer: self-attention then a ReLU feed-forward, both residual."""

    def __init__(
        self, d: int, n_heads: int, ff_dim: int, dropout: float, rng: np.random.Generator,
        dropout_rng: np.random.Generator,
    ):
        self.norm1 = LayerNorm(d)
        self.attn = MultiHeadSelfAttention(d, n_heads, rng, dropout, dropout_rng)
        self.norm2 = LayerNorm(d)
        self.ff = MLP([d, ff_dim, d], rng, dropout, dropout_rng)
        self.drop = Dropout(dropout, dropout_rng)

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.drop(self.attn(self.norm1(x)))
        return x + self.drop(self.ff(self.norm2(x)))


class TransformerEncoder(Module):
    """Stack of encoder layers over (batch, seq, d) with a final LayerNorm."""

    def __init__(
        self, d: int, n_layers: int, n_heads: int, ff_dim: int, dropout: float,
        rng: np.random.Generator, dropout_rng: np.random.Generator,
        positional: bool = False, max_len: int = 512,
    ):
        self.layers = [
            TransformerEncoderLayer(d, n_heads, ff_dim, dropout, rng, dropout_rng)
            for _ in range(n_layers)
        ]
        self.norm = LayerNorm(d)
        self.positions = sinusoidal_positions(max_len, d) if positional else None

    def forward(self, x: Tensor) -> Tensor:
        if self.positions is not None:
            seq = x.shape[1]
            if seq > self.positions.shape[0]:
                raise ShapeError(f"encoder: sequence length {seq} exceeds {self.positions.shape[0]}")
            x = x + self.positions[:seq]
        for layer in self.layers:
            x = layer(x)
        return self.norm(x)


def sinusoidal_positions(length: int, d: int) -> np.ndarray:
    pos = np.arange(length, dtype=nx.DTYPE)[:, None]
    rates = np.exp(-math.log(10000.0) * (np.arange(0, d, 2, dtype=nx.DTYPE) / d))
    table = np.zeros((length, d), dtype=nx.DTYPE)
    table[:, 0::2] = np.sin(pos * rates)
    table[:, 1::2] = np.cos(pos * rates[: d // 2])
    return table
