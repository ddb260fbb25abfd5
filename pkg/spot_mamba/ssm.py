"""
State-space sequence layers.

The LTI half works on plain numpy arrays (single input channel, state size n):
discretisation, the recurrent scan, and the convolution kernel. The selective half
runs on the autodiff tape: `selective_scan` is one fused primitive with a
hand-written adjoint, `selective_scan_reference` is the same recurrence composed
from primitive ops and serves as its oracle.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from spot_mamba import numerics as nx
from spot_mamba.nn import LayerNorm, Linear, Module, uniform
from spot_mamba.numerics import Tensor
from spot_mamba.utils import NumericError, ShapeError

logger = logging.getLogger(__name__)


@dataclass
class SSMParams:
    """
    Continuous single-input single-output system h' = A h + B x, y = C h + D x.
    A is either an (n, n) matrix or an (n,) vector holding a diagonal.
    """

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    delta: float
    D: float = 0.0

    def __post_init__(self):
        self.A = np.atleast_1d(np.asarray(self.A, dtype=nx.DTYPE))
        self.B = np.atleast_1d(np.asarray(self.B, dtype=nx.DTYPE)).reshape(-1)
        self.C = np.atleast_1d(np.asarray(self.C, dtype=nx.DTYPE)).reshape(-1)
        self.delta = float(self.delta)
        self.D = float(self.D)
        n = self.B.shape[0]
        if self.A.ndim == 1:
            if self.A.shape != (n,):
                raise ShapeError(f"SSMParams: diagonal A {self.A.shape} does not match B {self.B.shape}")
        elif self.A.shape != (n, n):
            raise ShapeError(f"SSMParams: A {self.A.shape} does not match B {self.B.shape}")
        if self.C.shape != (n,):
            raise ShapeError(f"SSMParams: C {self.C.shape} does not match B {self.B.shape}")
        # delta == 0 is kept as the closed limit of the discretisations
        if not math.isfinite(self.delta) or self.delta < 0:
            raise ValueError(f"SSMParams: step size must be a finite value >= 0, got {self.delta}")

    @property
    def diagonal(self) -> bool:
        return self.A.ndim == 1

    @property
    def state_size(self) -> int:
        return self.B.shape[0]


@dataclass
class DiscreteSSM:
    A_bar: np.ndarray
    B_bar: np.ndarray
    C_bar: np.ndarray
    D: float = 0.0

    @property
    def diagonal(self) -> bool:
        return self.A_bar.ndim == 1

    def spectral_radius(self) -> float:
        if self.diagonal:
            return float(np.max(np.abs(self.A_bar)))
        return float(np.max(np.abs(np.linalg.eigvals(self.A_bar))))


def stable_diagonal(raw: np.ndarray) -> np.ndarray:
    """A = -softplus(raw); every entry is <= 0."""
    return -np.logaddexp(0.0, raw)


def inverse_softplus(y: np.ndarray) -> np.ndarray:
    y = np.asarray(y, dtype=nx.DTYPE)
    return y + np.log(-np.expm1(-y))


def exprel(z: np.ndarray) -> np.ndarray:
    """(exp(z) - 1) / z, equal to 1 at z = 0."""
    z = np.asarray(z, dtype=nx.DTYPE)
    small = np.abs(z) < 1e-8
    safe = np.where(small, 1.0, z)
    return np.where(small, 1.0 + 0.5 * z, np.expm1(safe) / safe)


def exprel_grad(z: np.ndarray) -> np.ndarray:
    """d/dz of exprel, equal to 1/2 at z = 0."""
    z = np.asarray(z, dtype=nx.DTYPE)
    small = np.abs(z) < 1e-3
    safe = np.where(small, 1.0, z)
    series = 0.5 + z / 3.0 + z * z / 8.0 + z**3 / 30.0
    exact = (safe * np.exp(safe) - np.expm1(safe)) / (safe * safe)
    return np.where(small, series, exact)


def discretize_bilinear(params: SSMParams) -> DiscreteSSM:
    half = 0.5 * params.delta
    if params.diagonal:
        denom = 1.0 - half * params.A
        if np.any(np.abs(denom) < 1e-12):
            raise NumericError(
                f"discretize_bilinear: I - delta/2*A is singular (min |1 - delta/2*a| = "
                f"{float(np.min(np.abs(denom))):.3e})"
            )
        return DiscreteSSM(
            (1.0 + half * params.A) / denom, params.delta * params.B / denom, params.C.copy(), params.D
        )
    eye = np.eye(params.state_size)
    lhs = eye - half * params.A
    cond = np.linalg.cond(lhs)
    if not np.isfinite(cond) or cond > 1.0 / np.finfo(nx.DTYPE).eps:
        raise NumericError(f"discretize_bilinear: I - delta/2*A is singular (condition number {cond:.3e})")
    a_bar = np.linalg.solve(lhs, eye + half * params.A)
    b_bar = np.linalg.solve(lhs, params.delta * params.B)
    return DiscreteSSM(a_bar, b_bar, params.C.copy(), params.D)


def discretize_zoh(params: SSMParams) -> DiscreteSSM:
    if not params.diagonal:
        raise ShapeError(f"discretize_zoh: A must be diagonal, got shape {params.A.shape}")
    z = params.delta * params.A
    return DiscreteSSM(np.exp(z), params.delta * exprel(z) * params.B, params.C.copy(), params.D)


def scan_recurrent(d: DiscreteSSM, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=nx.DTYPE).reshape(-1)
    h = np.zeros_like(d.B_bar)
    y = np.empty_like(x)
    for t, xt in enumerate(x):
        h = (d.A_bar * h if d.diagonal else d.A_bar @ h) + d.B_bar * xt
        y[t] = d.C_bar @ h + d.D * xt
    return y


def build_kernel(d: DiscreteSSM, length: int) -> np.ndarray:
    """K[j] = C A^j B for j < length."""
    if length < 1:
        raise ValueError(f"build_kernel: length must be >= 1, got {length}")
    kernel = np.empty(length, dtype=nx.DTYPE)
    v = d.B_bar.copy()
    for j in range(length):
        kernel[j] = d.C_bar @ v
        v = d.A_bar * v if d.diagonal else d.A_bar @ v
    return kernel


def apply_kernel(kernel: np.ndarray, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=nx.DTYPE).reshape(-1)
    return np.convolve(x, np.asarray(kernel, dtype=nx.DTYPE))[: x.shape[0]]


# ---------------------------------------------------------------------------
# selective scan


def _check_scan_shapes(u, delta, A, Bm, Cm, D) -> None:
    if u.ndim != 3:
        raise ShapeError(f"selective_scan: input must be (batch, L, d), got {u.shape}")
    batch, length, d = u.shape
    n = A.shape[-1]
    expected = {
        "delta": (delta.shape, (batch, length, d)),
        "A": (A.shape, (d, n)),
        "B": (Bm.shape, (batch, length, n)),
        "C": (Cm.shape, (batch, length, n)),
        "D": (D.shape, (d,)),
    }
    for name, (got, want) in expected.items():
        if got != want:
            raise ShapeError(f"selective_scan: {name} has shape {got}, expected {want} for input {u.shape}")


def selective_scan_op(u: Tensor, delta: Tensor, A: Tensor, Bm: Tensor, Cm: Tensor, D: Tensor) -> Tensor:
    """
    h_t = exp(delta_t * A) * h_{t-1} + delta_t * exprel(delta_t * A) * B_t * u_t,
    y_t = <h_t, C_t> + D * u_t, with h_0 = 0, sequential in t.

    u, delta: (batch, L, d); A: (d, n); B, C: (batch, L, n); D: (d,).
    """
    _check_scan_shapes(u, delta, A, Bm, Cm, D)
    uu, dl, a, bm, cm, dd = u.data, delta.data, A.data, Bm.data, Cm.data, D.data
    batch, length, d = uu.shape
    n = a.shape[1]

    states = np.zeros((length + 1, batch, d, n), dtype=nx.DTYPE)
    y = np.empty_like(uu)
    for t in range(length):
        dt = dl[:, t, :, None]
        z = dt * a
        states[t + 1] = np.exp(z) * states[t] + dt * exprel(z) * bm[:, t, None, :] * uu[:, t, :, None]
        y[:, t] = np.einsum("bdn,bn->bd", states[t + 1], cm[:, t]) + dd * uu[:, t]

    def vjp(g):
        g_u = g * dd
        g_delta = np.zeros_like(dl)
        g_A = np.zeros_like(a)
        g_B = np.zeros_like(bm)
        g_C = np.zeros_like(cm)
        g_D = (g * uu).sum(axis=(0, 1))
        g_h = np.zeros((batch, d, n), dtype=nx.DTYPE)
        for t in reversed(range(length)):
            g_h = g_h + g[:, t, :, None] * cm[:, t, None, :]
            g_C[:, t] = np.einsum("bd,bdn->bn", g[:, t], states[t + 1])
            dt = dl[:, t, :, None]
            z = dt * a
            decay = np.exp(z)
            phi = exprel(z)
            b_t = bm[:, t, None, :]
            g_decay = g_h * states[t]
            g_drive = g_h * uu[:, t, :, None]
            g_u[:, t] += (g_h * dt * phi * b_t).sum(axis=-1)
            g_delta[:, t] = (g_decay * a * decay + g_drive * b_t * decay).sum(axis=-1)
            g_A += (g_decay * dt * decay + g_drive * b_t * dt * dt * exprel_grad(z)).sum(axis=0)
            g_B[:, t] = (g_drive * dt * phi).sum(axis=1)
            g_h = g_h * decay
        return g_u, g_delta, g_A, g_B, g_C, g_D

    return nx.record("selective_scan", y, (u, delta, A, Bm, Cm, D), vjp)


def selective_scan_reference(
    u: Tensor, delta: Tensor, A: Tensor, Bm: Tensor, Cm: Tensor, D: Tensor
) -> Tensor:
    """Unfused recurrence from primitive ops. Requires A != 0 everywhere."""
    _check_scan_shapes(u, delta, A, Bm, Cm, D)
    batch, length, d = u.shape
    n = A.shape[-1]
    h = nx.Tensor(np.zeros((batch, d, n)))
    outputs = []
    for t in range(length):
        dt = nx.reshape(delta[:, t], (batch, d, 1))
        decay = nx.exp(dt * A)
        drive = (decay - 1.0) / A * nx.reshape(Bm[:, t], (batch, 1, n))
        h = decay * h + drive * nx.reshape(u[:, t], (batch, d, 1))
        y_t = nx.reduce_sum(h * nx.reshape(Cm[:, t], (batch, 1, n)), axis=-1)
        outputs.append(y_t + D * u[:, t])
    return nx.stack(outputs, axis=1)


class SelectiveParams(Module):
    """
    Input-dependent SSM parameters for d_inner channels with n states each:
    delta_t = softplus(x_t W_delta + b_delta), B_t = x_t W_B + b_B, C_t = x_t W_C + b_C.
    """

    def __init__(self, d_inner: int, d_state: int, rng: np.random.Generator):
        self.d_inner = d_inner
        self.d_state = d_state
        # -A spans [1, d_state] log-uniformly on every channel
        decay = np.exp(np.linspace(0.0, math.log(d_state), d_state))
        self.A_raw = Tensor.parameter(np.tile(inverse_softplus(decay), (d_inner, 1)))
        self.delta_proj = Linear(d_inner, d_inner, rng)
        step = np.exp(rng.uniform(math.log(1e-3), math.log(1e-1), size=d_inner))
        self.delta_proj.bias.data[...] = inverse_softplus(step)
        self.B_proj = Linear(d_inner, d_state, rng)
        self.C_proj = Linear(d_inner, d_state, rng)
        self.D_skip = Tensor.parameter(np.ones(d_inner))

    @property
    def A(self) -> Tensor:
        return nx.neg(nx.softplus(self.A_raw))

    def project(self, x: Tensor) -> Tuple[Tensor, Tensor, Tensor]:
        return nx.softplus(self.delta_proj(x)), self.B_proj(x), self.C_proj(x)

    def forward(self, x: Tensor) -> Tensor:
        return selective_scan(self, x)


def selective_scan(sp: SelectiveParams, x: Tensor) -> Tensor:
    """Selective scan of x: (L, d_inner) or (batch, L, d_inner)."""
    squeeze = x.ndim == 2
    if squeeze:
        x = nx.reshape(x, (1,) + x.shape)
    if x.ndim != 3 or x.shape[-1] != sp.d_inner:
        raise ShapeError(f"selective_scan: expected (batch, L, {sp.d_inner}), got {x.shape}")
    delta, Bm, Cm = sp.project(x)
    y = selective_scan_op(x, delta, sp.A, Bm, Cm, sp.D_skip)
    return nx.reshape(y, y.shape[1:]) if squeeze else y


class MambaBlock(Module):
    """
    Pre-norm gated Mamba block over (batch, L, d):
    norm -> in_proj -> (u, gate); u -> causal depthwise conv -> silu -> selective scan;
    times silu(gate) -> out_proj -> residual add.
    """

    def __init__(
        self,
        d: int,
        rng: np.random.Generator,
        d_state: int = 16,
        expand: int = 2,
        conv_width: int = 4,
    ):
        self.d = d
        self.d_inner = expand * d
        self.norm = LayerNorm(d)
        self.in_proj = Linear(d, 2 * self.d_inner, rng)
        bound = 1.0 / math.sqrt(conv_width)
        self.conv_weight = uniform(rng, (self.d_inner, conv_width), bound)
        self.conv_bias = uniform(rng, (self.d_inner,), bound)
        self.ssm = SelectiveParams(self.d_inner, d_state, rng)
        self.out_proj = Linear(self.d_inner, d, rng)

    def forward(self, x: Tensor) -> Tensor:
        squeeze = x.ndim == 2
        if squeeze:
            x = nx.reshape(x, (1,) + x.shape)
        if x.ndim != 3 or x.shape[-1] != self.d:
            raise ShapeError(f"mamba_block: expected (batch, L, {self.d}), got {x.shape}")
        xz = self.in_proj(self.norm(x))
        u, gate = xz[..., : self.d_inner], xz[..., self.d_inner :]
        u = nx.silu(nx.conv1d_causal(u, self.conv_weight, self.conv_bias))
        y = selective_scan(self.ssm, u) * nx.silu(gate)
        out = x + self.out_proj(y)
        return nx.reshape(out, out.shape[1:]) if squeeze else out


def mamba_block_forward(block: MambaBlock, x: Tensor) -> Tensor:
    return block(x)


def bidirectional_scan(forward_block: MambaBlock, backward_block: MambaBlock, x: Tensor) -> Tensor:
    """forward_block(x) + reverse(backward_block(reverse(x))) along the sequence axis."""
    seq_axis = x.ndim - 2
    backward = nx.reverse(backward_block(nx.reverse(x, seq_axis)), seq_axis)
    return forward_block(x) + backward


class BidirectionalMamba(Module):
    def __init__(self, d: int, rng: np.random.Generator, d_state: int = 16, expand: int = 2, conv_width: int = 4):
        self.forward_block = MambaBlock(d, rng, d_state, expand, conv_width)
        self.backward_block = MambaBlock(d, rng, d_state, expand, conv_width)

    def forward(self, x: Tensor) -> Tensor:
        return bidirectional_scan(self.forward_block, self.backward_block, x)


class MambaStack(Module):
    """n_layers Mamba layers (uni- or bidirectional) followed by a final LayerNorm."""

    def __init__(
        self,
        d: int,
        n_layers: int,
        rng: np.random.Generator,
        bidirectional: bool = False,
        d_state: int = 16,
        expand: int = 2,
        conv_width: int = 4,
    ):
        layer_cls = BidirectionalMamba if bidirectional else MambaBlock
        self.layers: List[Module] = [
            layer_cls(d, rng, d_state=d_state, expand=expand, conv_width=conv_width)
            for _ in range(n_layers)
        ]
        self.norm = LayerNorm(d)

    def forward(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return self.norm(x)


def lti_from_selective(sp: SelectiveParams, channel: int) -> Optional[SSMParams]:
    """
    The LTI system a channel reduces to when the projections ignore the input:
    delta, B and C come from the biases alone. Returns None if any weight is nonzero.
    """
    weights = (sp.delta_proj.weight, sp.B_proj.weight, sp.C_proj.weight)
    if any(np.any(w.data != 0) for w in weights):
        return None
    delta = float(np.logaddexp(0.0, sp.delta_proj.bias.data[channel]))
    return SSMParams(
        A=stable_diagonal(sp.A_raw.data[channel]),
        B=sp.B_proj.bias.data,
        C=sp.C_proj.bias.data,
        delta=delta,
        D=float(sp.D_skip.data[channel]),
    )
