from __future__ import annotations

import contextvars
import logging
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from spot_mamba.utils import ShapeError

logger = logging.getLogger(__name__)

DTYPE = np.float64

VJP = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_ACTIVE_TAPE: contextvars.ContextVar[Optional["Tape"]] = contextvars.ContextVar(
    "spot_mamba_active_tape", default=None
)


class Tensor:
    """
    Dense float64 array that can take part in reverse-mode differentiation.

    Leaves are created by the user (parameters, inputs); every other tensor is the
    output of a primitive op recorded on the active `Tape`.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_recorded")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.array(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._recorded = False

    @classmethod
    def _wrap(cls, array: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = np.asarray(array, dtype=DTYPE)
        t.requires_grad = False
        t.grad = None
        t.name = None
        t._recorded = False
        return t

    @classmethod
    def parameter(cls, data, name: Optional[str] = None) -> "Tensor":
        return cls(data, requires_grad=True, name=name)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def is_leaf(self) -> bool:
        return not self._recorded

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item: tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{flag}{label})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take_slice(self, key)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes: Optional[Sequence[int]] = None) -> "Tensor":
        return transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_mean(self, axis, keepdims)


@dataclass
class TapeEntry:
    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    vjp: VJP


class Tape:
    """
    Ordered record of the primitive ops of one forward pass.

    Entries are appended as ops execute, so every entry comes after the entries
    producing its inputs. A tape is active inside its `with` block; tapes are
    bound to the current context, so concurrent threads each need their own.
    """

    def __init__(self) -> None:
        self.entries: List[TapeEntry] = []
        self._tokens: List[contextvars.Token] = []

    def __enter__(self) -> "Tape":
        self._tokens.append(_ACTIVE_TAPE.set(self))
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._tokens.pop())

    def __len__(self) -> int:
        return len(self.entries)

    def ops(self) -> List[str]:
        return [e.op for e in self.entries]


def active_tape() -> Optional[Tape]:
    return _ACTIVE_TAPE.get()


@contextmanager
def no_tape() -> Iterator[None]:
    """Run the enclosed code with recording disabled."""
    token = _ACTIVE_TAPE.set(None)
    try:
        yield
    finally:
        _ACTIVE_TAPE.reset(token)


def record(op: str, value: np.ndarray, inputs: Sequence[Tensor], vjp: VJP) -> Tensor:
    """
    Wrap `value` as the output of `op`. The entry is recorded only when a tape is
    active and some input requires a gradient. `vjp(g)` returns one adjoint per
    input (None for inputs that take no gradient).
    """
    out = Tensor._wrap(value)
    tape = _ACTIVE_TAPE.get()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._recorded = True
        tape.entries.append(TapeEntry(op, tuple(inputs), out, vjp))
    return out


def backward(tape: Tape, loss: Tensor, retain_intermediate: bool = True) -> None:
    """
    Propagate d(loss)/d(.) through `tape`. Leaf gradients accumulate into `.grad`;
    recorded tensors get their gradient assigned when `retain_intermediate` is set.
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("backward: loss does not depend on any tensor that requires a gradient")
    if loss._recorded and not any(e.output is loss for e in tape.entries):
        raise ValueError("backward: loss was not recorded on this tape")

    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: Dict[int, Tensor] = {}
    if loss.is_leaf:
        leaves[id(loss)] = loss

    for entry in reversed(tape.entries):
        g = grads.pop(id(entry.output), None)
        if g is None:
            continue
        if retain_intermediate:
            entry.output.grad = g
        input_grads = entry.vjp(g)
        for inp, gi in zip(entry.inputs, input_grads):
            if gi is None or not inp.requires_grad:
                continue
            if gi.shape != inp.shape:
                raise ShapeError(
                    f"backward: adjoint of '{entry.op}' has shape {gi.shape}, "
                    f"input has shape {inp.shape}"
                )
            key = id(inp)
            grads[key] = grads[key] + gi if key in grads else gi
            if inp.is_leaf:
                leaves[key] = inp

    for key, leaf in leaves.items():
        g = grads.get(key)
        if g is None:
            continue
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


def zero_grad(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# helpers


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor._wrap(np.asarray(x, dtype=DTYPE))


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def _norm_axis(axis: int, ndim: int, op: str) -> int:
    if not -ndim <= axis < ndim:
        raise ShapeError(f"{op}: axis {axis} out of range for rank {ndim}")
    return axis % ndim


# ---------------------------------------------------------------------------
# elementwise binary


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    return record(
        "add",
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    return record(
        "sub",
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    return record(
        "mul",
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a, b)
    return record(
        "div",
        a.data / b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
    )


def minimum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("minimum", a, b)
    take_a = a.data <= b.data
    return record(
        "minimum",
        np.minimum(a.data, b.data),
        (a, b),
        lambda g: (
            _unbroadcast(np.where(take_a, g, 0.0), a.shape),
            _unbroadcast(np.where(take_a, 0.0, g), b.shape),
        ),
    )


def neg(x) -> Tensor:
    x = as_tensor(x)
    return record("neg", -x.data, (x,), lambda g: (-g,))


def square(x) -> Tensor:
    return mul(x, x)


# ---------------------------------------------------------------------------
# linear algebra and layout


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None

    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return record("matmul", a.data @ b.data, (a, b), vjp)


def transpose(x, axes: Optional[Sequence[int]] = None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        if x.ndim < 2:
            raise ShapeError(f"transpose: need rank >= 2, got shape {x.shape}")
        axes = list(range(x.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(int(a) for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: axes {axes} are not a permutation for shape {x.shape}")
    inverse = tuple(np.argsort(axes))
    return record(
        "transpose",
        np.transpose(x.data, axes),
        (x,),
        lambda g: (np.transpose(g, inverse),),
    )


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    try:
        value = x.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} into {tuple(shape)}") from None
    return record("reshape", value, (x,), lambda g: (g.reshape(x.shape),))


def broadcast_to(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    shape = tuple(shape)
    try:
        value = np.broadcast_to(x.data, shape).copy()
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {x.shape} to {shape}") from None
    return record("broadcast_to", value, (x,), lambda g: (_unbroadcast(g, x.shape),))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: no inputs")
    ndim = ts[0].ndim
    ax = _norm_axis(axis, ndim, "concat")
    for t in ts[1:]:
        if t.ndim != ndim or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, ts[0].shape)) if i != ax
        ):
            raise ShapeError(f"concat: incompatible shapes {ts[0].shape} and {t.shape}")
    sizes = np.cumsum([t.shape[ax] for t in ts])[:-1]
    return record(
        "concat",
        np.concatenate([t.data for t in ts], axis=ax),
        tuple(ts),
        lambda g: tuple(np.split(g, sizes, axis=ax)),
    )


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("stack: no inputs")
    ax = axis if axis >= 0 else axis + ts[0].ndim + 1
    expanded = [reshape(t, t.shape[:ax] + (1,) + t.shape[ax:]) for t in ts]
    return concat(expanded, axis=ax)


def take_slice(x, key) -> Tensor:
    """Basic or integer-array indexing; the adjoint scatters back (adding on repeats)."""
    x = as_tensor(x)
    try:
        value = np.array(x.data[key])
    except IndexError as e:
        raise ShapeError(f"slice: {e} for shape {x.shape}") from None
    fancy = any(isinstance(k, (np.ndarray, list)) for k in (key if isinstance(key, tuple) else (key,)))

    def vjp(g):
        out = np.zeros_like(x.data)
        if fancy:
            np.add.at(out, key, g)
        else:
            out[key] = g
        return (out,)

    return record("slice", value, (x,), vjp)


def reverse(x, axis: int = 0) -> Tensor:
    x = as_tensor(x)
    ax = _norm_axis(axis, x.ndim, "reverse")
    return record("reverse", np.flip(x.data, axis=ax).copy(), (x,), lambda g: (np.flip(g, axis=ax),))


# ---------------------------------------------------------------------------
# reductions


def _reduction_axes(axis, ndim: int, op: str) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(_norm_axis(a, ndim, op) for a in axis))


def reduce_sum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _reduction_axes(axis, x.ndim, "sum")

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return record("sum", x.data.sum(axis=axes, keepdims=keepdims), (x,), vjp)


def reduce_mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _reduction_axes(axis, x.ndim, "mean")
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return record("mean", x.data.mean(axis=axes, keepdims=keepdims), (x,), vjp)


# ---------------------------------------------------------------------------
# elementwise unary


def _sigmoid(v: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * v))


def exp(x) -> Tensor:
    x = as_tensor(x)
    y = np.exp(x.data)
    return record("exp", y, (x,), lambda g: (g * y,))


def log(x) -> Tensor:
    x = as_tensor(x)
    return record("log", np.log(x.data), (x,), lambda g: (g / x.data,))


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    y = np.sqrt(x.data)
    return record("sqrt", y, (x,), lambda g: (g * 0.5 / y,))


def abs(x) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    return record("abs", np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = _sigmoid(x.data)
    return record("sigmoid", s, (x,), lambda g: (g * s * (1.0 - s),))


def silu(x) -> Tensor:
    x = as_tensor(x)
    s = _sigmoid(x.data)
    return record("silu", x.data * s, (x,), lambda g: (g * s * (1.0 + x.data * (1.0 - s)),))


def softplus(x) -> Tensor:
    x = as_tensor(x)
    return record("softplus", np.logaddexp(0.0, x.data), (x,), lambda g: (g * _sigmoid(x.data),))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return record("tanh", y, (x,), lambda g: (g * (1.0 - y * y),))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return record("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (np.where(mask, g, 0.0),))


# ---------------------------------------------------------------------------
# normalisation and network primitives


def softmax(x) -> Tensor:
    """Softmax over the last axis."""
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)
    return record(
        "softmax",
        s,
        (x,),
        lambda g: (s * (g - (g * s).sum(axis=-1, keepdims=True)),),
    )


def layer_norm(x, eps: float = 1e-12) -> Tensor:
    """Zero-mean, unit-variance rows over the last axis, without affine terms."""
    x = as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std

    def vjp(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv_std * (g - gm - xhat * gx),)

    return record("layer_norm", xhat, (x,), vjp)


def dropout(x, p: float, rng: np.random.Generator, training: bool = True) -> Tensor:
    x = as_tensor(x)
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout: probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return record("dropout", x.data * mask, (x,), lambda g: (g * mask,))


def embedding(table, indices) -> Tensor:
    """Rows of `table` (V x D) gathered by an integer array; result shape idx.shape + (D,)."""
    table = as_tensor(table)
    idx = np.asarray(indices)
    if table.ndim != 2:
        raise ShapeError(f"embedding: table must be rank 2, got shape {table.shape}")
    if not np.issubdtype(idx.dtype, np.integer):
        raise ShapeError(f"embedding: indices must be integers, got dtype {idx.dtype}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(
            f"embedding: index out of range [0, {table.shape[0]}) "
            f"(min {int(idx.min())}, max {int(idx.max())})"
        )

    def vjp(g):
        out = np.zeros_like(table.data)
        np.add.at(out, idx, g)
        return (out,)

    return record("embedding", table.data[idx], (table,), vjp)


def conv1d_causal(x, weight, bias=None) -> Tensor:
    """
    Depthwise causal convolution along the second-to-last axis.

    x: (..., L, C), weight: (C, w), bias: (C,). Output at step t sees inputs
    t-w+1 .. t, with the last tap on the current step and zero left padding.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim < 2 or weight.ndim != 2 or weight.shape[0] != x.shape[-1]:
        raise ShapeError(f"conv1d_causal: incompatible shapes {x.shape} and {weight.shape}")
    inputs: Tuple[Tensor, ...] = (x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (x.shape[-1],):
            raise ShapeError(f"conv1d_causal: incompatible shapes {x.shape} and {bias.shape}")
        inputs = (x, weight, bias)

    L, width = x.shape[-2], weight.shape[1]
    pad = [(0, 0)] * x.ndim
    pad[-2] = (width - 1, 0)
    xp = np.pad(x.data, pad)
    y = np.zeros_like(x.data)
    for j in range(width):
        y += xp[..., j : j + L, :] * weight.data[:, j]
    if bias is not None:
        y += bias.data

    def vjp(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(weight.data)
        lead = tuple(range(g.ndim - 1))
        for j in range(width):
            gxp[..., j : j + L, :] += g * weight.data[:, j]
            gw[:, j] = (g * xp[..., j : j + L, :]).sum(axis=lead)
        grads = [gxp[..., width - 1 :, :], gw]
        if bias is not None:
            grads.append(g.sum(axis=lead))
        return tuple(grads)

    return record("conv1d_causal", y, inputs, vjp)


# ---------------------------------------------------------------------------
# gradient oracle


def _scalar(value) -> float:
    if isinstance(value, Tensor):
        value = value.data
    return float(np.asarray(value, dtype=DTYPE).reshape(-1)[0])


def finite_difference_gradient(
    f: Callable[[Tensor], object],
    x: Tensor,
    h: float = 1e-5,
    indices: Optional[Iterable[int]] = None,
) -> Tensor:
    """
    Central differences of scalar `f` with respect to `x`, perturbing `x` in place.
    When `indices` (flat positions) is given only those coordinates are filled.
    """
    flat = x.data.reshape(-1)
    grad = np.zeros(x.size, dtype=DTYPE)
    positions = range(x.size) if indices is None else indices
    with no_tape():
        for i in positions:
            orig = flat[i]
            flat[i] = orig + h
            f_plus = _scalar(f(x))
            flat[i] = orig - h
            f_minus = _scalar(f(x))
            flat[i] = orig
            grad[i] = (f_plus - f_minus) / (2.0 * h)
    return Tensor(grad.reshape(x.shape))


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-5) -> float:
    a, b = np.asarray(a, dtype=DTYPE), np.asarray(b, dtype=DTYPE)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


# ---------------------------------------------------------------------------
# binary tensor files


def save_tensor(t: Union[Tensor, np.ndarray], path: Path) -> None:
    """Little-endian: rank and extents as uint64, then float64 values row-major."""
    data = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=DTYPE)
    header = np.array([data.ndim, *data.shape], dtype="<u8")
    with Path(path).open("wb") as f:
        f.write(header.tobytes())
        f.write(np.ascontiguousarray(data, dtype="<f8").tobytes())


def load_tensor(path: Path, requires_grad: bool = False) -> Tensor:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise ValueError(f"{path}: truncated tensor header")
    rank = int(np.frombuffer(raw[:8], dtype="<u8")[0])
    header_len = 8 * (1 + rank)
    shape = tuple(int(s) for s in np.frombuffer(raw[8:header_len], dtype="<u8"))
    count = int(np.prod(shape)) if shape else 1
    if len(raw) != header_len + 8 * count:
        raise ValueError(f"{path}: expected {count} values for shape {shape}")
    values = np.frombuffer(raw[header_len:], dtype="<f8").astype(DTYPE).reshape(shape)
    return Tensor(values, requires_grad=requires_grad)
