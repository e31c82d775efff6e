"""Reverse-mode differentiation over numpy arrays, plus AdamW and LR schedules.

Every differentiable operation produces a :class:`Tensor`.  While a
:class:`Tape` is active, operations whose inputs require gradients append a
node holding the vector-Jacobian product; :func:`gradient_of` replays that
record backwards.  Outside a tape nothing is recorded, which keeps inference
free of bookkeeping and safe to run from several threads.
"""
from __future__ import annotations

import contextlib
import contextvars
import math
from dataclasses import dataclass
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np

__all__ = [
    "NonFiniteError",
    "Tensor",
    "Tape",
    "ParameterStore",
    "OptimizerConfig",
    "precision",
    "set_precision",
    "get_dtype",
    "gradient_of",
    "optimizer_step",
    "schedule_value",
    "softmax_rows",
    "log_softmax_rows",
    "layer_norm",
    "feed_forward",
]

PRECISIONS = {"float64": np.float64, "float32": np.float32}
LAYER_NORM_EPS = 1e-5

_dtype_var: contextvars.ContextVar = contextvars.ContextVar("endx_dtype", default=np.float64)
_tape_var: contextvars.ContextVar = contextvars.ContextVar("endx_tape", default=None)


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


def get_dtype():
    return _dtype_var.get()


def set_precision(mode: str) -> None:
    if mode not in PRECISIONS:
        raise ValueError(f"unknown precision {mode!r}; expected one of {sorted(PRECISIONS)}")
    _dtype_var.set(PRECISIONS[mode])


@contextlib.contextmanager
def precision(mode: str) -> Iterator[None]:
    """Temporarily switch the dtype used for new parameters and constants."""
    if mode not in PRECISIONS:
        raise ValueError(f"unknown precision {mode!r}; expected one of {sorted(PRECISIONS)}")
    token = _dtype_var.set(PRECISIONS[mode])
    try:
        yield
    finally:
        _dtype_var.reset(token)


class Node:
    __slots__ = ("op", "inputs", "output", "vjp")

    def __init__(self, op: str, inputs: tuple, output: "Tensor", vjp: Callable):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.vjp = vjp


class Tape:
    """Ordered record of differentiable operations.

    Nodes are appended in execution order, which is a topological order of the
    computation graph, so walking the list backwards visits every node after
    all of its consumers.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.last_visits: list[int] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _tape_var.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_var.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: "Tensor") -> dict[int, np.ndarray]:
        """Accumulate d(loss)/d(x) for every tensor feeding ``loss``.

        Returns a mapping keyed by ``id(tensor)``.
        """
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        self.last_visits = []
        for index in range(len(self.nodes) - 1, -1, -1):
            node = self.nodes[index]
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            self.last_visits.append(index)
            input_grads = node.vjp(g)
            for inp, ig in zip(node.inputs, input_grads):
                if ig is None or not inp.requires_grad:
                    continue
                if not np.all(np.isfinite(ig)):
                    raise NonFiniteError(f"non-finite gradient flowing out of '{node.op}'")
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + ig
                else:
                    grads[key] = ig
        return grads


class Tensor:
    """A numpy array that knows how it was produced."""

    __slots__ = ("data", "requires_grad", "name", "_tape")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(get_dtype())
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name
        self._tape = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else get_dtype()
    return Tensor(np.asarray(x, dtype=dtype))


def _emit(op: str, out: np.ndarray, inputs: tuple, vjp: Callable) -> Tensor:
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"non-finite value produced by '{op}'")
    result = Tensor(out)
    tape = _tape_var.get()
    if tape is not None and any(t.requires_grad for t in inputs):
        result.requires_grad = True
        result._tape = tape
        tape.nodes.append(Node(op, inputs, result, vjp))
    return result


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _lift(b, a)
    b = _lift(b)
    return _lift(a, b), b


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _emit("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _emit("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _emit("mul", a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data
    return _emit("div", out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def neg(a: Tensor) -> Tensor:
    return _emit("neg", -a.data, (a,), lambda g: (-g,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _emit("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so neither branch overflows
    ex = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + ex), ex / (1.0 + ex)).astype(x.dtype)
    return _emit("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a: Tensor) -> Tensor:
    on = a.data > 0
    return _emit("relu", np.where(on, a.data, 0).astype(a.dtype), (a,), lambda g: (g * on,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _emit("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _emit("log", np.log(a.data), (a,), lambda g: (g / a.data,))


# ---------------------------------------------------------------- structural


def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul expects operands of rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if b.ndim == 2:
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _emit("matmul", a.data @ b.data, (a, b), vjp)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _emit("transpose", np.transpose(a.data, axes), (a,),
                 lambda g: (np.transpose(g, inverse),))


def swapaxes(a: Tensor, axis1: int, axis2: int) -> Tensor:
    return _emit("swapaxes", np.swapaxes(a.data, axis1, axis2), (a,),
                 lambda g: (np.swapaxes(g, axis1, axis2),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return _emit("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def _is_basic(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis
               for i in parts)


def getitem(a: Tensor, index) -> Tensor:
    basic = _is_basic(index)

    def vjp(g):
        z = np.zeros_like(a.data)
        if basic:
            z[index] = g
        else:
            np.add.at(z, index, g)
        return (z,)

    return _emit("getitem", a.data[index], (a,), vjp)


def take_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of a 2-D table (embedding lookup)."""
    ids = np.asarray(ids)
    width = table.shape[1]

    def vjp(g):
        z = np.zeros_like(table.data)
        np.add.at(z, ids.ravel(), g.reshape(-1, width))
        return (z,)

    return _emit("take_rows", table.data[ids], (table,), vjp)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    out = np.stack([t.data for t in tensors], axis=axis)

    def vjp(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _emit("stack", out, tensors, vjp)


def diagonal(a: Tensor) -> Tensor:
    """Main diagonal of a square matrix."""
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"diagonal expects a square matrix, got {a.shape}")
    return _emit("diagonal", np.diagonal(a.data).copy(), (a,), lambda g: (np.diag(g),))


def detach(a: Tensor) -> Tensor:
    return Tensor(a.data)


# ---------------------------------------------------------------- reductions


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _emit("sum", np.asarray(out), (a,), vjp)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return sum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


# ---------------------------------------------------------------- fused ops


def _support(m: np.ndarray, mask) -> np.ndarray | None:
    if mask is None:
        return None
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), m.shape)
    if not np.all(mask.any(axis=-1)):
        raise ValueError("empty softmax support")
    return mask


def softmax_rows(m: Tensor, mask=None) -> Tensor:
    """Softmax over the last axis; entries where ``mask`` is False are exactly 0."""
    mask = _support(m.data, mask)
    x = m.data if mask is None else np.where(mask, m.data, -np.inf)
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _emit("softmax_rows", out, (m,), vjp)


def log_softmax_rows(m: Tensor) -> Tensor:
    x = m.data
    shifted = x - x.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))

    def vjp(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _emit("log_softmax_rows", out, (m,), vjp)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    width = x.shape[-1]
    if gain.shape != (width,) or bias.shape != (width,):
        raise ValueError(f"layer_norm gain/bias must have shape ({width},)")
    centred = x.data - x.data.mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt((centred * centred).mean(axis=-1, keepdims=True) + eps)
    xhat = centred * inv
    out = xhat * gain.data + bias.data

    def vjp(g):
        gx_hat = g * gain.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _emit("layer_norm", out, (x, gain, bias), vjp)


def kl_terms(p: Tensor, q: Tensor, floor: float = 1e-12) -> Tensor:
    """Sum of p*log(p/q) with 0*log(0/.) = 0 and q floored inside the log."""
    if p.shape != q.shape:
        raise ValueError(f"kl shape mismatch: {p.shape} vs {q.shape}")
    pos = p.data > 0
    safe_p = np.where(pos, p.data, 1.0)
    q_floor = np.maximum(q.data, floor)
    ratio = np.where(pos, np.log(safe_p) - np.log(q_floor), 0.0)
    out = np.sum(np.where(pos, p.data * ratio, 0.0))

    def vjp(g):
        gp = np.where(pos, g * (ratio + 1.0), 0.0)
        gq = np.where(pos & (q.data > floor), -g * p.data / q_floor, 0.0)
        return gp.astype(p.dtype), gq.astype(q.dtype)

    return _emit("kl_terms", np.asarray(out, dtype=p.dtype), (p, q), vjp)


def feed_forward(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    """Position-wise ReLU network: relu(x W1 + b1) W2 + b2."""
    width = x.shape[-1]
    if w1.shape[0] != width or w2.shape != (w1.shape[1], width):
        raise ValueError(
            f"feed_forward shape mismatch: x {x.shape}, W1 {w1.shape}, W2 {w2.shape}")
    if b1.shape != (w1.shape[1],) or b2.shape != (width,):
        raise ValueError("feed_forward bias shape mismatch")
    return relu(x @ w1 + b1) @ w2 + b2


# ---------------------------------------------------------------- parameters


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0


class ParameterStore:
    """Named trainable tensors plus their AdamW moments."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self.state: dict[str, AdamState] = {}

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        arr = np.array(value, dtype=get_dtype())
        tensor = Tensor(arr, requires_grad=True, name=name)
        self._params[name] = tensor
        self.state[name] = AdamState(np.zeros_like(arr), np.zeros_like(arr))
        return tensor

    def glorot(self, name: str, shape: tuple, rng: np.random.Generator,
               scale: float = 1.0) -> Tensor:
        fan_in, fan_out = shape[0], shape[-1]
        limit = scale * math.sqrt(6.0 / (fan_in + fan_out))
        return self.add(name, rng.uniform(-limit, limit, size=shape))

    def zeros(self, name: str, shape: tuple) -> Tensor:
        return self.add(name, np.zeros(shape))

    def ones(self, name: str, shape: tuple) -> Tensor:
        return self.add(name, np.ones(shape))

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def assign(self, name: str, value) -> None:
        param = self._params[name]
        value = np.asarray(value)
        if value.shape != param.shape:
            raise ValueError(f"cannot reshape parameter {name!r}: {param.shape} -> {value.shape}")
        param.data = value.astype(param.dtype, copy=True)

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self._params.items()}

    def restore(self, values: Mapping[str, np.ndarray]) -> None:
        for name, value in values.items():
            self.assign(name, value)

    def subset(self, prefixes: Sequence[str]) -> dict[str, Tensor]:
        return {n: t for n, t in self._params.items() if n.startswith(tuple(prefixes))}


def gradient_of(loss: Tensor, params) -> dict[str, np.ndarray]:
    """d(loss)/d(param) for each named parameter; unreachable ones get zeros."""
    if loss.data.size != 1 or loss.ndim != 0:
        raise ValueError(f"loss must be a scalar, got shape {loss.shape}")
    named = params.items() if hasattr(params, "items") else params
    grads = loss._tape.backward(loss) if loss._tape is not None else {}
    return {name: grads.get(id(t), np.zeros_like(t.data)) for name, t in named}


# ---------------------------------------------------------------- optimizer


SCHEDULES = ("constant", "linear-decay")


@dataclass
class OptimizerConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    schedule: str = "constant"
    total_steps: int = 0

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("betas must lie strictly between 0 and 1")
        if not self.eps > 0:
            raise ValueError("eps must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"schedule must be one of {SCHEDULES}")


def schedule_value(kind: str, step: int, total_steps: int, base: float) -> float:
    if kind == "constant":
        return base
    if kind == "linear-decay":
        if total_steps <= 0:
            raise ValueError("linear-decay schedule needs total_steps > 0")
        if not 0 <= step <= total_steps:
            raise ValueError(f"step {step} outside [0, {total_steps}]")
        return base * (1.0 - step / total_steps)
    raise ValueError(f"unknown schedule {kind!r}")


def optimizer_step(params: ParameterStore, grads: Mapping[str, np.ndarray],
                   cfg: OptimizerConfig, step: int) -> ParameterStore:
    """One AdamW update (decoupled weight decay) for every parameter in ``grads``.

    Parameters without an entry in ``grads`` are left untouched, moments included.
    """
    unknown = set(grads) - set(params)
    if unknown:
        raise KeyError(f"gradients for unknown parameters: {sorted(unknown)}")
    lr = schedule_value(cfg.schedule, step, cfg.total_steps, cfg.lr)
    for name, g in grads.items():
        param = params[name]
        st = params.state[name]
        st.t += 1
        st.m = cfg.beta1 * st.m + (1.0 - cfg.beta1) * g
        st.v = cfg.beta2 * st.v + (1.0 - cfg.beta2) * (g * g)
        m_hat = st.m / (1.0 - cfg.beta1 ** st.t)
        v_hat = st.v / (1.0 - cfg.beta2 ** st.t)
        decayed = param.data * (1.0 - lr * cfg.weight_decay)
        param.data = (decayed - lr * m_hat / (np.sqrt(v_hat) + cfg.eps)).astype(param.dtype)
    return params
