"""Dense float tensors with reverse-mode automatic differentiation.

Every op builds its output eagerly with numpy and, when any input requires a
gradient, records a closure that maps the output gradient back onto the
inputs. ``backward`` walks the recorded graph once in reverse topological
order.
"""

from __future__ import annotations

import contextlib
import math
from typing import Iterable, Sequence

import numpy as np

_state = {"dtype": np.float32, "grad": True}


class ShapeError(ValueError):
    """Operand extents are incompatible."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily change the float type used for new tensors.

    Float32 is the working precision; float64 exists for finite-difference
    gradient checks.
    """
    prev = _state["dtype"]
    _state["dtype"] = np.dtype(dtype).type
    try:
        yield
    finally:
        _state["dtype"] = prev


@contextlib.contextmanager
def no_grad():
    prev = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = prev


def grad_enabled() -> bool:
    return _state["grad"]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=_state["dtype"])
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.item())

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, op={self.op})"

    def __len__(self) -> int:
        return len(self.data)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(data, dtype=_state["dtype"])
    out.grad = None
    out.op = op
    needs = _state["grad"] and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{op}: cannot combine shapes {a.shape} and {b.shape}") from exc


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")

    def backward(g):
        ga = g / b.data
        gb = -g * a.data / (b.data * b.data)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(a.data / b.data, (a, b), backward, "div")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _result(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)
    return _result(out, (x,), lambda g: (g / x.data,), "log")


def tabs(x: Tensor) -> Tensor:
    return _result(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),), "abs")


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    pos = x.data >= 0
    out = np.where(pos, x.data, slope * x.data)
    return _result(out, (x,), lambda g: (np.where(pos, g, slope * g),), "leaky_relu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU, as used by GPT-2."""
    u = x.data
    t = np.tanh(_GELU_C * (u + 0.044715 * u**3))
    out = 0.5 * u * (1.0 + t)

    def backward(g):
        dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * u * u)
        return (g * (0.5 * (1.0 + t) + 0.5 * u * dt),)

    return _result(out, (x,), backward, "gelu")


def elementwise(x, kind: str, other=None, slope: float = 0.01) -> Tensor:
    """Dispatch by name: ``leaky_relu``, ``gelu``, ``add`` or ``mul``."""
    if kind == "leaky_relu":
        return leaky_relu(as_tensor(x), slope)
    if kind == "gelu":
        return gelu(as_tensor(x))
    if kind == "add":
        return add(x, other)
    if kind == "mul":
        return mul(x, other)
    raise ValueError(f"unknown elementwise kind {kind!r}")


# ---------------------------------------------------------------- reductions and shape


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(out, (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return tsum(x, axis, keepdims) / float(n)


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)
    return _result(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    out = np.transpose(x.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _result(out, (x,), lambda g: (np.transpose(g, inv),), "transpose")


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    out = np.swapaxes(x.data, a, b)
    return _result(out, (x,), lambda g: (np.swapaxes(g, a, b),), "swapaxes")


def index(x: Tensor, idx) -> Tensor:
    out = x.data[idx]

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)

    return _result(out, (x,), backward, "index")


def take_rows(table: Tensor, ids) -> Tensor:
    """Gather rows of a 2-D table by integer ids of any shape (embedding lookup)."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"row id out of range for table with {table.shape[0]} rows")
    out = table.data[ids]

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return _result(out, (table,), backward, "take_rows")


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    ax = axis % out.ndim
    bounds = np.cumsum([p.shape[ax] for p in parts])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _result(out, parts, backward, "concat")


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul needs operands with at least two dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(out, (a, b), backward, "matmul")


def softmax_rows(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis; ``mask`` (broadcastable, True=keep) zeroes entries."""
    z = x.data
    if mask is not None:
        mask = np.broadcast_to(mask, z.shape)
        if not mask.any(axis=-1).all():
            raise ValueError("softmax row with every entry masked")
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _result(s, (x,), backward, "softmax")


# ---------------------------------------------------------------- normalisation


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    D = x.shape[-1]
    if gamma.shape != (D,) or beta.shape != (D,):
        raise ShapeError(f"layernorm: width {D} does not match affine {gamma.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = gamma.data * xhat + beta.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        dxhat = g * gamma.data
        dx = inv / D * (
            D * dxhat
            - dxhat.sum(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
        )
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result(out, (x, gamma, beta), backward, "layernorm")


class BatchNormState:
    """Running statistics for one batchnorm site; not a trainable tensor."""

    def __init__(self, width: int, momentum: float = 0.1, eps: float = 1e-5):
        self.running_mean = np.zeros(width, dtype=np.float64)
        self.running_var = np.ones(width, dtype=np.float64)
        self.momentum = momentum
        self.eps = eps


def batchnorm(
    x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, training: bool
) -> Tensor:
    """Normalise ``x[B, F]`` per feature.

    Training mode uses biased batch statistics and folds them into the
    running estimates with ``state.momentum``; eval mode reads the running
    estimates only.
    """
    if x.ndim != 2 or x.shape[1] != gamma.shape[0]:
        raise ShapeError(f"batchnorm: expected [B, {gamma.shape[0]}], got {x.shape}")
    if not training:
        inv = 1.0 / np.sqrt(state.running_var + state.eps)
        xhat = (x.data - state.running_mean) * inv
        out = gamma.data * xhat + beta.data

        def backward_eval(g):
            return g * gamma.data * inv, (g * xhat).sum(axis=0), g.sum(axis=0)

        return _result(out, (x, gamma, beta), backward_eval, "batchnorm")

    B = x.shape[0]
    if B < 2:
        raise ValueError("batchnorm in training mode needs at least two rows")
    mu = x.data.mean(axis=0)
    xc = x.data - mu
    var = (xc * xc).mean(axis=0)
    inv = 1.0 / np.sqrt(var + state.eps)
    xhat = xc * inv
    out = gamma.data * xhat + beta.data
    m = state.momentum
    state.running_mean = (1 - m) * state.running_mean + m * mu
    state.running_var = (1 - m) * state.running_var + m * var

    def backward(g):
        dxhat = g * gamma.data
        dx = inv / B * (B * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
        return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return _result(out, (x, gamma, beta), backward, "batchnorm")


# ---------------------------------------------------------------- losses


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of integer targets under softmax(logits)."""
    V = logits.shape[-1]
    flat = logits.data.reshape(-1, V)
    t = np.asarray(targets).reshape(-1)
    if t.shape[0] != flat.shape[0]:
        raise ShapeError(f"cross_entropy: {flat.shape[0]} rows but {t.shape[0]} targets")
    if t.size and (t.min() < 0 or t.max() >= V):
        raise IndexError(f"class index outside [0, {V})")
    z = flat - flat.max(axis=1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logz
    N = flat.shape[0]
    out = -logp[np.arange(N), t].mean()

    def backward(g):
        p = np.exp(logp)
        p[np.arange(N), t] -= 1.0
        return ((g / N) * p).reshape(logits.shape),

    return _result(np.asarray(out), (logits,), backward, "cross_entropy")


def l1_loss(pred: Tensor, target: Tensor) -> Tensor:
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"l1_loss: shapes differ, {pred.shape} vs {target.shape}")
    return mean(tabs(sub(pred, target)))


def losses(pred, target, kind: str) -> Tensor:
    if kind == "cross_entropy":
        return cross_entropy(pred, target)
    if kind == "l1":
        return l1_loss(pred, target)
    raise ValueError(f"unknown loss kind {kind!r}")


# ---------------------------------------------------------------- backward and SGD


def graph(root: Tensor) -> list[Tensor]:
    """Recorded ops reachable from ``root`` in topological order (inputs first)."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss is not connected to any tensor that requires grad")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        node.grad = g
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg


def optimizer_step(params: Iterable[Tensor], lr: float) -> None:
    """Plain gradient descent, ``p -= lr * grad``, then zero the grads."""
    params = list(params)
    for p in params:
        if p.grad is None:
            raise ValueError("parameter has no gradient buffer; call zero_grad or backward first")
    for p in params:
        p.data = (p.data - lr * p.grad).astype(p.data.dtype, copy=False)
        p.grad = np.zeros_like(p.data)
