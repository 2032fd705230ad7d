"""Reverse-mode automatic differentiation over dense float64 arrays.

Tensors record the operation graph as they are created; ``backward`` replays
the recorded graph exactly once in reverse topological order and accumulates
gradients into the leaves. All storage is 64-bit floats and every op checks
its output for NaN/Inf, which is always a hard error. Graphs are built and
consumed on a single thread; independent graphs may live on separate threads
(the grad-enabled flag is thread-local).
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "NonFiniteError",
    "Tensor",
    "tensor",
    "constant",
    "param",
    "no_grad",
    "grad_enabled",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "transpose",
    "reshape",
    "take",
    "take_positions",
    "select_last",
    "tsum",
    "tmean",
    "exp",
    "log",
    "sqrt",
    "gelu",
    "softmax",
    "log_softmax",
    "layer_norm",
    "backward",
    "zero_grads",
    "finite_diff_check",
]


class NonFiniteError(ArithmeticError):
    """An op produced NaN or Inf."""


_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


class no_grad:
    """Context manager that stops ops from recording the graph."""

    def __enter__(self):
        self._prev = grad_enabled()
        _state.enabled = False
        return self

    def __exit__(self, *exc):
        _state.enabled = self._prev
        return False


def _check_finite(data: np.ndarray, op: str) -> None:
    # A finite sum proves every element is finite (NaN and inf both propagate).
    # A non-finite sum can also be plain overflow, so confirm elementwise.
    if not np.isfinite(np.sum(data)) and not np.isfinite(data).all():
        raise NonFiniteError(f"op '{op}' produced a non-finite value")


class Tensor:
    """A node in the recorded graph: float64 data plus an optional backward rule."""

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf"):
        arr = np.asarray(data, dtype=np.float64)
        _check_finite(arr, op)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.op = op
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            if g.shape == self.data.shape:
                # copy: g may be a view into a consumer's buffer
                self.grad = np.array(g, dtype=np.float64)
                return
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        backward(self)

    # operator sugar; scalars and ndarrays are wrapped as constants
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def __repr__(self) -> str:
        return f"Tensor(op={self.op!r}, shape={self.data.shape}, grad={self.requires_grad})"


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False, op="const")


def param(data) -> Tensor:
    """A trainable leaf."""
    return Tensor(data, requires_grad=True, op="param")


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else constant(x)


def _make(data: np.ndarray, op: str, parents: tuple[Tensor, ...], bw) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    track = grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = track
    out._parents = parents if track else ()
    out._backward = bw if track else None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gd, sd) in enumerate(zip(g.shape, shape)) if sd == 1 and gd != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data + b.data

    def bw(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g, b.data.shape))

    return _make(data, "add", (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data - b.data

    def bw(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(-g, b.data.shape))

    return _make(data, "sub", (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data * b.data

    def bw(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _make(data, "mul", (a, b), bw)


def div(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data / b.data

    def bw(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(data, "div", (a, b), bw)


def neg(a: Tensor) -> Tensor:
    def bw(g):
        if a.requires_grad:
            a.accumulate(-g)

    return _make(-a.data, "neg", (a,), bw)


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)

    def bw(g):
        if a.requires_grad:
            a.accumulate(g * data)

    return _make(data, "exp", (a,), bw)


def log(a: Tensor) -> Tensor:
    data = np.log(a.data)

    def bw(g):
        if a.requires_grad:
            a.accumulate(g / a.data)

    return _make(data, "log", (a,), bw)


def sqrt(a: Tensor) -> Tensor:
    data = np.sqrt(a.data)

    def bw(g):
        if a.requires_grad:
            a.accumulate(g * 0.5 / data)

    return _make(data, "sqrt", (a,), bw)


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(a: Tensor) -> Tensor:
    """Exact GELU: 0.5 * x * (1 + erf(x / sqrt(2)))."""
    cdf = 0.5 * (1.0 + erf(a.data * _INV_SQRT2))
    data = a.data * cdf

    def bw(g):
        if a.requires_grad:
            pdf = _INV_SQRT2PI * np.exp(-0.5 * a.data * a.data)
            a.accumulate(g * (cdf + a.data * pdf))

    return _make(data, "gelu", (a,), bw)


# ---------------------------------------------------------------- structural


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must be at least 2-D")
    data = a.data @ b.data

    def bw(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape))
        if b.requires_grad:
            if b.ndim == 2 and g.ndim > 2 and a.data.shape[:-1] == g.shape[:-1]:
                # batched @ 2-D weight: one flat GEMM instead of a stacked
                # per-batch product that _unbroadcast would then sum away
                a2 = a.data.reshape(-1, a.data.shape[-1])
                g2 = g.reshape(-1, g.shape[-1])
                b.accumulate(a2.T @ g2)
            else:
                b.accumulate(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape))

    return _make(data, "matmul", (a, b), bw)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bw(g):
        if a.requires_grad:
            a.accumulate(np.transpose(g, inv))

    return _make(np.transpose(a.data, axes), "transpose", (a,), bw)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    orig = a.data.shape

    def bw(g):
        if a.requires_grad:
            a.accumulate(g.reshape(orig))

    return _make(a.data.reshape(shape), "reshape", (a,), bw)


def take(a: Tensor, idx) -> Tensor:
    """Gather along axis 0: out = a[idx]. Repeated indices accumulate on backward."""
    idx = np.asarray(idx, dtype=np.int64)
    data = a.data[idx]

    def bw(g):
        if a.requires_grad:
            if a.grad is None:
                a.grad = np.zeros_like(a.data)
            np.add.at(a.grad, idx, g)

    return _make(data, "take", (a,), bw)


def take_positions(a: Tensor, idx) -> Tensor:
    """Per-row position gather: a is (B, T, ...), idx is (B,), out is (B, ...)."""
    idx = np.asarray(idx, dtype=np.int64)
    rows = np.arange(a.data.shape[0])
    data = a.data[rows, idx]

    def bw(g):
        if a.requires_grad:
            if a.grad is None:
                a.grad = np.zeros_like(a.data)
            np.add.at(a.grad, (rows, idx), g)

    return _make(data, "take_positions", (a,), bw)


def select_last(a: Tensor, idx) -> Tensor:
    """Gather one entry from the last axis: a is (..., V), idx is (...,) ints."""
    idx = np.asarray(idx, dtype=np.int64)
    flat = a.data.reshape(-1, a.data.shape[-1])
    rows = np.arange(flat.shape[0])
    data = flat[rows, idx.reshape(-1)].reshape(idx.shape)

    def bw(g):
        if a.requires_grad:
            if a.grad is None:
                a.grad = np.zeros_like(a.data)
            gflat = a.grad.reshape(-1, a.data.shape[-1])
            np.add.at(gflat, (rows, idx.reshape(-1)), g.reshape(-1))

    return _make(data, "select_last", (a,), bw)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if not a.requires_grad:
            return
        if axis is None:
            a.accumulate(np.broadcast_to(g, a.data.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        a.accumulate(np.broadcast_to(g, a.data.shape).copy())

    return _make(data, "sum", (a,), bw)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), constant(1.0 / n))


# ------------------------------------------------------------------- fused


def softmax(a: Tensor) -> Tensor:
    """Numerically stable softmax over the last axis."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        if a.requires_grad:
            inner = (g * data).sum(axis=-1, keepdims=True)
            a.accumulate(data * (g - inner))

    return _make(data, "softmax", (a,), bw)


def log_softmax(a: Tensor) -> Tensor:
    """Numerically stable log-softmax over the last axis."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    data = shifted - lse

    def bw(g):
        if a.requires_grad:
            a.accumulate(g - np.exp(data) * g.sum(axis=-1, keepdims=True))

    return _make(data, "log_softmax", (a,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    data = gain.data * xhat + bias.data
    lead = tuple(range(x.data.ndim - 1))

    def bw(g):
        if gain.requires_grad:
            gain.accumulate((g * xhat).sum(axis=lead))
        if bias.requires_grad:
            bias.accumulate(g.sum(axis=lead))
        if x.requires_grad:
            dxhat = g * gain.data
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            x.accumulate(inv * (dxhat - m1 - xhat * m2))

    return _make(data, "layer_norm", (x, gain, bias), bw)


# ----------------------------------------------------------------- backward


def _topo_order(root: Tensor) -> list[Tensor]:
    """Iterative post-order DFS; each reachable grad-requiring node appears once."""
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf. Loss must be scalar."""
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not require grad; nothing to differentiate")
    order = _topo_order(loss)
    loss.accumulate(np.ones_like(loss.data))
    for node in reversed(order):
        g = node.grad
        if g is None:
            continue
        _check_finite(g, f"grad:{node.op}")
        if node._backward is not None:
            node._backward(g)


def zero_grads(params: Iterable[Tensor]) -> None:
    """Reset gradients to zeros so untouched leaves read as zero after backward."""
    for p in params:
        p.grad = np.zeros_like(p.data)


def finite_diff_check(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    samples_per_tensor: int = 4,
    rng: np.random.Generator | None = None,
    eps: float = 1e-12,
) -> float:
    """Compare autodiff gradients against central finite differences.

    Returns the max over sampled coordinates of
    |autodiff - fd| / (|autodiff| + |fd| + eps). `loss_fn` must rebuild the
    graph from the live `params` on every call.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    zero_grads(params)
    backward(loss_fn())
    worst = 0.0
    for p in params:
        n = p.data.size
        if n <= samples_per_tensor:
            coords = np.arange(n)
        else:
            coords = rng.choice(n, size=samples_per_tensor, replace=False)
        flat = p.data.reshape(-1)
        gflat = (p.grad if p.grad is not None else np.zeros_like(p.data)).reshape(-1)
        for c in coords:
            keep = flat[c]
            flat[c] = keep + h
            with no_grad():
                up = loss_fn().item()
            flat[c] = keep - h
            with no_grad():
                down = loss_fn().item()
            flat[c] = keep
            fd = (up - down) / (2.0 * h)
            ad = gflat[c]
            err = abs(ad - fd) / (abs(ad) + abs(fd) + eps)
            worst = max(worst, err)
    return worst
