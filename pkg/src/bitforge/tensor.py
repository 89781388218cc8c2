"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations record onto the active :class:`Graph` (entered with ``with
Graph() as g``).  Outside a graph nothing is recorded, which is how teacher
forwards and evaluation run.  ``backward`` walks the tape in reverse append
order and frees it afterwards.
"""
from __future__ import annotations

import math
from collections.abc import Callable, Iterable, Sequence
from dataclasses import dataclass

import numpy as np

__all__ = [
    "Tensor", "Graph", "Node", "backward", "grad_check", "tensor",
    "matmul", "add", "sub", "mul", "neg", "exp", "log", "broadcast_to",
    "embedding", "layer_norm", "gelu", "softmax", "log_softmax",
    "cross_entropy", "sum", "mean", "transpose", "reshape",
    "DimensionError", "GradientError",
]


class DimensionError(ValueError):
    pass


class GradientError(RuntimeError):
    pass


_ACTIVE: list["Graph"] = []


class Tensor:
    """An n-dimensional float64 array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)  # always a private copy
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar
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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _new(data: np.ndarray) -> Tensor:
    # Internal constructor that skips the defensive copy for fresh results.
    t = Tensor.__new__(Tensor)
    t.data = np.asarray(data, dtype=np.float64)
    t.grad = None
    t.requires_grad = False
    t.name = None
    return t


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Graph:
    """Append-only tape of operation records."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._tracked: set[int] = set()

    def __enter__(self) -> "Graph":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def tracks(self, t: Tensor) -> bool:
        return t.requires_grad or id(t) in self._tracked

    def record(self, op, inputs, output, vjp) -> None:
        self.nodes.append(Node(op, tuple(inputs), output, vjp))
        self._tracked.add(id(output))

    def backward(self, loss: Tensor) -> None:
        backward(self, loss)

    def clear(self) -> None:
        self.nodes.clear()
        self._tracked.clear()


def _record(op: str, inputs: Sequence[Tensor], out_data: np.ndarray, vjp) -> Tensor:
    out = _new(out_data)
    if _ACTIVE:
        g = _ACTIVE[-1]
        if any(g.tracks(t) for t in inputs):
            g.record(op, inputs, out, vjp)
    return out


def backward(graph: Graph, loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every ``requires_grad`` leaf on the tape."""
    if loss.data.size != 1:
        raise GradientError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(graph.nodes):
        g_out = grads.pop(id(node.output), None)
        if g_out is None:
            continue
        for inp, g_in in zip(node.inputs, node.vjp(g_out)):
            if g_in is None or not graph.tracks(inp):
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + g_in
            else:
                grads[key] = g_in
            if inp.requires_grad:
                leaves[key] = inp
    for key, leaf in leaves.items():
        g = grads.get(key)
        if g is None:
            continue
        g = np.broadcast_to(g, leaf.shape)
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
    graph.clear()


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- primitives

def matmul(a, b) -> Tensor:
    """Matrix product with numpy batching rules (both operands at least 2-D)."""
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    A, B = a.data, b.data

    def vjp(g):
        ga = _unbroadcast(g @ np.swapaxes(B, -1, -2), A.shape)
        gb = _unbroadcast(np.swapaxes(A, -1, -2) @ g, B.shape)
        return ga, gb

    return _record("matmul", (a, b), A @ B, vjp)


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    sa, sb = a.shape, b.shape
    return _record("add", (a, b), a.data + b.data,
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    sa, sb = a.shape, b.shape
    return _record("sub", (a, b), a.data - b.data,
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    A, B = a.data, b.data
    return _record("mul", (a, b), A * B,
                   lambda g: (_unbroadcast(g * B, A.shape), _unbroadcast(g * A, B.shape)))


def neg(a) -> Tensor:
    a = _wrap(a)
    return _record("neg", (a,), -a.data, lambda g: (-g,))


def exp(a) -> Tensor:
    a = _wrap(a)
    out = np.exp(a.data)
    return _record("exp", (a,), out, lambda g: (g * out,))


def log(a) -> Tensor:
    a = _wrap(a)
    A = a.data
    return _record("log", (a,), np.log(A), lambda g: (g / A,))


def broadcast_to(a, shape: Sequence[int]) -> Tensor:
    a = _wrap(a)
    sa = a.shape
    out = np.broadcast_to(a.data, tuple(shape)).copy()
    return _record("broadcast", (a,), out, lambda g: (_unbroadcast(g, sa),))


def embedding(table, ids) -> Tensor:
    """Gather rows of ``table`` (V x d) at integer ``ids`` of any shape."""
    table = _wrap(table)
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"token id out of range [0, {table.shape[0]})")
    n_rows = table.shape[0]

    def vjp(g):
        gt = np.zeros((n_rows, g.shape[-1]))
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, g.shape[-1]))
        return (gt,)

    return _record("embedding", (table,), table.data[ids], vjp)


def layer_norm(x, weight, bias, eps: float = 1e-5) -> Tensor:
    x, weight, bias = _wrap(x), _wrap(weight), _wrap(bias)
    X, W = x.data, weight.data
    mu = X.mean(axis=-1, keepdims=True)
    xc = X - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * W + bias.data
    n = X.shape[-1]

    def vjp(g):
        gw = _unbroadcast(g * xhat, W.shape)
        gb = _unbroadcast(g, bias.shape)
        gx_hat = g * W
        gx = rstd * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                     - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True) / n)
        return gx, gw, gb

    return _record("layer_norm", (x, weight, bias), out, vjp)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x) -> Tensor:
    """tanh approximation of GELU."""
    x = _wrap(x)
    X = x.data
    inner = _GELU_C * (X + 0.044715 * X ** 3)
    th = np.tanh(inner)
    out = 0.5 * X * (1.0 + th)

    def vjp(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * X ** 2)
        return (g * (0.5 * (1.0 + th) + 0.5 * X * (1.0 - th * th) * dinner),)

    return _record("gelu", (x,), out, vjp)


def _softmax_np(X: np.ndarray) -> np.ndarray:
    z = X - X.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax_np(X: np.ndarray) -> np.ndarray:
    z = X - X.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(x) -> Tensor:
    x = _wrap(x)
    p = _softmax_np(x.data)
    return _record("softmax", (x,), p,
                   lambda g: (p * (g - (g * p).sum(axis=-1, keepdims=True)),))


def log_softmax(x) -> Tensor:
    x = _wrap(x)
    ls = _log_softmax_np(x.data)
    p = np.exp(ls)
    return _record("log_softmax", (x,), ls,
                   lambda g: (g - p * g.sum(axis=-1, keepdims=True),))


def cross_entropy(logits, targets, mask=None) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` over active positions."""
    logits = _wrap(logits)
    targets = np.asarray(targets)
    if logits.shape[:-1] != targets.shape:
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    m = np.ones(targets.shape) if mask is None else np.asarray(mask, dtype=np.float64)
    count = m.sum()
    if count <= 0:
        raise ValueError("cross_entropy: no active positions")
    ls = _log_softmax_np(logits.data)
    picked = np.take_along_axis(ls, targets[..., None], axis=-1)[..., 0]
    loss = -(picked * m).sum() / count

    def vjp(g):
        d = np.exp(ls)
        np.put_along_axis(d, targets[..., None],
                          np.take_along_axis(d, targets[..., None], axis=-1) - 1.0, axis=-1)
        return (d * (m / count)[..., None] * g,)

    return _record("cross_entropy", (logits,), np.asarray(loss), vjp)


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = _wrap(x)
    shape = x.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _record("sum", (x,), np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), vjp)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _wrap(x)
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def transpose(x, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes; default swaps the last two."""
    x = _wrap(x)
    if axes is None:
        axes = list(range(x.ndim))
        axes[-2], axes[-1] = axes[-1], axes[-2]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record("transpose", (x,), x.data.transpose(axes),
                   lambda g: (g.transpose(inv),))


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = _wrap(x)
    old = x.shape
    return _record("reshape", (x,), x.data.reshape(tuple(shape)),
                   lambda g: (g.reshape(old),))


def custom_op(op: str, inputs: Sequence[Tensor], out_data: np.ndarray, vjp) -> Tensor:
    """Register an op defined outside this module (e.g. fake quantization)."""
    return _record(op, [_wrap(t) for t in inputs], out_data, vjp)


# ---------------------------------------------------------------- checking

def grad_check(f: Callable[[], Tensor], params: Iterable[Tensor], eps: float = 1e-5) -> float:
    """Max relative error between autodiff and central differences.

    ``f`` rebuilds the scalar loss from the current values of ``params``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    params = list(params)
    for p in params:
        p.grad = None
    with Graph() as g:
        loss = f()
        if not np.isfinite(loss.data).all():
            raise FloatingPointError("grad_check: loss is not finite")
        backward(g, loss)
    worst = 0.0
    for p in params:
        auto = np.zeros_like(p.data) if p.grad is None else p.grad
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = f().item()
            flat[i] = orig - eps
            lo = f().item()
            flat[i] = orig
            if not (math.isfinite(hi) and math.isfinite(lo)):
                raise FloatingPointError("grad_check: loss is not finite")
            fd = (hi - lo) / (2 * eps)
            worst = max(worst, abs(auto.reshape(-1)[i] - fd) / (abs(fd) + 1e-8))
    for p in params:
        p.grad = None
    return worst
