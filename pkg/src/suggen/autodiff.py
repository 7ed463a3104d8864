"""Minimal dense-tensor engine with reverse-mode autodiff and Adam.

Tensors wrap float64 numpy arrays. Every op that sees a grad-requiring
input appends one record to the active graph (a Wengert list); backward
replays the list in reverse insertion order, accumulating gradients
additively into ``Tensor.grad`` buffers. The tape is meant to be rebuilt
per training step: wrap each step in ``with Graph() as g:``.

No GPU, no mixed precision, no graph reuse. Determinism is the contract:
identical inputs produce bit-identical outputs.
"""

from __future__ import annotations

import builtins
import math
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an op."""

    def __init__(self, op: str, *shapes):
        super().__init__(f"{op}: incompatible shapes {', '.join(str(tuple(s)) for s in shapes)}")
        self.op = op
        self.shapes = shapes


class Tensor:
    """A dense float64 array plus an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad = self.grad + g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Arithmetic sugar; all graph recording happens in the module-level ops.
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / float(other))
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# Graph / tape
# ---------------------------------------------------------------------------


class _Record:
    __slots__ = ("out", "backward_fn", "op")

    def __init__(self, out: Tensor, backward_fn: Callable[[np.ndarray], None], op: str):
        self.out = out
        self.backward_fn = backward_fn
        self.op = op


class Graph:
    """Append-only operation tape; insertion order is topological order."""

    _stack: list["Graph"] = []

    def __init__(self):
        self.nodes: list[_Record] = []

    def record(self, out: Tensor, backward_fn: Callable[[np.ndarray], None], op: str) -> None:
        self.nodes.append(_Record(out, backward_fn, op))

    def clear(self) -> None:
        self.nodes.clear()

    def __enter__(self) -> "Graph":
        Graph._stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        Graph._stack.pop()

    def backward(self, root: Tensor) -> None:
        backward(root, self)


_DEFAULT_GRAPH = Graph()
_GRAD_MODE = [True]


def active_graph() -> Graph:
    return Graph._stack[-1] if Graph._stack else _DEFAULT_GRAPH


class no_grad:
    """Context manager: ops inside record nothing and outputs detach."""

    def __enter__(self):
        _GRAD_MODE.append(False)
        return self

    def __exit__(self, *exc):
        _GRAD_MODE.pop()


def grad_enabled() -> bool:
    return _GRAD_MODE[-1]


def _make(out_data: np.ndarray, inputs: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    needs = grad_enabled() and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        active_graph().record(out, backward_fn, op)
    return out


def backward(root: Tensor, graph: Graph | None = None) -> None:
    """Populate grads of all grad-requiring leaves reachable from root.

    Root must be a scalar (size-1) tensor produced on the graph.
    """
    if root.size != 1:
        raise ShapeError("backward", root.shape)
    if not root.requires_grad:
        return  # constant w.r.t. every leaf; all grads are zero
    graph = graph if graph is not None else active_graph()
    root.accumulate_grad(np.ones_like(root.data))
    seen_root = False
    for rec in reversed(graph.nodes):
        if rec.out is root:
            seen_root = True
        if not seen_root:
            continue
        if rec.out.grad is None:
            continue
        rec.backward_fn(rec.out.grad)
    if not seen_root:
        raise ValueError("backward: root tensor was not produced on the given graph")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum g down to shape (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Primitive ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError("add", a.shape, b.shape) from None

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g, b.shape))

    return _make(out, (a, b), bwd, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data - b.data
    except ValueError:
        raise ShapeError("sub", a.shape, b.shape) from None

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate_grad(-_unbroadcast(g, b.shape))

    return _make(out, (a, b), bwd, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError("mul", a.shape, b.shape) from None

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * a.data, b.shape))

    return _make(out, (a, b), bwd, "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data / b.data
    except ValueError:
        raise ShapeError("div", a.shape, b.shape) from None

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(out, (a, b), bwd, "div")


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g * s)

    return _make(a.data * s, (a,), bwd, "scale")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None

    def bwd(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a.accumulate_grad(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b.accumulate_grad(_unbroadcast(gb, b.shape))

    return _make(out, (a, b), bwd, "matmul")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0  # subgradient 0 at exactly 0

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g * mask)

    return _make(a.data * mask, (a,), bwd, "relu")


# max(0, x) with subgradient 0 at the kink; same primitive as relu.
hinge = relu


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g * (1.0 - out * out))

    return _make(out, (a,), bwd, "tanh")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g * out)

    return _make(out, (a,), bwd, "exp")


def log(a: Tensor) -> Tensor:
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.log(a.data)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g / a.data)

    return _make(out, (a,), bwd, "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g * 0.5 / out)

    return _make(out, (a,), bwd, "sqrt")


def sigmoid(a: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-np.abs(a.data)))
    out = np.where(a.data >= 0, out, 1.0 - out)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g * out * (1.0 - out))

    return _make(out, (a,), bwd, "sigmoid")


def log_sigmoid(a: Tensor) -> Tensor:
    # log sigma(x) = -log(1 + e^{-x}), computed stably for both signs
    out = -np.logaddexp(0.0, -a.data)

    def bwd(g):
        if a.requires_grad:
            s = 1.0 / (1.0 + np.exp(-np.abs(a.data)))
            s = np.where(a.data >= 0, s, 1.0 - s)
            a.accumulate_grad(g * (1.0 - s))

    return _make(out, (a,), bwd, "log_sigmoid")


def softmax(a: Tensor) -> Tensor:
    """Softmax along the last axis."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        if a.requires_grad:
            dot = (g * out).sum(axis=-1, keepdims=True)
            a.accumulate_grad(out * (g - dot))

    return _make(out, (a,), bwd, "softmax")


def log_softmax(a: Tensor) -> Tensor:
    """Log-softmax along the last axis."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse

    def bwd(g):
        if a.requires_grad:
            soft = np.exp(out)
            a.accumulate_grad(g - soft * g.sum(axis=-1, keepdims=True))

    return _make(out, (a,), bwd, "log_softmax")


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = a.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError("layer_norm", a.shape, gain.shape, bias.shape)
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = gain.data * xhat + bias.data

    def bwd(g):
        if gain.requires_grad:
            gain.accumulate_grad((g * xhat).reshape(-1, d).sum(axis=0))
        if bias.requires_grad:
            bias.accumulate_grad(g.reshape(-1, d).sum(axis=0))
        if a.requires_grad:
            gx = g * gain.data
            # d/dx of (x - mu) * inv with mu, inv functions of x
            term = gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True)
            a.accumulate_grad(term * inv)

    return _make(out, (a, gain, bias), bwd, "layer_norm")


def mean(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    out = a.data.mean(axis=axis, keepdims=keepdims)

    def bwd(g):
        if a.requires_grad:
            if axis is None:
                a.accumulate_grad(np.full(a.shape, float(g) / a.size))
            else:
                n = a.shape[axis]
                gg = g if keepdims else np.expand_dims(g, axis)
                a.accumulate_grad(np.broadcast_to(gg / n, a.shape).copy())

    return _make(out, (a,), bwd, "mean")


def sum(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if a.requires_grad:
            if axis is None:
                a.accumulate_grad(np.full(a.shape, float(g)))
            else:
                gg = g if keepdims else np.expand_dims(g, axis)
                a.accumulate_grad(np.broadcast_to(gg, a.shape).copy())

    return _make(out, (a,), bwd, "sum")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]

    def bwd(g):
        offset = 0
        for t, n in zip(tensors, sizes):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(offset, offset + n)
                t.accumulate_grad(g[tuple(idx)])
            offset += n

    return _make(out, tuple(tensors), bwd, "concat")


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along one axis."""
    if start < 0 or start + length > a.shape[axis]:
        raise ShapeError("narrow", a.shape, (axis, start, length))
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def bwd(g):
        if a.requires_grad:
            buf = np.zeros(a.shape)
            buf[idx] = g
            a.accumulate_grad(buf)

    return _make(a.data[idx].copy(), (a,), bwd, "narrow")


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup: ids of any integer shape -> ids.shape + (d,)."""
    ids = np.asarray(ids, dtype=np.int64)
    if table.data.ndim != 2:
        raise ShapeError("embedding", table.shape)
    out = table.data[ids]

    def bwd(g):
        if table.requires_grad:
            buf = np.zeros(table.shape)
            np.add.at(buf, ids.reshape(-1), g.reshape(-1, table.shape[1]))
            table.accumulate_grad(buf)

    return _make(out, (table,), bwd, "embedding")


def gather_last(a: Tensor, ids) -> Tensor:
    """Pick one entry along the last axis per leading position."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.shape != a.shape[:-1]:
        raise ShapeError("gather_last", a.shape, ids.shape)
    out = np.take_along_axis(a.data, ids[..., None], axis=-1)[..., 0]

    def bwd(g):
        if a.requires_grad:
            buf = np.zeros(a.shape)
            np.put_along_axis(buf, ids[..., None], g[..., None], axis=-1)
            a.accumulate_grad(buf)

    return _make(out, (a,), bwd, "gather_last")


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = a.data.reshape(shape)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g.reshape(a.shape))

    return _make(out, (a,), bwd, "reshape")


def transpose_last2(a: Tensor) -> Tensor:
    if a.data.ndim < 2:
        raise ShapeError("transpose_last2", a.shape)
    out = np.swapaxes(a.data, -1, -2)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(np.swapaxes(g, -1, -2))

    return _make(out.copy(), (a,), bwd, "transpose_last2")


def stop_grad(a: Tensor) -> Tensor:
    """Detach: value flows forward, no gradient flows back."""
    return Tensor(a.data.copy(), requires_grad=False)


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


def check_gradient(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    loss_fn must be a deterministic scalar function of params. Relative
    error per coordinate is |a - n| / max(1e-8, |a| + |n|).
    """
    if h <= 0:
        raise ValueError("check_gradient: h must be positive")
    for p in params:
        p.zero_grad()
    with Graph() as g:
        loss = loss_fn()
        if loss.size != 1:
            raise ShapeError("check_gradient", loss.shape)
        if not np.isfinite(loss.data).all():
            raise ValueError("check_gradient: non-finite loss")
        backward(loss, g)
    analytic = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    with no_grad():
        for p, ag in zip(params, analytic):
            it = np.nditer(p.data, flags=["multi_index"])
            while not it.finished:
                idx = it.multi_index
                orig = p.data[idx]
                p.data[idx] = orig + h
                up = loss_fn().item()
                p.data[idx] = orig - h
                down = loss_fn().item()
                p.data[idx] = orig
                if not (math.isfinite(up) and math.isfinite(down)):
                    raise ValueError("check_gradient: non-finite loss during probing")
                num = (up - down) / (2.0 * h)
                err = abs(ag[idx] - num) / max(1e-8, abs(ag[idx]) + abs(num))
                worst = builtins.max(worst, err)
                it.iternext()
    for p in params:
        p.zero_grad()
    return worst


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


class Adam:
    """Standard Adam with bias correction; zeroes grads after each step."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros(p.shape) for p in self.params]
        self.v = [np.zeros(p.shape) for p in self.params]

    def step(self) -> None:
        for p in self.params:
            if p.grad is None:
                raise ValueError("Adam.step: parameter has no gradient")
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for i, p in enumerate(self.params):
            g = p.grad
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * (g * g)
            mhat = self.m[i] / bc1
            vhat = self.v[i] / bc2
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)
            p.grad = None

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
