"""Dense float64 tensors with reverse-mode automatic differentiation.

The array payload is numpy; differentiation is a hand-rolled tape. Every
operation that participates in a gradient records its parents and a backward
closure on the output tensor. ``backward`` walks a topologically ordered
trace exactly once, so gradient accumulation order is deterministic and two
identical forwards produce bit-identical gradients.
"""
from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "GradError",
    "no_grad",
    "backward",
    "concat",
    "cross_entropy",
    "embedding_lookup",
    "grad_check",
    "layer_norm",
    "relu",
    "softmax",
]


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class GradError(RuntimeError):
    """Autodiff misuse: backward on a non-scalar, grad of a detached value."""


_grad_enabled = True


class no_grad:
    """Context manager that disables graph recording (values only)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, exc_type, exc, tb):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    """A float64 array plus the bookkeeping needed for reverse-mode autodiff."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def T(self) -> "Tensor":
        if self.data.ndim != 2:
            raise ShapeError(f"transpose expects a 2D tensor, got shape {self.shape}")
        def bw(g, a=self):
            _accum(a, g.T)
        return _result(self.data.T, (self,), bw)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        other = _astensor(other)
        data = self.data + other.data
        def bw(g, a=self, b=other):
            _accum(a, _unbroadcast(g, a.data.shape))
            _accum(b, _unbroadcast(g, b.data.shape))
        return _result(data, (self, other), bw)

    __radd__ = __add__

    def __neg__(self):
        def bw(g, a=self):
            _accum(a, -g)
        return _result(-self.data, (self,), bw)

    def __sub__(self, other):
        return self + (-_astensor(other))

    def __rsub__(self, other):
        return _astensor(other) + (-self)

    def __mul__(self, other):
        other = _astensor(other)
        data = self.data * other.data
        def bw(g, a=self, b=other):
            _accum(a, _unbroadcast(g * b.data, a.data.shape))
            _accum(b, _unbroadcast(g * a.data, b.data.shape))
        return _result(data, (self, other), bw)

    __rmul__ = __mul__

    def matmul(self, other: "Tensor") -> "Tensor":
        if self.data.ndim != 2 or other.data.ndim != 2:
            raise ShapeError(
                f"matmul needs 2D operands, got {self.shape} @ {other.shape}"
            )
        if self.data.shape[1] != other.data.shape[0]:
            raise ShapeError(
                f"matmul inner dims disagree: {self.shape} @ {other.shape}"
            )
        data = self.data @ other.data
        def bw(g, a=self, b=other):
            if a.requires_grad:
                _accum(a, g @ b.data.T)
            if b.requires_grad:
                _accum(b, a.data.T @ g)
        return _result(data, (self, other), bw)

    __matmul__ = matmul

    def sum(self, axis: int | None = None, keepdims: bool = False) -> "Tensor":
        data = self.data.sum(axis=axis, keepdims=keepdims)
        def bw(g, a=self, axis=axis, keepdims=keepdims):
            if axis is None:
                ga = np.broadcast_to(g, a.data.shape)
            else:
                gg = g if keepdims else np.expand_dims(g, axis)
                ga = np.broadcast_to(gg, a.data.shape)
            _accum(a, ga)
        return _result(data, (self,), bw)

    def cols(self, start: int, stop: int) -> "Tensor":
        """Column slice of a 2D tensor, kept on the tape."""
        if self.data.ndim != 2:
            raise ShapeError(f"cols expects a 2D tensor, got shape {self.shape}")
        data = self.data[:, start:stop]
        def bw(g, a=self, start=start, stop=stop):
            ga = np.zeros_like(a.data)
            ga[:, start:stop] = g
            _accum(a, ga)
        return _result(data, (self,), bw)

    def relu(self) -> "Tensor":
        # Subgradient at 0 is 0 (strict > in the mask).
        data = np.maximum(self.data, 0.0)
        def bw(g, a=self, mask=self.data > 0):
            _accum(a, g * mask)
        return _result(data, (self,), bw)

    def softmax(self, axis: int = -1) -> "Tensor":
        return softmax(self, axis=axis)

    def backward(self) -> None:
        backward(self)


# -- graph plumbing ---------------------------------------------------------


def _astensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: tuple, backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.requires_grad:
        t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient back down to the shape of the broadcast operand."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, size in enumerate(shape):
        if size == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


class Tape:
    """Topologically ordered record of the ops reachable from a root tensor.

    ``nodes`` lists every reachable tensor with parents before children; the
    backward pass visits each exactly once, in reverse.
    """

    __slots__ = ("nodes",)

    def __init__(self, nodes: list):
        self.nodes = nodes

    @classmethod
    def trace(cls, root: Tensor) -> "Tape":
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
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)

    def backward_from(self, root: Tensor) -> None:
        root.grad = np.ones_like(root.data)
        for node in reversed(self.nodes):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def backward(loss: Tensor) -> None:
    """Populate .grad on every requires_grad tensor reachable from ``loss``."""
    if loss.data.size != 1:
        raise GradError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GradError("backward on a tensor that does not require grad")
    Tape.trace(loss).backward_from(loss)


# -- free-function ops ------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    return x.relu()


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Row-stochastic softmax with max subtraction for stability."""
    m = np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    s = np.sum(e, axis=axis, keepdims=True)
    p = e / s
    def bw(g, a=x, p=p, axis=axis):
        dot = np.sum(g * p, axis=axis, keepdims=True)
        _accum(a, p * (g - dot))
    return _result(p, (x,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    ts = tuple(tensors)
    if not ts:
        raise ShapeError("concat of an empty sequence")
    data = np.concatenate([t.data for t in ts], axis=axis)
    sizes = tuple(t.data.shape[axis] for t in ts)
    def bw(g, ts=ts, sizes=sizes, axis=axis):
        off = 0
        index: list = [slice(None)] * g.ndim
        for t, size in zip(ts, sizes):
            index[axis] = slice(off, off + size)
            _accum(t, g[tuple(index)])
            off += size
    return _result(data, ts, bw)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Gather rows of ``table``; gradients scatter-add back into the rows."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise ShapeError(f"embedding ids must be 1D, got shape {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise IndexError(
            f"embedding id out of range [0, {table.data.shape[0]}): "
            f"min={ids.min()} max={ids.max()}"
        )
    data = table.data[ids]
    def bw(g, table=table, ids=ids):
        ga = np.zeros_like(table.data)
        np.add.at(ga, ids, g)
        _accum(table, ga)
    return _result(data, (table,), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    mu = np.mean(x.data, axis=-1, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = gamma.data * xhat + beta.data
    def bw(g, x=x, gamma=gamma, beta=beta, xhat=xhat, inv=inv):
        lead = tuple(range(g.ndim - 1))
        if gamma.requires_grad:
            _accum(gamma, np.sum(g * xhat, axis=lead))
        if beta.requires_grad:
            _accum(beta, np.sum(g, axis=lead))
        gx = g * gamma.data
        mean_gx = np.mean(gx, axis=-1, keepdims=True)
        mean_gx_xhat = np.mean(gx * xhat, axis=-1, keepdims=True)
        _accum(x, inv * (gx - mean_gx - xhat * mean_gx_xhat))
    return _result(data, (x, gamma, beta), bw)


def cross_entropy(
    logits: Tensor,
    targets,
    label_smoothing: float = 0.0,
    reduction: str = "mean",
) -> Tensor:
    """Cross entropy of integer targets under softmax(logits).

    With label smoothing eps the target distribution is
    (1-eps) * onehot + eps/V, spread over the whole vocabulary; eps=0 reduces
    to the plain formula bitwise. ``reduction`` is "mean" (over tokens) or
    "sum".
    """
    targets = np.asarray(targets, dtype=np.int64)
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy expects 2D logits, got {logits.shape}")
    if targets.ndim != 1 or targets.shape[0] != logits.data.shape[0]:
        raise ShapeError(
            f"targets shape {targets.shape} does not match logits {logits.shape}"
        )
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")
    if not 0.0 <= label_smoothing < 1.0:
        raise ValueError(f"label_smoothing must be in [0, 1), got {label_smoothing}")
    n, vocab = logits.data.shape
    if targets.size and (targets.min() < 0 or targets.max() >= vocab):
        raise IndexError(
            f"target id out of range [0, {vocab}): min={targets.min()} "
            f"max={targets.max()}"
        )
    rows = np.arange(n)
    m = np.max(logits.data, axis=1, keepdims=True)
    e = np.exp(logits.data - m)
    z = np.sum(e, axis=1)
    p = e / z[:, None]
    lse = m[:, 0] + np.log(z)
    picked = logits.data[rows, targets]
    eps = label_smoothing
    per_token = lse - (1.0 - eps) * picked - (eps / vocab) * logits.data.sum(axis=1)
    value = per_token.mean() if reduction == "mean" else per_token.sum()
    def bw(g, logits=logits, p=p, targets=targets, eps=eps, n=n, vocab=vocab,
           reduction=reduction, rows=rows):
        q = np.full((n, vocab), eps / vocab)
        q[rows, targets] += 1.0 - eps
        scale = g / n if reduction == "mean" else g
        _accum(logits, (p - q) * scale)
    return _result(np.asarray(value), (logits,), bw)


# -- finite-difference oracle ----------------------------------------------


def grad_check(
    f,
    x: Tensor | Sequence[Tensor] | None = None,
    *,
    wrt: Iterable[Tensor] | None = None,
    eps: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` is called as f(*tensors) when ``x`` is given, or as f() with the
    differentiation targets listed in ``wrt``. The relative error per
    coordinate is |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
    ``max_coords`` caps the checked coordinates per tensor (seeded sample);
    by default every coordinate is checked. ``f`` must be deterministic.
    """
    if x is not None:
        tensors = [x] if isinstance(x, Tensor) else list(x)
        call = lambda: f(*tensors)
    elif wrt is not None:
        tensors = list(wrt)
        call = f
    else:
        raise ValueError("grad_check needs x or wrt")
    for t in tensors:
        t.grad = None
    loss = call()
    if loss.data.size != 1:
        raise GradError("grad_check needs a scalar-valued f")
    backward(loss)
    analytic = [
        np.zeros_like(t.data) if t.grad is None else np.asarray(t.grad, dtype=np.float64)
        for t in tensors
    ]
    rng = np.random.default_rng(seed)
    worst = 0.0
    with no_grad():
        for t, ana in zip(tensors, analytic):
            size = t.data.size
            if max_coords is None or size <= max_coords:
                flat_idx = range(size)
            else:
                chosen = rng.choice(size, size=max_coords, replace=False)
                chosen.sort()
                flat_idx = chosen.tolist()
            ana_flat = ana.reshape(-1)
            for i in flat_idx:
                index = np.unravel_index(i, t.data.shape)
                orig = t.data[index]
                t.data[index] = orig + eps
                plus = float(call().data.reshape(()))
                t.data[index] = orig - eps
                minus = float(call().data.reshape(()))
                t.data[index] = orig
                numeric = (plus - minus) / (2.0 * eps)
                rel = abs(ana_flat[i] - numeric) / max(
                    abs(ana_flat[i]), abs(numeric), 1e-8
                )
                if rel > worst:
                    worst = rel
    return worst
