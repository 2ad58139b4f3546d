"""Tape-based reverse-mode autodiff over dense 2-D float64 tensors.

A :class:`Graph` is built fresh for every forward pass.  Each op appends a
node (op name, inputs, output, backward closure) and :meth:`Graph.backward`
walks the nodes in reverse insertion order.  Leaf tensors (parameters and
inputs that were not produced by the graph) accumulate into ``.grad``;
intermediate tensors get their gradient overwritten on each pass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ShapeError(ValueError):
    pass


class EmptyLossError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise ShapeError(f"tensors are 2-D, got shape {arr.shape}")
        self.data = np.ascontiguousarray(arr)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def item(self) -> float:
        if self.data.shape != (1, 1):
            raise ShapeError(f"item() needs a 1x1 tensor, got {self.data.shape}")
        return float(self.data[0, 0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}({self.rows}x{self.cols}, requires_grad={self.requires_grad})"


def _wrap(data: np.ndarray, requires_grad: bool) -> Tensor:
    t = Tensor.__new__(Tensor)
    t.data = data
    t.grad = None
    t.requires_grad = requires_grad
    t.name = None
    return t


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Graph:
    """Append-only record of the ops of one forward pass."""

    def __init__(self, grad_enabled: bool = True) -> None:
        self.nodes: list[Node] = []
        self.grad_enabled = grad_enabled
        self._produced: set[int] = set()

    def _record(self, op, inputs, out_data, backward) -> Tensor:
        needs = self.grad_enabled and any(t.requires_grad for t in inputs)
        out = _wrap(out_data, needs)
        if needs:
            self.nodes.append(Node(op, tuple(inputs), out, backward))
            self._produced.add(id(out))
        return out

    # ------------------------------------------------------------------ ops

    def matmul(self, a: Tensor, b: Tensor) -> Tensor:
        if a.cols != b.rows:
            raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
        A, B = a.data, b.data

        def backward(g):
            return (g @ B.T if a.requires_grad else None,
                    A.T @ g if b.requires_grad else None)

        return self._record("matmul", (a, b), A @ B, backward)

    def add_bias(self, x: Tensor, b: Tensor) -> Tensor:
        if b.rows != 1 or b.cols != x.cols:
            raise ShapeError(f"bias shape {b.shape} does not broadcast over {x.shape}")

        def backward(g):
            return g, g.sum(axis=0, keepdims=True)

        return self._record("add_bias", (x, b), x.data + b.data, backward)

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        if a.shape != b.shape:
            raise ShapeError(f"add shapes differ: {a.shape} vs {b.shape}")
        return self._record("add", (a, b), a.data + b.data, lambda g: (g, g))

    def mul(self, a: Tensor, b: Tensor) -> Tensor:
        if a.shape != b.shape:
            raise ShapeError(f"mul shapes differ: {a.shape} vs {b.shape}")
        A, B = a.data, b.data
        return self._record("mul", (a, b), A * B, lambda g: (g * B, g * A))

    def scale(self, x: Tensor, c: float) -> Tensor:
        return self._record("scale", (x,), x.data * c, lambda g: (g * c,))

    def sum(self, x: Tensor) -> Tensor:
        shape = x.shape
        return self._record("sum", (x,), np.array([[x.data.sum()]]),
                            lambda g: (np.full(shape, g[0, 0]),))

    def gelu(self, x: Tensor) -> Tensor:
        X = x.data
        cdf = 0.5 * (1.0 + erf(X / _SQRT2))

        def backward(g):
            pdf = _INV_SQRT_2PI * np.exp(-0.5 * X * X)
            return (g * (cdf + X * pdf),)

        return self._record("gelu", (x,), X * cdf, backward)

    def layer_norm(self, x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
        n = x.cols
        if n < 2:
            raise ShapeError(f"layer_norm needs at least 2 columns, got {x.shape}")
        if gamma.shape != (1, n) or beta.shape != (1, n):
            raise ShapeError(f"gamma {gamma.shape} / beta {beta.shape} must be (1, {n})")
        X = x.data
        mu = X.mean(axis=1, keepdims=True)
        xc = X - mu
        var = (xc * xc).mean(axis=1, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        G = gamma.data

        def backward(g):
            dxhat = g * G
            dx = inv * (dxhat - dxhat.mean(axis=1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=1, keepdims=True))
            return (dx,
                    (g * xhat).sum(axis=0, keepdims=True),
                    g.sum(axis=0, keepdims=True))

        return self._record("layer_norm", (x, gamma, beta), xhat * G + beta.data, backward)

    def softmax_rows(self, x: Tensor) -> Tensor:
        e = np.exp(x.data - x.data.max(axis=1, keepdims=True))
        p = e / e.sum(axis=1, keepdims=True)

        def backward(g):
            return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

        return self._record("softmax_rows", (x,), p, backward)

    def cross_entropy_logits(self, logits: Tensor, targets, mask=None) -> Tensor:
        """Mean of -log softmax(logits)[target] over the rows where ``mask`` is set."""
        targets = np.asarray(targets, dtype=np.int64)
        m, c = logits.shape
        if targets.shape != (m,):
            raise ShapeError(f"expected {m} targets, got shape {targets.shape}")
        mask = np.ones(m, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
        count = int(mask.sum())
        if count == 0:
            raise EmptyLossError("cross-entropy over zero unmasked rows")
        live = targets[mask]
        if live.min() < 0 or live.max() >= c:
            raise IndexError(f"target out of range [0, {c}): {live.min()}..{live.max()}")
        rows = np.flatnonzero(mask)
        z = logits.data[rows]
        z = z - z.max(axis=1, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=1))
        nll = lse - z[np.arange(count), live]
        loss = nll.sum() / count

        def backward(g):
            p = np.exp(z - lse[:, None])
            p[np.arange(count), live] -= 1.0
            d = np.zeros((m, c))
            d[rows] = p * (g[0, 0] / count)
            return (d,)

        return self._record("cross_entropy", (logits,), np.array([[loss]]), backward)

    def embedding_gather(self, table: Tensor, ids) -> Tensor:
        ids = np.asarray(ids, dtype=np.int64).reshape(-1)
        v = table.rows
        if ids.size and (ids.min() < 0 or ids.max() >= v):
            raise IndexError(f"ids out of range [0, {v}): {ids.min()}..{ids.max()}")
        shape = table.shape

        def backward(g):
            d = np.zeros(shape)
            np.add.at(d, ids, g)
            return (d,)

        return self._record("gather", (table,), table.data[ids], backward)

    take_rows = embedding_gather

    def grad_reverse(self, x: Tensor) -> Tensor:
        """Identity forward, negated gradient backward."""
        return self._record("grad_reverse", (x,), x.data.copy(), lambda g: (-g,))

    def dropout(self, x: Tensor, p: float, rng: np.random.Generator | None, train: bool) -> Tensor:
        if not train or p == 0.0:
            return x
        keep = (rng.random(x.shape) >= p) / (1.0 - p)
        return self._record("dropout", (x,), x.data * keep, lambda g: (g * keep,))

    def attention(self, q: Tensor, k: Tensor, v: Tensor, key_mask, n_heads: int) -> Tensor:
        """Multi-head scaled dot-product attention over a padded batch.

        ``q``, ``k``, ``v`` are (batch*seq) x d_model with rows grouped by
        example; ``key_mask`` is a boolean batch x seq array, True for real
        tokens.  Padded keys get exactly zero weight.
        """
        key_mask = np.asarray(key_mask, dtype=bool)
        B, T = key_mask.shape
        d = q.cols
        if q.rows != B * T or k.shape != q.shape or v.shape != q.shape:
            raise ShapeError(f"attention inputs {q.shape}, {k.shape}, {v.shape} vs batch {B}x{T}")
        if d % n_heads:
            raise ShapeError(f"d_model {d} not divisible by {n_heads} heads")
        dh = d // n_heads
        scale = 1.0 / math.sqrt(dh)

        def split(a):
            return a.reshape(B, T, n_heads, dh).transpose(0, 2, 1, 3)

        Q, K, V = split(q.data), split(k.data), split(v.data)
        s = (Q @ K.transpose(0, 1, 3, 2)) * scale
        s = np.where(key_mask[:, None, None, :], s, -np.inf)
        e = np.exp(s - s.max(axis=-1, keepdims=True))
        P = e / e.sum(axis=-1, keepdims=True)
        out = (P @ V).transpose(0, 2, 1, 3).reshape(B * T, d)

        def backward(g):
            G = split(g)
            dV = P.transpose(0, 1, 3, 2) @ G
            dP = G @ V.transpose(0, 1, 3, 2)
            dS = P * (dP - (dP * P).sum(axis=-1, keepdims=True)) * scale
            dQ = dS @ K
            dK = dS.transpose(0, 1, 3, 2) @ Q

            def merge(a):
                return a.transpose(0, 2, 1, 3).reshape(B * T, d)

            return merge(dQ), merge(dK), merge(dV)

        return self._record("attention", (q, k, v), out, backward)

    # ------------------------------------------------------------- backward

    def backward(self, loss: Tensor) -> None:
        if loss.shape != (1, 1):
            raise ShapeError(f"backward needs a scalar (1x1) loss, got {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones((1, 1))}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            node.output.grad = g
            for t, dt in zip(node.inputs, node.backward(g)):
                if dt is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + dt
                else:
                    grads[key] = dt
                if key not in self._produced:
                    leaves[key] = t
        for key, t in leaves.items():
            g = grads[key]
            t.grad = g.copy() if t.grad is None else t.grad + g


@dataclass
class GradCheckReport:
    max_rel_error: float
    analytic: np.ndarray
    numeric: np.ndarray
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


def grad_check(f: Callable[[Graph, Tensor], Tensor], x: Tensor, h: float = 1e-5,
               tol: float = 1e-4) -> GradCheckReport:
    """Compare backward() against central finite differences at ``x``.

    ``f`` builds its computation on the graph it is given and returns a 1x1
    tensor.  Relative error per coordinate is |a - n| / max(1, |a|, |n|).
    """
    if h <= 0 or tol <= 0:
        raise ValueError("h and tol must be positive")
    x.requires_grad = True
    x.grad = None
    g = Graph()
    out = f(g, x)
    if out.shape != (1, 1):
        raise ShapeError(f"grad_check needs a scalar function, got output {out.shape}")
    g.backward(out)
    analytic = np.zeros(x.shape) if x.grad is None else x.grad.copy()

    numeric = np.zeros(x.shape)
    flat = x.data.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f(Graph(), x).item()
        flat[i] = old - h
        down = f(Graph(), x).item()
        flat[i] = old
        nflat[i] = (up - down) / (2 * h)
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    err = float((np.abs(analytic - numeric) / denom).max()) if analytic.size else 0.0
    return GradCheckReport(err, analytic, numeric, tol)
