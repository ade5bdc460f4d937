"""Minimal reverse-mode differentiation over dense float64 arrays.

Each traced operation returns a Tensor holding the result, its parents, and
a closure that routes the output gradient to the parents. The implicit tape
is the closure graph itself: ``backward`` walks it once in reverse
topological order, accumulating gradients additively. Only the ops the
planner needs exist: matmul, add/bias, elementwise mul, gelu, softmax (with
an optional additive mask), log-softmax, layer norm, attention, row
gather/concat, reductions, and a stable log-sigmoid.

Gradients are tracked only while ``grad_enabled()`` holds and at least one
input requires a gradient; inference runs graph-free through the same code.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

from .errors import DomainError

# Additive mask value for blocked attention positions: large enough that the
# masked weight underflows to zero, finite so no inf - inf NaN appears.
NEG_INF = -1e30

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_prev", "_backward")

    def __init__(self, data, requires_grad: bool = False, _prev: tuple = ()):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._prev = _prev
        self._backward: Callable[[], None] = lambda: None

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad += g

    def backward(self) -> None:
        if self.data.size != 1:
            raise DomainError("backward requires a scalar loss")
        # Iterative postorder; planner graphs overflow Python's recursion.
        topo: list[Tensor] = []
        visited = {id(self)}
        iters = {id(self): iter(self._prev)}
        stack = [self]
        while stack:
            node = stack[-1]
            advanced = False
            for child in iters[id(node)]:
                if id(child) not in visited:
                    visited.add(id(child))
                    iters[id(child)] = iter(child._prev)
                    stack.append(child)
                    advanced = True
                    break
            if not advanced:
                topo.append(stack.pop())
        self._accum(np.ones_like(self.data))
        for node in reversed(topo):
            node._backward()

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, neg(other))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _track(*inputs: Tensor) -> bool:
    return _GRAD_ENABLED and any(t.requires_grad for t in inputs)


def _make(data: np.ndarray, *inputs: Tensor) -> Tensor:
    if not _track(*inputs):
        return Tensor(data)
    return Tensor(data, requires_grad=True, _prev=tuple(inputs))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.data.shape[-1] != b.data.shape[0]:
        raise DomainError(f"matmul shape mismatch: {a.data.shape} @ {b.data.shape}")
    out = _make(a.data @ b.data, a, b)
    if out.requires_grad:

        def _bw():
            if a.requires_grad:
                a._accum(out.grad @ b.data.T)
            if b.requires_grad:
                b._accum(a.data.T @ out.grad)

        out._backward = _bw
    return out


def transpose(a: Tensor) -> Tensor:
    a = _wrap(a)
    out = _make(a.data.T, a)
    if out.requires_grad:
        out._backward = lambda: a._accum(out.grad.T)
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.data.shape != b.data.shape:
        raise DomainError(f"add shape mismatch: {a.data.shape} vs {b.data.shape}")
    out = _make(a.data + b.data, a, b)
    if out.requires_grad:

        def _bw():
            if a.requires_grad:
                a._accum(out.grad)
            if b.requires_grad:
                b._accum(out.grad)

        out._backward = _bw
    return out


def add_bias(a: Tensor, bias: Tensor) -> Tensor:
    """Matrix [n, d] plus row vector [d] — the only broadcast supported."""
    a, bias = _wrap(a), _wrap(bias)
    if bias.data.shape != (a.data.shape[-1],):
        raise DomainError(f"bias shape {bias.data.shape} does not match {a.data.shape}")
    out = _make(a.data + bias.data, a, bias)
    if out.requires_grad:

        def _bw():
            if a.requires_grad:
                a._accum(out.grad)
            if bias.requires_grad:
                bias._accum(out.grad.sum(axis=0) if out.grad.ndim > 1 else out.grad)

        out._backward = _bw
    return out


def neg(a: Tensor) -> Tensor:
    a = _wrap(a)
    out = _make(-a.data, a)
    if out.requires_grad:
        out._backward = lambda: a._accum(-out.grad)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.data.shape != b.data.shape:
        raise DomainError(f"mul shape mismatch: {a.data.shape} vs {b.data.shape}")
    out = _make(a.data * b.data, a, b)
    if out.requires_grad:

        def _bw():
            if a.requires_grad:
                a._accum(out.grad * b.data)
            if b.requires_grad:
                b._accum(out.grad * a.data)

        out._backward = _bw
    return out


def scale(a: Tensor, s: float) -> Tensor:
    a = _wrap(a)
    out = _make(a.data * s, a)
    if out.requires_grad:
        out._backward = lambda: a._accum(out.grad * s)
    return out


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a: Tensor) -> Tensor:
    a = _wrap(a)
    phi = 0.5 * (1.0 + erf(a.data * _INV_SQRT2))
    out = _make(a.data * phi, a)
    if out.requires_grad:

        def _bw():
            pdf = np.exp(-0.5 * a.data * a.data) * _INV_SQRT_2PI
            a._accum(out.grad * (phi + a.data * pdf))

        out._backward = _bw
    return out


def softmax(a: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Row softmax over the last axis; ``mask`` is a constant additive term
    (use NEG_INF entries to block positions)."""
    a = _wrap(a)
    z = a.data if mask is None else a.data + mask
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)
    out = _make(p, a)
    if out.requires_grad:

        def _bw():
            g = out.grad
            a._accum(p * (g - (g * p).sum(axis=-1, keepdims=True)))

        out._backward = _bw
    return out


def log_softmax(a: Tensor) -> Tensor:
    a = _wrap(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = _make(z - lse, a)
    if out.requires_grad:
        p = np.exp(out.data)

        def _bw():
            g = out.grad
            a._accum(g - p * g.sum(axis=-1, keepdims=True))

        out._backward = _bw
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean, unit variance, then affine."""
    x, gain, bias = _wrap(x), _wrap(gain), _wrap(bias)
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise DomainError("layer_norm gain/bias must match the feature width")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    sigma = np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc / sigma
    out = _make(xhat * gain.data + bias.data, x, gain, bias)
    if out.requires_grad:

        def _bw():
            g = out.grad
            if x.requires_grad:
                dxhat = g * gain.data
                term = dxhat - dxhat.mean(axis=-1, keepdims=True) \
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
                x._accum(term / sigma)
            if gain.requires_grad:
                gg = g * xhat
                gain._accum(gg.sum(axis=0) if gg.ndim > 1 else gg)
            if bias.requires_grad:
                bias._accum(g.sum(axis=0) if g.ndim > 1 else g)

        out._backward = _bw
    return out


def attention(
    query: Tensor, keys: Tensor, values: Tensor, mask: np.ndarray | None = None
) -> tuple[Tensor, Tensor]:
    """Scaled dot-product attention; returns (output, weights)."""
    query, keys, values = _wrap(query), _wrap(keys), _wrap(values)
    d = query.data.shape[-1]
    if keys.data.shape[-1] != d:
        raise DomainError(
            f"attention inner-dim mismatch: query {query.data.shape}, keys {keys.data.shape}"
        )
    if values.data.shape[0] != keys.data.shape[0]:
        raise DomainError("attention keys/values row counts differ")
    scores = scale(matmul(query, transpose(keys)), 1.0 / math.sqrt(d))
    weights = softmax(scores, mask=mask)
    return matmul(weights, values), weights


def pick(a: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Gather a.data[rows, cols] into a vector."""
    a = _wrap(a)
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    out = _make(a.data[rows, cols], a)
    if out.requires_grad:

        def _bw():
            g = np.zeros_like(a.data)
            np.add.at(g, (rows, cols), out.grad)
            a._accum(g)

        out._backward = _bw
    return out


def take_rows(a: Tensor, idx) -> Tensor:
    a = _wrap(a)
    idx = np.asarray(idx, dtype=np.intp)
    out = _make(a.data[idx], a)
    if out.requires_grad:

        def _bw():
            g = np.zeros_like(a.data)
            np.add.at(g, idx, out.grad)
            a._accum(g)

        out._backward = _bw
    return out


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    parts = [_wrap(p) for p in parts]
    out_data = np.concatenate([p.data for p in parts], axis=0)
    out = _make(out_data, *parts)
    if out.requires_grad:
        sizes = [p.data.shape[0] for p in parts]

        def _bw():
            offset = 0
            for p, n in zip(parts, sizes):
                if p.requires_grad:
                    p._accum(out.grad[offset:offset + n])
                offset += n

        out._backward = _bw
    return out


def stack_scalars(parts: Sequence[Tensor]) -> Tensor:
    parts = [_wrap(p) for p in parts]
    for p in parts:
        if p.data.size != 1:
            raise DomainError("stack_scalars expects scalar tensors")
    out = _make(np.array([float(p.data) for p in parts]), *parts)
    if out.requires_grad:

        def _bw():
            for i, p in enumerate(parts):
                if p.requires_grad:
                    p._accum(np.reshape(out.grad[i], p.data.shape))

        out._backward = _bw
    return out


def tsum(a: Tensor) -> Tensor:
    a = _wrap(a)
    out = _make(np.asarray(a.data.sum()), a)
    if out.requires_grad:
        out._backward = lambda: a._accum(np.broadcast_to(out.grad, a.data.shape))
    return out


def tmean(a: Tensor) -> Tensor:
    a = _wrap(a)
    n = a.data.size
    out = _make(np.asarray(a.data.mean()), a)
    if out.requires_grad:
        out._backward = lambda: a._accum(np.broadcast_to(out.grad / n, a.data.shape))
    return out


def log_sigmoid(a: Tensor) -> Tensor:
    """Stable two-branch log(sigmoid(x)); finite over [-700, 700]."""
    a = _wrap(a)
    x = a.data
    out_data = np.where(x >= 0.0, -np.log1p(np.exp(-np.abs(x))), x - np.log1p(np.exp(-np.abs(x))))
    out = _make(out_data, a)
    if out.requires_grad:

        def _bw():
            # d/dx log sigmoid(x) = sigmoid(-x), computed branch-stably.
            e = np.exp(-np.abs(x))
            sig_neg = np.where(x >= 0.0, e / (1.0 + e), 1.0 / (1.0 + e))
            a._accum(out.grad * sig_neg)

        out._backward = _bw
    return out


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under row softmax."""
    targets = np.asarray(targets, dtype=np.intp)
    if logits.data.ndim != 2 or targets.shape != (logits.data.shape[0],):
        raise DomainError(
            f"cross_entropy expects [n, vocab] logits and n targets, "
            f"got {logits.data.shape} and {targets.shape}"
        )
    lp = log_softmax(logits)
    picked = pick(lp, np.arange(targets.shape[0]), targets)
    return neg(tmean(picked))


def grad_check(
    make_loss: Callable[[], Tensor],
    params: Iterable[Tensor],
    eps: float = 1e-5,
    max_coords: int = 200,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between reverse-mode and central finite differences.

    ``make_loss`` must rebuild the scalar loss from the live ``params`` on
    every call. Coordinates are subsampled to ``max_coords`` across all
    parameters.
    """
    params = list(params)
    if rng is None:
        rng = np.random.default_rng(0)
    for p in params:
        p.grad = None
    loss = make_loss()
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    coords = [(i, j) for i, p in enumerate(params) for j in range(p.data.size)]
    if len(coords) > max_coords:
        sel = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[int(k)] for k in sel]

    worst = 0.0
    with no_grad():
        for i, j in coords:
            flat = params[i].data.reshape(-1)
            saved = flat[j]
            flat[j] = saved + eps
            up = float(make_loss().data)
            flat[j] = saved - eps
            down = float(make_loss().data)
            flat[j] = saved
            fd = (up - down) / (2.0 * eps)
            ad = float(analytic[i].reshape(-1)[j])
            rel = abs(fd - ad) / max(1e-8, abs(fd) + abs(ad))
            worst = max(worst, rel)
    return worst
