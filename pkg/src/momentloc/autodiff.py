"""Reverse-mode automatic differentiation on numpy arrays.

A Tensor wraps an ndarray plus an optional backward closure; an operation's
output keeps references to its inputs, so the graph built during one forward
pass *is* the tape and is released with the output. There is no cross-pass
state. Every forward kernel checks its result for NaN/Inf and raises
NumericError instead of propagating garbage.

Tensor payload allocations can be metered (see AllocationMeter) which is how
the memory-accounting harness observes peak activation footprints.
"""

from __future__ import annotations

import math
import threading
import weakref
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf


class NumericError(ArithmeticError):
    """A forward kernel produced a NaN or Inf."""


class _ThreadState(threading.local):
    def __init__(self):
        self.grad_enabled = True
        self.meter: AllocationMeter | None = None


_STATE = _ThreadState()


class no_grad:
    """Context manager that disables graph recording on the current thread."""

    def __enter__(self):
        self._prev = _STATE.grad_enabled
        _STATE.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _STATE.grad_enabled = self._prev
        return False


class AllocationMeter:
    """High-water mark of live tensor payload bytes on the current thread.

    Only Tensor value buffers created while the meter is active are tracked;
    buffers are released when their Tensor is garbage collected (deterministic
    under CPython refcounting since the graph is acyclic).
    """

    def __init__(self):
        self.live = 0
        self.peak = 0

    def _alloc(self, nbytes: int) -> None:
        self.live += nbytes
        if self.live > self.peak:
            self.peak = self.live

    def _free(self, nbytes: int) -> None:
        self.live -= nbytes

    def __enter__(self) -> "AllocationMeter":
        self._prev = _STATE.meter
        _STATE.meter = self
        return self

    def __exit__(self, *exc):
        _STATE.meter = self._prev
        return False


class Tensor:
    """An ndarray with an optional gradient accumulator and backward rule."""

    __slots__ = ("values", "requires_grad", "grad", "_parents", "_backward", "__weakref__")

    def __init__(self, values, requires_grad: bool = False, _parents=(), _backward=None):
        values = np.asarray(values)
        if values.dtype not in (np.float32, np.float64):
            values = values.astype(np.float64)
        if not np.isfinite(values).all():
            raise NumericError(f"non-finite tensor values (shape {values.shape})")
        self.values = values
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward = _backward
        meter = _STATE.meter
        if meter is not None:
            meter._alloc(values.nbytes)
            weakref.finalize(self, meter._free, values.nbytes)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def dtype(self):
        return self.values.dtype

    def item(self) -> float:
        return float(self.values)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.values.shape}, requires_grad={self.requires_grad})"


def _result(values: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap a kernel result, recording the graph edge when grads are enabled."""
    needs = _STATE.grad_enabled and any(p.requires_grad for p in parents)
    if needs:
        return Tensor(values, requires_grad=True, _parents=tuple(parents), _backward=backward)
    return Tensor(values)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.values.dtype)
    else:
        t.grad += g


def backward(loss: Tensor) -> None:
    """Run reverse-mode accumulation from a scalar loss through its graph."""
    if loss.values.ndim != 0 and loss.values.size != 1:
        raise ValueError(f"backward expects a scalar, got shape {loss.values.shape}")
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
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
    _accumulate(loss, np.ones_like(loss.values))
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add shape mismatch: {a.shape} vs {b.shape}")

    def back(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _result(a.values + b.values, (a, b), back)


def add_const(a: Tensor, c) -> Tensor:
    def back(g):
        _accumulate(a, g)

    return _result(a.values + c, (a,), back)


def scale(a: Tensor, s: float) -> Tensor:
    def back(g):
        _accumulate(a, g * s)

    return _result(a.values * s, (a,), back)


def mul_const(a: Tensor, c) -> Tensor:
    """Elementwise product with a constant array (no gradient through ``c``)."""
    c = np.asarray(c)

    def back(g):
        _accumulate(a, g * c)

    return _result(a.values * c, (a,), back)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def back(g):
        _accumulate(a, g @ b.values.T)
        _accumulate(b, a.values.T @ g)

    return _result(a.values @ b.values, (a, b), back)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map ``x @ w + b`` fused into one node."""
    if x.shape[1] != w.shape[0] or w.shape[1] != b.shape[0]:
        raise ValueError(f"linear shape mismatch: {x.shape} @ {w.shape} + {b.shape}")

    def back(g):
        _accumulate(x, g @ w.values.T)
        _accumulate(w, x.values.T @ g)
        _accumulate(b, g.sum(axis=0))

    return _result(x.values @ w.values + b.values, (x, w, b), back)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise ValueError(f"ids must be 1-D, got shape {ids.shape}")
    if ids.min(initial=0) < 0 or (ids.size and ids.max() >= table.shape[0]):
        raise ValueError(f"token id outside table of {table.shape[0]} rows")

    def back(g):
        if table.requires_grad:
            if table.grad is None:
                table.grad = np.zeros_like(table.values)
            np.add.at(table.grad, ids, g)

    return _result(table.values[ids], (table,), back)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.values - x.values.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        inner = (g * p).sum(axis=axis, keepdims=True)
        _accumulate(x, p * (g - inner))

    return _result(p, (x,), back)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply the learned affine.

    The backward recomputes the normalization from the stored input, so the
    node retains no intermediate buffers beyond its output.
    """
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ValueError("layer_norm affine shape mismatch")
    mean = x.values.mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(x.values.var(axis=-1, keepdims=True) + eps)
    out = (x.values - mean) * rstd
    out *= gamma.values
    out += beta.values

    def back(g):
        mean_ = x.values.mean(axis=-1, keepdims=True)
        rstd_ = 1.0 / np.sqrt(x.values.var(axis=-1, keepdims=True) + eps)
        xhat = (x.values - mean_) * rstd_
        lead = tuple(range(g.ndim - 1))
        _accumulate(gamma, (g * xhat).sum(axis=lead))
        _accumulate(beta, g.sum(axis=lead))
        gx = g * gamma.values
        m1 = gx.mean(axis=-1, keepdims=True)
        m2 = (gx * xhat).mean(axis=-1, keepdims=True)
        _accumulate(x, rstd_ * (gx - m1 - xhat * m2))

    return _result(out, (x, gamma, beta), back)


_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) Gaussian error linear unit; backward recomputes."""
    out = x.values * (0.5 * (1.0 + erf(x.values / _SQRT2)))

    def back(g):
        cdf = 0.5 * (1.0 + erf(x.values / _SQRT2))
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.values * x.values)
        _accumulate(x, g * (cdf + x.values * pdf))

    return _result(out, (x,), back)


def relu(x: Tensor) -> Tensor:
    def back(g):
        _accumulate(x, g * (x.values > 0))

    return _result(np.maximum(x.values, 0.0), (x,), back)


def log(x: Tensor) -> Tensor:
    if (x.values <= 0).any():
        raise NumericError("log of a non-positive value")

    def back(g):
        _accumulate(x, g / x.values)

    return _result(np.log(x.values), (x,), back)


def clamp_min(x: Tensor, lo: float) -> Tensor:
    def back(g):
        _accumulate(x, g * (x.values >= lo))

    return _result(np.maximum(x.values, lo), (x,), back)


def clamp_max(x: Tensor, hi: float) -> Tensor:
    def back(g):
        _accumulate(x, g * (x.values <= hi))

    return _result(np.minimum(x.values, hi), (x,), back)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    widths = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + widths)

    def back(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accumulate(t, g[tuple(sl)])

    return _result(np.concatenate([t.values for t in tensors], axis=axis), tuple(tensors), back)


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    if not (0 <= start <= stop <= x.shape[0]):
        raise ValueError(f"slice [{start}:{stop}] outside 0..{x.shape[0]}")

    def back(g):
        if x.requires_grad:
            full = np.zeros_like(x.values)
            full[start:stop] = g
            _accumulate(x, full)

    return _result(x.values[start:stop].copy(), (x,), back)


def reshape(x: Tensor, shape) -> Tensor:
    def back(g):
        _accumulate(x, g.reshape(x.shape))

    return _result(x.values.reshape(shape).copy(), (x,), back)


def tsum(x: Tensor) -> Tensor:
    def back(g):
        _accumulate(x, np.full_like(x.values, float(g)))

    return _result(np.asarray(x.values.sum()), (x,), back)


def attention_probs(q: Tensor, k: Tensor, num_heads: int) -> Tensor:
    """Per-head attention probabilities softmax(q kᵀ / sqrt(d_head)).

    ``q`` and ``k`` are (S, d_m); the result is (num_heads, S, S). The raw
    score matrix is a transient inside this kernel, so only one S×S buffer
    per head is retained on the tape.
    """
    s, d = q.shape
    if k.shape != (s, d) or d % num_heads != 0:
        raise ValueError(f"attention shape mismatch: q{q.shape} k{k.shape} heads={num_heads}")
    hd = d // num_heads
    inv = 1.0 / math.sqrt(hd)
    qh = q.values.reshape(s, num_heads, hd).transpose(1, 0, 2)
    kh = k.values.reshape(s, num_heads, hd).transpose(1, 0, 2)
    scores = np.matmul(qh, kh.transpose(0, 2, 1)) * inv
    scores -= scores.max(axis=-1, keepdims=True)
    e = np.exp(scores)
    p = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        ds = p * (g - (g * p).sum(axis=-1, keepdims=True))
        qh_ = q.values.reshape(s, num_heads, hd).transpose(1, 0, 2)
        kh_ = k.values.reshape(s, num_heads, hd).transpose(1, 0, 2)
        dq = np.matmul(ds, kh_) * inv
        dk = np.matmul(ds.transpose(0, 2, 1), qh_) * inv
        _accumulate(q, dq.transpose(1, 0, 2).reshape(s, d))
        _accumulate(k, dk.transpose(1, 0, 2).reshape(s, d))

    return _result(p, (q, k), back)


def attention_apply(p: Tensor, v: Tensor, num_heads: int) -> Tensor:
    """Weighted value mix: heads-merged result of p @ v_per_head, back to (S, d_m)."""
    s, d = v.shape
    if p.shape != (num_heads, s, s) or d % num_heads != 0:
        raise ValueError(f"attention_apply shape mismatch: p{p.shape} v{v.shape}")
    hd = d // num_heads
    vh = v.values.reshape(s, num_heads, hd).transpose(1, 0, 2)
    ctx = np.matmul(p.values, vh)

    def back(g):
        gh = g.reshape(s, num_heads, hd).transpose(1, 0, 2)
        vh_ = v.values.reshape(s, num_heads, hd).transpose(1, 0, 2)
        _accumulate(p, np.matmul(gh, vh_.transpose(0, 2, 1)))
        dv = np.matmul(p.values.transpose(0, 2, 1), gh)
        _accumulate(v, dv.transpose(1, 0, 2).reshape(s, d))

    return _result(ctx.transpose(1, 0, 2).reshape(s, d), (p, v), back)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    eps: float = 1e-5,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Compare backward-pass gradients of ``f(x)`` against central differences.

    Returns the max over checked coordinates of ``|a-b| / max(1e-8, |a|+|b|)``.
    When ``max_coords`` is given and ``x`` is larger, a deterministic random
    subset of coordinates is checked (pass ``rng`` to control it).
    """
    x.grad = None
    loss = f(x)
    backward(loss)
    analytic = np.zeros_like(x.values) if x.grad is None else x.grad.copy()

    flat = x.values.reshape(-1)
    aflat = analytic.reshape(-1)
    idxs = np.arange(flat.size)
    if max_coords is not None and flat.size > max_coords:
        rng = rng or np.random.default_rng(0)
        idxs = rng.choice(flat.size, size=max_coords, replace=False)

    worst = 0.0
    with no_grad():
        for i in idxs:
            old = flat[i]
            flat[i] = old + eps
            fp = float(f(x).values)
            flat[i] = old - eps
            fm = float(f(x).values)
            flat[i] = old
            numeric = (fp - fm) / (2.0 * eps)
            rel = abs(aflat[i] - numeric) / max(1e-8, abs(aflat[i]) + abs(numeric))
            worst = max(worst, rel)
    return worst
