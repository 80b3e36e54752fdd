"""Dense numeric core with tape-based reverse-mode differentiation.

Every differentiable op appends a backward closure to the active tape when
one of its inputs requires a gradient.  ``backward(loss)`` replays the tape in
reverse, accumulating (never overwriting) into ``Tensor.grad``.

Parameters created with ``sparse=True`` (embedding-like tables) receive
row-sparse gradients from :func:`gather`: a list of ``(rows, values)`` pairs
instead of a dense buffer, so touching a handful of rows of a million-row
table costs nothing proportional to the table size.

Set ``MAP_F64=1`` (or use :func:`precision`) for 64-bit arithmetic.
"""

from __future__ import annotations

import math
import os
from contextlib import contextmanager
from typing import Callable, Iterable

import numpy as np
from scipy import sparse

PRED_EPS = 1e-7

_dtype = np.float64 if os.environ.get("MAP_F64") == "1" else np.float32


def default_dtype():
    return _dtype


@contextmanager
def precision(dtype):
    """Temporarily switch the default float type (used by gradient checks)."""
    global _dtype
    old, _dtype = _dtype, np.dtype(dtype).type
    try:
        yield
    finally:
        _dtype = old


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "sparse", "rows", "name")

    def __init__(self, data, requires_grad: bool = False, sparse: bool = False, name: str = ""):
        self.data = np.asarray(data, dtype=_dtype)
        self.grad = None
        self.requires_grad = requires_grad
        self.sparse = sparse
        # row-sparse gradient contributions for sparse parameters
        self.rows: list[tuple[np.ndarray, np.ndarray]] = []
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None
        self.rows = []

    def has_grad(self) -> bool:
        return self.grad is not None or bool(self.rows)

    def dense_grad(self) -> np.ndarray:
        """Materialize the accumulated gradient (dense plus row contributions)."""
        g = np.zeros_like(self.data) if self.grad is None else self.grad.copy()
        for idx, val in self.rows:
            rows, summed = segment_sum(idx, val)
            g[rows] += summed
        return g

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str = "", sparse: bool = False) -> Tensor:
    return Tensor(data, requires_grad=True, sparse=sparse, name=name)


class Tape:
    """Ordered record of backward closures for one forward pass."""

    def __init__(self):
        self.entries: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []
        self.enabled = True

    def record(self, out: Tensor, fn: Callable[[np.ndarray], None]) -> None:
        self.entries.append((out, fn))

    def clear(self) -> None:
        self.entries.clear()


_tape = Tape()


def current_tape() -> Tape:
    return _tape


@contextmanager
def no_grad():
    prev = _tape.enabled
    _tape.enabled = False
    try:
        yield
    finally:
        _tape.enabled = prev


def _tracked(*inputs: Tensor) -> bool:
    return _tape.enabled and any(t.requires_grad for t in inputs)


def _result(data, inputs, backward_fn) -> Tensor:
    """Wrap ``data``; if any input is tracked, record ``backward_fn(grad_out)``."""
    out = Tensor(data)
    if _tracked(*inputs):
        out.requires_grad = True
        _tape.record(out, backward_fn)
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def backward(loss: Tensor) -> None:
    """Reverse sweep of the tape from a scalar ``loss``; clears the tape."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    try:
        if not loss.requires_grad:
            return
        loss.grad = np.ones_like(loss.data)
        for out, fn in reversed(_tape.entries):
            if out.grad is not None:
                fn(out.grad)
                out.grad = None if out is not loss else out.grad
    finally:
        _tape.clear()


# ---------------------------------------------------------------- elementwise

def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _result(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return _result(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.shape))

    return _result(a.data * b.data, (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    return _result(a.data * c, (a,), lambda g: _accum(a, g * c))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(x.data * mask, (x,), lambda g: _accum(x, g * mask))


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)
    return _result(y, (x,), lambda g: _accum(x, g * y * (1.0 - y)))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign to avoid overflow in exp
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def log_sigmoid(x: Tensor) -> Tensor:
    """log(sigmoid(x)) computed without overflow."""
    z = x.data
    y = np.minimum(z, 0) - np.log1p(np.exp(-np.abs(z)))
    return _result(y, (x,), lambda g: _accum(x, g * _sigmoid(-z)))


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    inside = (x.data >= lo) & (x.data <= hi)
    return _result(np.clip(x.data, lo, hi), (x,), lambda g: _accum(x, g * inside))


def log(x: Tensor) -> Tensor:
    return _result(np.log(x.data), (x,), lambda g: _accum(x, g / x.data))


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-p) so the expectation is kept."""
    if not training or p <= 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {p}")
    keep = (rng.random(x.shape) >= p).astype(x.data.dtype) / (1.0 - p)
    return _result(x.data * keep, (x,), lambda g: _accum(x, g * keep))


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def bw(g):
        if a.requires_grad:
            _accum(a, g @ b.data.T)
        if b.requires_grad:
            _accum(b, a.data.T @ g)

    return _result(a.data @ b.data, (a, b), bw)


def rowdot(a: Tensor, b: Tensor) -> Tensor:
    """``out[n, k] = a[n, k, :] . b[n, :]`` (batched scoring of candidate rows)."""
    if a.data.ndim != 3 or b.data.ndim != 2 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ShapeError(f"rowdot: incompatible shapes {a.shape} and {b.shape}")

    def bw(g):
        if a.requires_grad:
            _accum(a, g[:, :, None] * b.data[:, None, :])
        if b.requires_grad:
            _accum(b, np.einsum("nk,nkh->nh", g, a.data))

    return _result(np.einsum("nkh,nh->nk", a.data, b.data), (a, b), bw)


def score_rows(table: Tensor, indices: np.ndarray, h: Tensor) -> Tensor:
    """``out[n, k] = table[indices[n, k]] . h[n]`` without materializing gathered rows' gradients.

    Equivalent to ``rowdot(gather(table, indices), h)``; the table gradient is
    formed as one sparse incidence product and stored row-sparse.
    """
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 2 or h.data.ndim != 2 or idx.shape[0] != h.shape[0] or table.shape[1] != h.shape[1]:
        raise ShapeError(f"score_rows: indices {idx.shape}, table {table.shape}, h {h.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(f"score_rows: index out of range for table with {table.shape[0]} rows")
    rows_data = table.data[idx]
    out = np.einsum("nkh,nh->nk", rows_data, h.data)

    def bw(g):
        if h.requires_grad:
            _accum(h, np.einsum("nk,nkh->nh", g, rows_data))
        if table.requires_grad:
            n, k = idx.shape
            uniq, inv = np.unique(idx, return_inverse=True)
            coef = sparse.csr_matrix(
                (g.reshape(-1), (inv.reshape(-1), np.repeat(np.arange(n), k))), shape=(len(uniq), n)
            )
            contrib = np.asarray(coef @ h.data, dtype=table.data.dtype)
            if table.sparse:
                table.rows.append((uniq, contrib))
            else:
                acc = np.zeros_like(table.data)
                acc[uniq] = contrib
                _accum(table, acc)

    return _result(out, (table, h), bw)


# ---------------------------------------------------------------- shape ops

def reshape(x: Tensor, shape) -> Tensor:
    try:
        y = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from None
    return _result(y, (x,), lambda g: _accum(x, g.reshape(x.shape)))


def concat(parts: Iterable[Tensor], axis: int = -1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat of nothing")
    try:
        y = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[p.shape for p in parts]}") from None
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def bw(g):
        for p, piece in zip(parts, np.split(g, bounds, axis=axis)):
            _accum(p, piece)

    return _result(y, parts, bw)


def gather(table: Tensor, indices, unique: bool = False) -> Tensor:
    """Rows of ``table`` at ``indices``; output shape ``indices.shape + table.shape[1:]``.

    Backward scatter-adds into the gathered rows.  Repeated indices accumulate;
    ``unique=True`` promises there are none and skips the segment sum.
    """
    idx = np.asarray(indices, dtype=np.int64)
    n = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ShapeError(f"gather: index out of range for table with {n} rows")
    y = table.data[idx]

    def bw(g):
        if not table.requires_grad:
            return
        flat_idx = idx.reshape(-1)
        flat_g = g.reshape((-1,) + table.shape[1:])
        if table.sparse:
            table.rows.append((flat_idx, flat_g.astype(table.data.dtype, copy=True)))
        else:
            acc = np.zeros_like(table.data)
            if unique:
                acc[flat_idx] = flat_g
            else:
                rows, summed = segment_sum(flat_idx, flat_g)
                acc[rows] = summed
            _accum(table, acc)

    return _result(y, (table,), bw)


embedding_gather = gather


# ---------------------------------------------------------------- reductions

def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    y = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(x, np.broadcast_to(g, x.shape))

    return _result(y, (x,), bw)


def reduce_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(reduce_sum(x, axis, keepdims), 1.0 / n)


# ---------------------------------------------------------------- losses

def bce_loss(preds: Tensor, labels) -> Tensor:
    """Mean binary cross-entropy over probabilities clamped to [1e-7, 1 - 1e-7]."""
    y = np.asarray(labels.data if isinstance(labels, Tensor) else labels, dtype=preds.data.dtype)
    if preds.data.size == 0:
        raise ShapeError("bce_loss on an empty batch")
    if y.shape != preds.shape:
        raise ShapeError(f"bce_loss: preds {preds.shape} vs labels {y.shape}")
    p = preds.data
    inside = (p >= PRED_EPS) & (p <= 1.0 - PRED_EPS)
    pc = np.clip(p, PRED_EPS, 1.0 - PRED_EPS)
    n = p.size
    val = -np.sum(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc)) / n

    def bw(g):
        _accum(preds, g * inside * (pc - y) / (pc * (1.0 - pc)) / n)

    return _result(np.asarray(val, dtype=p.dtype), (preds,), bw)


# ---------------------------------------------------------------- optimizer

def cosine_lr(base_lr: float, t: int, total_steps: int) -> float:
    t = min(max(t, 0), total_steps)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * t / total_steps))


class Adam:
    """Adam with bias correction and decoupled weight decay.

    Sparse parameters are updated lazily: only rows that received a gradient
    this step have their moments, decay and values touched.
    """

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0, schedule: str = "constant",
                 total_steps: int | None = None):
        if schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr schedule {schedule!r}")
        if schedule == "cosine" and not total_steps:
            raise ValueError("cosine schedule needs total_steps")
        self.params = dict(params)
        self.base_lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.schedule = schedule
        self.total_steps = total_steps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def lr_at(self, t: int) -> float:
        if self.schedule == "cosine":
            return cosine_lr(self.base_lr, t, self.total_steps)
        return self.base_lr

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self) -> None:
        lr = self.lr_at(self.t)
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            if not p.has_grad():
                continue
            m, v = self.m[name], self.v[name]
            if p.sparse:
                rows, g = _merge_rows(p)
                if not np.all(np.isfinite(g)):
                    raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
                mr = b1 * m[rows] + (1 - b1) * g
                vr = b2 * v[rows] + (1 - b2) * g * g
                m[rows], v[rows] = mr, vr
                x = p.data[rows]
                x -= lr * self.weight_decay * x
                x -= lr * (mr / c1) / (np.sqrt(vr / c2) + self.eps)
                p.data[rows] = x
            else:
                g = p.grad
                if not np.all(np.isfinite(g)):
                    raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
                m *= b1
                m += (1 - b1) * g
                v *= b2
                v += (1 - b2) * g * g
                p.data -= lr * self.weight_decay * p.data
                p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        self.zero_grad()


def _merge_rows(p: Tensor) -> tuple[np.ndarray, np.ndarray]:
    """Unique touched rows and their summed gradient (dense grad folded in)."""
    if p.grad is not None:
        rows = np.arange(p.shape[0])
        g = p.dense_grad()
        return rows, g
    idx = np.concatenate([r for r, _ in p.rows])
    vals = np.concatenate([v for _, v in p.rows])
    return segment_sum(idx, vals)


def segment_sum(idx: np.ndarray, vals: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Unique indices and the sum of the ``vals`` rows sharing each index."""
    n = len(idx)
    rows, inv = np.unique(idx, return_inverse=True)
    flat = vals.reshape(n, -1)
    # a 0/1 incidence matrix times the values sums duplicates in one C pass
    incidence = sparse.csr_matrix(
        (np.ones(n, dtype=flat.dtype), (inv.reshape(-1), np.arange(n))), shape=(len(rows), n)
    )
    summed = np.asarray(incidence @ flat, dtype=vals.dtype)
    return rows, summed.reshape((len(rows),) + vals.shape[1:])


# ---------------------------------------------------------------- verification

def gradcheck(f: Callable[[], Tensor], params: Iterable[Tensor], eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` rebuilds the scalar loss from the current parameter values.  Relative
    error uses ``max(|analytic|, |numeric|, 1e-8)`` as denominator.
    """
    params = list(params)
    for p in params:
        p.zero_grad()
    backward(f())
    analytic = [p.dense_grad() for p in params]
    worst = 0.0
    with no_grad():
        for p, a in zip(params, analytic):
            flat = p.data.reshape(-1)
            af = a.reshape(-1)
            for i in range(flat.size):
                old = flat[i]
                flat[i] = old + eps
                up = float(f().data)
                flat[i] = old - eps
                down = float(f().data)
                flat[i] = old
                num = (up - down) / (2 * eps)
                err = abs(af[i] - num) / max(abs(af[i]), abs(num), 1e-8)
                worst = max(worst, err)
    for p in params:
        p.zero_grad()
    return worst
