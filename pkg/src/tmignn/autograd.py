"""Dense tensors with a reverse-mode tape.

Only the operations the recommender needs are provided. Every operation
records a local backward rule on the active :class:`Tape` when one of its
inputs requires a gradient; :meth:`Tape.backward` replays the records in
reverse order.

Example::

    w = Tensor(np.ones((3, 2)), requires_grad=True)
    with Tape() as tape:
        loss = matmul(x, w).sum()
    tape.backward(loss)
    w.grad
"""

from __future__ import annotations

import os
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import sparse, special

DTYPE = np.float32 if os.environ.get("TMIGNN_DTYPE") == "float32" else np.float64

_ACTIVE: list["Tape"] = []


class DimensionError(ValueError):
    pass


class GroupingError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


class Tensor:
    """An n-dimensional float array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_leaf")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._leaf = True

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __len__(self):
        return len(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


class _Node:
    __slots__ = ("out", "parents", "backward")

    def __init__(self, out, parents, backward):
        self.out = out
        self.parents = parents
        self.backward = backward


class Tape:
    """Ordered record of differentiable operations for one step.

    A tape is used as a context manager; operations executed inside the
    ``with`` block are recorded. ``backward`` may run once per tape.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._replayed = False

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, out: Tensor, parents: Sequence[Tensor], backward: Callable):
        self.nodes.append(_Node(out, tuple(parents), backward))

    def clear(self):
        self.nodes = []
        self._replayed = False

    def backward(self, loss: Tensor):
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if self._replayed:
            raise ContractError("backward already ran on this tape; clear it first")
        self._replayed = True

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            for parent, pg in zip(node.parents, node.backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._leaf:
                    parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
                else:
                    key = id(parent)
                    grads[key] = pg if key not in grads else grads[key] + pg
        # a leaf loss still gets its own gradient
        if loss._leaf and loss.requires_grad:
            loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0


def backward(loss: Tensor, tape: Optional[Tape] = None):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring it."""
    if tape is None:
        if not _ACTIVE:
            raise ContractError("no active tape")
        tape = _ACTIVE[-1]
    tape.backward(loss)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward) -> Tensor:
    out = Tensor(data)
    if _ACTIVE and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._leaf = False
        _ACTIVE[-1].record(out, parents, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _make(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def scale(a, c: float) -> Tensor:
    """Multiply by a constant (not differentiated)."""
    a = as_tensor(a)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def linear(x, w, bias=None) -> Tensor:
    """``x @ w.T + bias`` with ``w`` stored as (out, in)."""
    out = matmul(x, transpose(w))
    return out if bias is None else add(out, bias)


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise DimensionError(f"transpose needs a matrix, got shape {a.shape}")
    return _make(a.data.T, (a,), lambda g: (g.T,))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def tsum(a, axis=None) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _make(a.data.sum(axis=axis), (a,), back)


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.shape[axis]
    return scale(tsum(a, axis), 1.0 / n)


def max_axis(a, axis: int) -> Tensor:
    """Maximum along ``axis``; the gradient goes to the first maximal entry."""
    a = as_tensor(a)
    idx = np.argmax(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis)
    shape = a.shape

    def back(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.put_along_axis(full, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (full,)

    return _make(np.squeeze(out, axis=axis), (a,), back)


def clip(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


# --------------------------------------------------------------- activations


def leaky_relu(a, slope: float = 0.01) -> Tensor:
    a = as_tensor(a)
    factor = np.where(a.data > 0, 1.0, slope)
    return _make(a.data * factor, (a,), lambda g: (g * factor,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = special.expit(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), back)


# ---------------------------------------------------------- indexed assembly


def _check_index(idx, n: int, what: str) -> np.ndarray:
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"{what} index out of bounds for extent {n}")
    return idx


class Segments:
    """Row-to-segment assignment with cached reduction structures.

    Sums run through a CSR matrix whose rows list member entries in
    increasing index order, which fixes the summation order.
    """

    __slots__ = ("ids", "n", "_matrix", "_order", "_starts")

    def __init__(self, ids, n: int):
        self.ids = _check_index(ids, n, "segment")
        self.n = n
        self._matrix = None
        self._order = None

    def __len__(self):
        return len(self.ids)

    @property
    def counts(self) -> np.ndarray:
        return np.bincount(self.ids, minlength=self.n)

    def sum(self, data: np.ndarray) -> np.ndarray:
        if data.ndim == 1:
            return np.bincount(self.ids, weights=data, minlength=self.n).astype(data.dtype, copy=False)
        if self._matrix is None:
            m = len(self.ids)
            indptr = np.concatenate([[0], np.cumsum(self.counts)])
            self._matrix = sparse.csr_matrix(
                (np.ones(m, dtype=DTYPE), np.argsort(self.ids, kind="stable"), indptr),
                shape=(self.n, m),
            )
        flat = data.reshape(len(data), -1)
        return np.asarray(self._matrix @ flat).reshape((self.n,) + data.shape[1:])

    def max(self, data: np.ndarray) -> np.ndarray:
        out = np.full((self.n,) + data.shape[1:], -np.inf, dtype=data.dtype)
        if len(self.ids) == 0:
            return out
        if self._order is None:
            self._order = np.argsort(self.ids, kind="stable")
            srt = self.ids[self._order]
            self._starts = np.flatnonzero(np.r_[True, srt[1:] != srt[:-1]])
        owners = self.ids[self._order[self._starts]]
        out[owners] = np.maximum.reduceat(data[self._order], self._starts, axis=0)
        return out


def as_segments(segments, n: int) -> Segments:
    if isinstance(segments, Segments):
        if segments.n != n:
            raise DimensionError(f"segments cover {segments.n} buckets, expected {n}")
        return segments
    return Segments(segments, n)


def gather(a, idx) -> Tensor:
    """Rows ``a[idx]``; repeated indices accumulate in the backward pass.

    ``idx`` may be a :class:`Segments` over ``a``'s rows to reuse its cache.
    """
    a = as_tensor(a)
    seg = as_segments(idx, a.shape[0]) if isinstance(idx, Segments) else None
    ids = seg.ids if seg is not None else _check_index(idx, a.shape[0], "gather")
    n = a.shape[0]

    def back(g):
        return (as_segments(seg if seg is not None else ids, n).sum(g),)

    return _make(a.data[ids], (a,), back)


def segment_sum(a, segments, num_segments: int) -> Tensor:
    """Sum rows of ``a`` into ``num_segments`` buckets.

    Within a bucket rows are added in increasing row order, so the result
    does not depend on how the caller interleaves segments.
    """
    a = as_tensor(a)
    seg = as_segments(segments, num_segments)
    if len(seg) != a.shape[0]:
        raise DimensionError(f"segment ids of length {len(seg)} for rows {a.shape}")
    ids = seg.ids
    return _make(seg.sum(a.data), (a,), lambda g: (g[ids],))


def segment_softmax(x, segments, num_segments: int) -> Tensor:
    """Softmax of a score vector within each segment (max-shifted).

    Every segment id in ``range(num_segments)`` must own at least one entry.
    """
    x = as_tensor(x)
    seg = as_segments(segments, num_segments)
    counts = seg.counts
    if np.any(counts == 0):
        empty = int(np.flatnonzero(counts == 0)[0])
        raise GroupingError(f"softmax group {empty} is empty")
    ids = seg.ids
    xd = x.data
    e = np.exp(xd - seg.max(xd)[ids])
    out = e / seg.sum(e)[ids]

    def back(g):
        dot = seg.sum(g * out)
        return (out * (g - dot[ids]),)

    return _make(out, (x,), back)


rowwise_softmax = segment_softmax


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    ax = axis % ts[0].ndim
    for t in ts[1:]:
        if t.ndim != ts[0].ndim or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, ts[0].shape)) if i != ax
        ):
            raise DimensionError(
                f"concat shape mismatch: {[t.shape for t in ts]} along axis {axis}"
            )
    cuts = np.cumsum([t.shape[ax] for t in ts])[:-1]

    def back(g):
        return tuple(np.split(g, cuts, axis=ax))

    return _make(np.concatenate([t.data for t in ts], axis=ax), ts, back)


def l2_normalize_rows(a, eps: float = 1e-12) -> Tensor:
    a = as_tensor(a)
    norm = np.sqrt((a.data * a.data).sum(axis=1, keepdims=True))
    denom = np.maximum(norm, eps)
    out = a.data / denom
    live = norm > eps

    def back(g):
        # rows at the guard are a plain division by eps
        radial = (g * out).sum(axis=1, keepdims=True)
        return (np.where(live, (g - out * radial) / denom, g / denom),)

    return _make(out, (a,), back)


# ------------------------------------------------------------------- GRU


GRU_PARAM_NAMES = ("w_z", "u_z", "b_z", "w_r", "u_r", "b_r", "w_h", "u_h", "b_h")


def gru_cell(state, inp, params: dict) -> Tensor:
    """Gated recurrent update of ``state`` (rows) given ``inp`` (rows).

    ``params`` holds the nine tensors in ``GRU_PARAM_NAMES``: input weights
    ``w_*`` (d, d), recurrent weights ``u_*`` (d, d) and biases ``b_*`` (d,).
    The update gate ``z`` keeps the old state: ``h' = (1 - z) * n + z * h``.
    """
    state, inp = as_tensor(state), as_tensor(inp)
    if state.shape != inp.shape:
        raise DimensionError(f"gru_cell width mismatch: state {state.shape} vs input {inp.shape}")
    p = params
    z = sigmoid(linear(inp, p["w_z"]) + linear(state, p["u_z"]) + p["b_z"])
    r = sigmoid(linear(inp, p["w_r"]) + linear(state, p["u_r"]) + p["b_r"])
    n = tanh(linear(inp, p["w_h"]) + linear(r * state, p["u_h"]) + p["b_h"])
    return n + z * (state - n)
