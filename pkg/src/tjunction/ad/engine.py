"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

Design notes:

* A ``Tensor`` wraps an ndarray plus an optional backward closure. Graphs are
  built eagerly; ``backward()`` runs a topological sweep from a scalar root.
* Gradients only flow where ``requires_grad`` is set; inside ``no_grad()``
  (rollout collection) no graph is recorded at all.
* Ops preserve the operand dtype (float32 for training, float64 for
  finite-difference checking); python scalars are cast, never promoted.
* ``mean_pool_rows`` accumulates in float64 over a canonically sorted order so
  pooling is exactly invariant to row permutations, not just up to rounding.
"""

from __future__ import annotations

import numpy as np

_grad_enabled = True


class no_grad:
    """Context manager: disable graph recording (forward values only)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bwd")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _bwd=None):
        if not isinstance(data, np.ndarray):
            # numpy scalars (0-d op results) keep their dtype; python numbers
            # and nested lists default to float32.
            if isinstance(data, np.generic):
                data = np.asarray(data)
            else:
                data = np.asarray(data, dtype=np.float32)
        self.data = data
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._bwd = _bwd

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_wrap(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self) -> None:
        backward(self)


def _wrap(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: tuple[Tensor, ...], bwd) -> Tensor:
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=parents, _bwd=bwd)
    return Tensor(data)


def _acc(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward op."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def backward(root: Tensor) -> None:
    """Accumulate gradients of the scalar root into every reachable tensor."""
    if root.data.size != 1:
        raise ValueError(f"backward() needs a scalar root, got shape {root.data.shape}")
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    root.grad = np.ones_like(root.data)
    for node in reversed(topo):
        if node._bwd is not None:
            node._bwd(node.grad)


# ---------------------------------------------------------------------------
# primitives


def add(a: Tensor, b) -> Tensor:
    b = _wrap(b, a.dtype)
    out_data = a.data + b.data

    def bwd(g):
        _acc(a, _unbroadcast(g, a.data.shape))
        _acc(b, _unbroadcast(g, b.data.shape))

    return _make(out_data, (a, b), bwd)


def sub(a: Tensor, b) -> Tensor:
    b = _wrap(b, a.dtype)
    out_data = a.data - b.data

    def bwd(g):
        _acc(a, _unbroadcast(g, a.data.shape))
        _acc(b, _unbroadcast(-g, b.data.shape))

    return _make(out_data, (a, b), bwd)


def mul(a: Tensor, b) -> Tensor:
    b = _wrap(b, a.dtype)
    out_data = a.data * b.data

    def bwd(g):
        _acc(a, _unbroadcast(g * b.data, a.data.shape))
        _acc(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(out_data, (a, b), bwd)


def div(a: Tensor, b) -> Tensor:
    b = _wrap(b, a.dtype)
    out_data = a.data / b.data

    def bwd(g):
        _acc(a, _unbroadcast(g / b.data, a.data.shape))
        _acc(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(out_data, (a, b), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.data.shape} @ {b.data.shape}")
    out_data = a.data @ b.data

    def bwd(g):
        _acc(a, g @ b.data.T)
        _acc(b, a.data.T @ g)

    return _make(out_data, (a, b), bwd)


def tanh(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)

    def bwd(g):
        _acc(a, g * (1.0 - out_data * out_data))

    return _make(out_data, (a,), bwd)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    e = np.exp(-np.abs(x))
    out_data = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def bwd(g):
        _acc(a, g * out_data * (1.0 - out_data))

    return _make(out_data, (a,), bwd)


def relu(a: Tensor) -> Tensor:
    out_data = np.maximum(a.data, 0.0)

    def bwd(g):
        _acc(a, g * (a.data > 0))

    return _make(out_data, (a,), bwd)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def bwd(g):
        _acc(a, g * out_data)

    return _make(out_data, (a,), bwd)


def log(a: Tensor) -> Tensor:
    out_data = np.log(a.data)

    def bwd(g):
        _acc(a, g / a.data)

    return _make(out_data, (a,), bwd)


def softmax(a: Tensor) -> Tensor:
    """Row-wise softmax over the last axis."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * out_data).sum(axis=-1, keepdims=True)
        _acc(a, out_data * (g - dot))

    return _make(out_data, (a,), bwd)


def log_softmax(a: Tensor) -> Tensor:
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out_data = shifted - lse
    soft = np.exp(out_data)

    def bwd(g):
        _acc(a, g - soft * g.sum(axis=-1, keepdims=True))

    return _make(out_data, (a,), bwd)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            _acc(a, np.broadcast_to(g, a.data.shape).copy())
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            _acc(a, np.broadcast_to(gg, a.data.shape).copy())

    return _make(np.asarray(out_data), (a,), bwd)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        count = a.data.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def tmax(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out_data = a.data.max(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            mask = (a.data == out_data).astype(a.data.dtype)
            _acc(a, mask * (g / mask.sum()))
            return
        gg = g if keepdims else np.expand_dims(g, axis)
        full = out_data if keepdims else np.expand_dims(out_data, axis)
        mask = (a.data == full).astype(a.data.dtype)
        mask /= mask.sum(axis=axis, keepdims=True)
        _acc(a, mask * gg)

    return _make(np.asarray(out_data), (a,), bwd)


def mean_pool_rows(a: Tensor, group: int) -> Tensor:
    """Mean over groups of ``group`` consecutive rows: (B*R, H) -> (B, H).

    The sum runs in float64 over a sorted canonical order, so the result is
    exactly invariant to permuting rows within a group.
    """
    n, h = a.data.shape
    if n % group != 0:
        raise ValueError(f"row count {n} not divisible by group size {group}")
    blocks = a.data.reshape(n // group, group, h).astype(np.float64)
    blocks.sort(axis=1)
    out_data = (blocks.sum(axis=1) / group).astype(a.data.dtype)

    def bwd(g):
        _acc(a, np.repeat(g / group, group, axis=0))

    return _make(out_data, (a,), bwd)


def max_pool_rows(a: Tensor, group: int) -> Tensor:
    """Max over groups of ``group`` consecutive rows: (B*R, H) -> (B, H)."""
    n, h = a.data.shape
    if n % group != 0:
        raise ValueError(f"row count {n} not divisible by group size {group}")
    blocks = a.data.reshape(n // group, group, h)
    out_data = blocks.max(axis=1)

    def bwd(g):
        mask = (blocks == out_data[:, None, :]).astype(a.data.dtype)
        mask /= mask.sum(axis=1, keepdims=True)
        _acc(a, (mask * g[:, None, :]).reshape(n, h))

    return _make(out_data, (a,), bwd)


def concat(parts: list[Tensor], axis: int = 1) -> Tensor:
    out_data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _acc(p, g[tuple(sl)])

    return _make(out_data, tuple(parts), bwd)


def take_rows(a: Tensor, indices: np.ndarray) -> Tensor:
    """Select rows by integer index: (N, H) -> (len(indices), H)."""
    idx = np.asarray(indices, dtype=np.intp)
    out_data = a.data[idx]

    def bwd(g):
        if a.requires_grad:
            acc = np.zeros_like(a.data)
            np.add.at(acc, idx, g)
            _acc(a, acc)

    return _make(out_data, (a,), bwd)


def gather(a: Tensor, indices: np.ndarray) -> Tensor:
    """Pick one column per row: (B, K), (B,) -> (B,)."""
    idx = np.asarray(indices, dtype=np.intp)
    rows = np.arange(a.data.shape[0])
    out_data = a.data[rows, idx]

    def bwd(g):
        if a.requires_grad:
            acc = np.zeros_like(a.data)
            np.add.at(acc, (rows, idx), g)
            _acc(a, acc)

    return _make(out_data, (a,), bwd)


def minimum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise min of two tensors; ties send gradient to the first."""
    take_a = a.data <= b.data
    out_data = np.where(take_a, a.data, b.data)

    def bwd(g):
        _acc(a, _unbroadcast(g * take_a, a.data.shape))
        _acc(b, _unbroadcast(g * ~take_a, b.data.shape))

    return _make(out_data, (a, b), bwd)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient passes only inside the open interval."""
    out_data = np.clip(a.data, lo, hi)
    inside = (a.data > lo) & (a.data < hi)

    def bwd(g):
        _acc(a, g * inside)

    return _make(out_data, (a,), bwd)


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b (the workhorse layer op)."""
    return add(matmul(x, w), b)
