"""Dense float64 arrays with reverse-mode differentiation.

Only the operations the upsampling network needs are provided. Every op
records its parents and a closure that pushes the output gradient back to
them; :func:`backward` replays those closures in reverse topological order.
"""
from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import sparse


class DimensionError(ValueError):
    """Raised when operand extents are incompatible."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name", "_owns_grad")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (),
                 op: str = "", name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        # ascontiguousarray would promote 0-d scalars to shape (1,)
        self.data = arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if (requires_grad and not _parents) else None
        self._owns_grad = self.grad is not None
        self._parents = _parents
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = op
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)
            self._owns_grad = True

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, op={self.op or 'leaf'!r})"

    def backward(self) -> None:
        backward(self)

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
        return mul(self, -1.0)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self):
        return tmean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


_grad_enabled = True


@contextmanager
def no_grad():
    """Build no graph inside the block; results are plain constants."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


_branch_log: list | None = None


@contextmanager
def record_branches():
    """Collect the discrete choices (ReLU masks, max-pool winners, gathered
    indices) made by operations inside the block.

    Two evaluations with equal logs lie on the same smooth piece of the
    function, which is what a finite-difference check needs.
    """
    global _branch_log
    prev, _branch_log = _branch_log, []
    try:
        yield _branch_log
    finally:
        _branch_log = prev


def _note_branch(choice: np.ndarray) -> None:
    if _branch_log is not None:
        _branch_log.append(np.array(choice, copy=True))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], op: str,
          backward_fn: Callable[[np.ndarray], None]) -> Tensor:
    req = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=req, _parents=tuple(parents) if req else (), op=op)
    if req:
        out._backward = backward_fn
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    # The first contribution is borrowed, not copied: a node's gradient is
    # complete before its backward closure hands it on, so nobody mutates it
    # afterwards. A second contribution allocates a fresh sum, after which
    # the array is ours to update in place.
    if t.grad is None:
        t.grad = g if g.dtype == np.float64 else g.astype(np.float64)
        t._owns_grad = False
    elif not t._owns_grad:
        t.grad = t.grad + g
        t._owns_grad = True
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _topological(root: Tensor) -> list[Tensor]:
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
    """Populate ``grad`` on every differentiable tensor reachable from ``loss``.

    Leaf gradients accumulate across calls; call ``zero_grad`` on parameters
    between steps. Intermediate gradients are rebuilt from scratch each call.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor with requires_grad")
    order = _topological(loss)
    for node in order:
        if not node.is_leaf:
            node.grad = None
    _accumulate(loss, np.ones_like(loss.data))
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ----------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), "add", bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, -_unbroadcast(g, b.shape))

    return _make(a.data - b.data, (a, b), "sub", bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), "mul", bw)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    _note_branch(mask)

    def bw(g):
        _accumulate(x, g * mask)

    return _make(np.where(mask, x.data, 0.0), (x,), "relu", bw)


def tsum(x: Tensor, axis=None) -> Tensor:
    out = x.data.sum(axis=axis)

    def bw(g):
        if axis is None:
            _accumulate(x, np.broadcast_to(g, x.shape))
        else:
            _accumulate(x, np.broadcast_to(np.expand_dims(g, axis), x.shape))

    return _make(np.asarray(out), (x,), "sum", bw)


def tmean(x: Tensor) -> Tensor:
    n = x.data.size

    def bw(g):
        _accumulate(x, np.broadcast_to(g / n, x.shape))

    return _make(np.asarray(x.data.mean()), (x,), "mean", bw)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)

    def bw(g):
        _accumulate(x, g.reshape(x.shape))

    return _make(x.data.reshape(shape), (x,), "reshape", bw)


# ----------------------------------------------------------------- network ops

def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Per-row affine map ``x @ w + b`` over the last axis of ``x``."""
    if w.data.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear: input {x.shape} incompatible with weight {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise DimensionError(f"linear: bias {b.shape} does not match weight {w.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, w.shape[0])
    out = x2 @ w.data
    if b is not None:
        out += b.data

    def bw(g):
        g2 = g.reshape(-1, w.shape[1])
        if x.requires_grad:
            _accumulate(x, (g2 @ w.data.T).reshape(x.shape))
        if w.requires_grad:
            _accumulate(w, x2.T @ g2)
        if b is not None and b.requires_grad:
            _accumulate(b, g2.sum(axis=0))

    parents = (x, w) if b is None else (x, w, b)
    return _make(out.reshape(*lead, w.shape[1]), parents, "linear", bw)


def softmax_rows(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax; each slice along ``axis`` sums to one."""
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        _accumulate(x, s * (g - (g * s).sum(axis=axis, keepdims=True)))

    return _make(s, (x,), "softmax", bw)


def max_pool_points(x: Tensor) -> Tensor:
    """Channel-wise max over the point axis. Ties route gradient to the lowest index."""
    if x.data.ndim != 2:
        raise DimensionError(f"max_pool_points expects [N, C], got {x.shape}")
    if x.shape[0] == 0:
        raise ValueError("max_pool_points on an empty point set")
    idx = np.argmax(x.data, axis=0)
    _note_branch(idx)
    cols = np.arange(x.shape[1])

    def bw(g):
        gx = np.zeros_like(x.data)
        gx[idx, cols] = g
        _accumulate(x, gx)

    return _make(x.data[idx, cols], (x,), "max_pool", bw)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[:-1] != b.shape[:-1]:
        raise DimensionError(f"concat_channels: leading extents differ, {a.shape} vs {b.shape}")
    ca = a.shape[-1]

    def bw(g):
        _accumulate(a, g[..., :ca])
        _accumulate(b, g[..., ca:])

    return _make(np.concatenate([a.data, b.data], axis=-1), (a, b), "concat", bw)


def duplicate_points(x: Tensor, r: int) -> Tensor:
    """Interleaved copies: output rows ``r*n .. r*n+r-1`` all equal input row ``n``."""
    if int(r) != r or r < 1:
        raise ValueError(f"duplicate_points: r must be a positive integer, got {r}")
    r = int(r)
    n = x.shape[0]

    def bw(g):
        _accumulate(x, g.reshape(n, r, *x.shape[1:]).sum(axis=1))

    return _make(np.repeat(x.data, r, axis=0), (x,), "duplicate", bw)


def deconv1d_points(x: Tensor, w: Tensor, b: Tensor, r: int) -> Tensor:
    """Transposed 1-D convolution with kernel size and stride ``r``.

    ``out[r*n + k, j] = sum_i x[n, i] * w[k, i, j] + b[j]``
    """
    if w.data.ndim != 3 or w.shape[0] != r:
        raise DimensionError(f"deconv1d_points: kernel {w.shape} does not have leading extent r={r}")
    if x.data.ndim != 2 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"deconv1d_points: input {x.shape} incompatible with kernel {w.shape}")
    if b.shape != (w.shape[2],):
        raise DimensionError(f"deconv1d_points: bias {b.shape} incompatible with kernel {w.shape}")
    n, cin = x.shape
    cout = w.shape[2]
    wflat = w.data.transpose(1, 0, 2).reshape(cin, r * cout)
    out = (x.data @ wflat).reshape(n * r, cout) + b.data

    def bw(g):
        g3 = g.reshape(n, r * cout)
        if x.requires_grad:
            _accumulate(x, g3 @ wflat.T)
        if w.requires_grad:
            _accumulate(w, (x.data.T @ g3).reshape(cin, r, cout).transpose(1, 0, 2))
        if b.requires_grad:
            _accumulate(b, g.sum(axis=0))

    return _make(out, (x, w, b), "deconv1d", bw)


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """``out[q, j, :] = x[idx[q, j], :]``; the backward pass scatter-adds."""
    idx = np.asarray(idx)
    if idx.dtype.kind not in "iu":
        raise TypeError("gather_rows: indices must be integers")
    n = x.shape[0]
    bad = np.argwhere((idx < 0) | (idx >= n))
    if bad.size:
        pos = tuple(int(v) for v in bad[0])
        raise IndexError(f"gather_rows: index {int(idx[pos])} at position {pos} out of range [0, {n})")
    _note_branch(idx)
    flat = idx.reshape(-1)
    scatter = None

    def bw(g):
        nonlocal scatter
        if scatter is None:
            scatter = sparse.csr_matrix(
                (np.ones(flat.size), (flat, np.arange(flat.size))), shape=(n, flat.size))
        g2 = g.reshape(flat.size, -1)
        _accumulate(x, np.asarray(scatter @ g2).reshape(x.shape))

    return _make(x.data[idx], (x,), "gather", bw)


def parameters_of(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad]
