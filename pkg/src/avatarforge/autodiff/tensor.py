"""Dense reverse-mode autodiff on numpy arrays.

Every differentiable op creates a node holding its parents and a closure that
maps the output gradient to parent gradients. Nodes get a monotonically
increasing id at creation, so sorting reachable nodes by descending id is a
valid reverse topological order. That sorted list is the tape replayed by
:func:`backward`.

Broadcasting is limited to scalars and a trailing-axis bias (shape ``(C,)``
against ``(..., C)``).
"""

from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

_ids = itertools.count()


class ShapeError(ValueError):
    """Operand shapes do not conform for the requested op."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_id")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self._id = next(_ids)

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def backward(self):
        backward(self)


def tensor(data, requires_grad: bool = False, dtype=None, name: str | None = None) -> Tensor:
    arr = np.array(data, dtype=dtype if dtype is not None else None, copy=True)
    return Tensor(arr, requires_grad=requires_grad, name=name)


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _node(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape or b.ndim == 0 or a.ndim == 0:
        return
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        return
    if a.ndim == 1 and b.ndim >= 1 and b.shape[-1] == a.shape[0]:
        return
    raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not conform")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum(), dtype=g.dtype)
    return g.reshape(-1, shape[0]).sum(axis=0)


# -- elementwise -------------------------------------------------------

def add(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else Tensor(0.0))
    b = _lift(b, a)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _node(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else Tensor(0.0))
    b = _lift(b, a)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _node(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else Tensor(0.0))
    b = _lift(b, a)
    _check_broadcast(a, b, "mul")
    sa, sb = a.shape, b.shape
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, sa), _unbroadcast(g * ad, sb)

    return _node(ad * bd, (a, b), bw)


def div(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else Tensor(0.0))
    b = _lift(b, a)
    _check_broadcast(a, b, "div")
    sa, sb = a.shape, b.shape
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return _unbroadcast(g / bd, sa), _unbroadcast(-g * out / bd, sb)

    return _node(out, (a, b), bw)


def scale(x: Tensor, s: float) -> Tensor:
    s = float(s)
    return _node(x.data * s, (x,), lambda g: (g * s,))


def sigmoid(x: Tensor) -> Tensor:
    y = expit(x.data)
    return _node(y, (x,), lambda g: (g * y * (1.0 - y),))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _node(y, (x,), lambda g: (g * (1.0 - y * y),))


def relu(x: Tensor) -> Tensor:
    m = x.data > 0
    return _node(np.where(m, x.data, 0.0).astype(x.dtype), (x,), lambda g: (g * m,))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _node(y, (x,), lambda g: (g * y,))


def sqrt(x: Tensor) -> Tensor:
    y = np.sqrt(x.data)
    return _node(y, (x,), lambda g: (g * 0.5 / y,))


def clamp(x: Tensor, lo, hi) -> Tensor:
    """Hard clamp with straight-through gradient inside ``[lo, hi]``."""
    lo = np.broadcast_to(np.asarray(lo, dtype=x.dtype), x.shape)
    hi = np.broadcast_to(np.asarray(hi, dtype=x.dtype), x.shape)
    inside = (x.data >= lo) & (x.data <= hi)
    return _node(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


# -- linear algebra ----------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    ad, bd = a.data, b.data

    def bw(g):
        return g @ bd.T, ad.T @ g

    return _node(ad @ bd, (a, b), bw)


def sparse_matmul(S, x: Tensor) -> Tensor:
    """Constant sparse matrix times dense 2-D tensor."""
    if x.ndim != 2 or S.shape[1] != x.shape[0]:
        raise ShapeError(f"sparse_matmul: shapes {S.shape} and {x.shape} do not conform")
    S = sp.csr_matrix(S)
    St = S.T.tocsr()
    out = np.asarray(S @ x.data, dtype=x.dtype)
    return _node(out, (x,), lambda g: (np.asarray(St @ g, dtype=g.dtype),))


def bmv(A: np.ndarray, x: Tensor) -> Tensor:
    """Per-row constant matrix times vector: out[n] = A[n] @ x[n]."""
    if A.ndim != 3 or x.ndim != 2 or A.shape[0] != x.shape[0] or A.shape[2] != x.shape[1]:
        raise ShapeError(f"bmv: shapes {A.shape} and {x.shape} do not conform")
    A = A.astype(x.dtype, copy=False)
    out = np.einsum("nij,nj->ni", A, x.data)
    return _node(out, (x,), lambda g: (np.einsum("nij,ni->nj", A, g),))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _node(y, (x,), bw)


# -- structural --------------------------------------------------------

def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = list(tensors)
    ref = tensors[0]
    ax = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(
            t.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != ax
        ):
            raise ShapeError(
                f"concat(axis={axis}): shapes {[t.shape for t in tensors]} do not conform"
            )
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([t.data for t in tensors], axis=ax)

    def bw(g):
        parts = []
        for i in range(len(tensors)):
            idx = [slice(None)] * g.ndim
            idx[ax] = slice(bounds[i], bounds[i + 1])
            parts.append(g[tuple(idx)])
        return tuple(parts)

    return _node(out, tensors, bw)


def getitem(x: Tensor, index) -> Tensor:
    """Basic (slice/int) indexing; fancy indexing goes through sparse_matmul."""
    items = index if isinstance(index, tuple) else (index,)
    for it in items:
        if not (isinstance(it, (slice, int, np.integer)) or it is Ellipsis or it is None):
            raise TypeError("getitem supports basic slicing only")
    out = x.data[index]
    shape, dtype = x.shape, x.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        full[index] = g
        return (full,)

    return _node(np.array(out), (x,), bw)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as err:
        raise ShapeError(f"reshape: cannot reshape {old} to {shape}") from err
    return _node(out, (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes=None) -> Tensor:
    out = np.transpose(x.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _node(out, (x,), lambda g: (np.transpose(g, inv),))


# -- reductions --------------------------------------------------------

def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(np.asarray(out), (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return scale(tsum(x, axis, keepdims), 1.0 / n)


def mse(a: Tensor, b) -> Tensor:
    """Mean squared error, mean over every element."""
    b = _lift(b, a)
    if a.shape != b.shape:
        raise ShapeError(f"mse: shapes {a.shape} and {b.shape} do not conform")
    d = a.data - b.data
    n = d.size

    def bw(g):
        gd = g * (2.0 / n) * d
        return gd, -gd

    return _node(np.asarray((d * d).sum() / n, dtype=a.dtype), (a, b), bw)


# -- images (H, W, C layout) -------------------------------------------

def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, pad_mode: str = "zeros") -> Tensor:
    """Stride-1 'same' cross-correlation.

    ``out[y, x] = sum_{dy,dx,c} w[dy, dx, c, :] * xpad[y + dy, x + dx, c]``
    with ``xpad`` padded by ``k // 2`` using zeros or edge replication.
    """
    if x.ndim != 3 or w.ndim != 4 or w.shape[0] != w.shape[1] or w.shape[2] != x.shape[2]:
        raise ShapeError(f"conv2d: input {x.shape} and kernel {w.shape} do not conform")
    if w.shape[0] % 2 != 1:
        raise ShapeError("conv2d: kernel size must be odd")
    if b is not None and b.shape != (w.shape[3],):
        raise ShapeError(f"conv2d: bias {b.shape} does not match {w.shape[3]} outputs")
    H, W, Ci = x.shape
    k, Co = w.shape[0], w.shape[3]
    p = k // 2
    mode = "constant" if pad_mode == "zeros" else "edge"
    xp = np.pad(x.data, ((p, p), (p, p), (0, 0)), mode=mode)
    cols = np.empty((H, W, k, k, Ci), dtype=x.dtype)
    for dy in range(k):
        for dx in range(k):
            cols[:, :, dy, dx, :] = xp[dy : dy + H, dx : dx + W, :]
    cols = cols.reshape(H * W, k * k * Ci)
    wm = w.data.reshape(k * k * Ci, Co)
    out = cols @ wm
    if b is not None:
        out += b.data
    out = out.reshape(H, W, Co)

    def bw(g):
        g2 = g.reshape(H * W, Co)
        gw = (cols.T @ g2).reshape(w.shape)
        gcols = (g2 @ wm.T).reshape(H, W, k, k, Ci)
        gxp = np.zeros((H + 2 * p, W + 2 * p, Ci), dtype=g.dtype)
        for dy in range(k):
            for dx in range(k):
                gxp[dy : dy + H, dx : dx + W, :] += gcols[:, :, dy, dx, :]
        if mode == "constant":
            gx = gxp[p : p + H, p : p + W, :]
        else:
            rows = gxp[p : p + H, :, :].copy()
            rows[0] += gxp[:p].sum(axis=0)
            rows[-1] += gxp[p + H :].sum(axis=0)
            gx = rows[:, p : p + W, :].copy()
            gx[:, 0] += rows[:, :p].sum(axis=1)
            gx[:, -1] += rows[:, p + W :].sum(axis=1)
        grads = [np.ascontiguousarray(gx), gw]
        if b is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    parents = (x, w) if b is None else (x, w, b)
    return _node(out, parents, bw)


def avg_pool(x: Tensor, k: int) -> Tensor:
    H, W, C = x.shape
    if H % k or W % k:
        raise ShapeError(f"avg_pool: {x.shape} not divisible by {k}")
    out = x.data.reshape(H // k, k, W // k, k, C).mean(axis=(1, 3))

    def bw(g):
        up = np.repeat(np.repeat(g, k, axis=0), k, axis=1)
        return (up / (k * k),)

    return _node(out, (x,), bw)


# -- backward ------------------------------------------------------------

def _tape(root: Tensor) -> list[Tensor]:
    seen = {root._id}
    stack = [root]
    nodes = []
    while stack:
        n = stack.pop()
        nodes.append(n)
        for p in n._parents:
            if p.requires_grad and p._id not in seen:
                seen.add(p._id)
                stack.append(p)
    nodes.sort(key=lambda t: t._id, reverse=True)
    return nodes


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every grad-requiring leaf."""
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads = {loss._id: np.ones(loss.shape, dtype=loss.dtype)}
    for node in _tape(loss):
        g = grads.pop(node._id, None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent._id in grads:
                grads[parent._id] = grads[parent._id] + pg
            else:
                grads[parent._id] = pg
