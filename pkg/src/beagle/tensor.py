"""Dense tensors with tape-based reverse-mode autodiff, backed by numpy.

Every op returns a new :class:`Tensor`.  When gradients are enabled and an
input requires grad, the output keeps references to its parents and a closure
mapping the output gradient to one gradient per parent.  ``backward`` walks
the reachable graph in reverse creation order, which is a valid reverse
topological order because parents always exist before their children.

The one exception to value semantics is :func:`write_rows`, which overwrites
rows of a buffer in place.  It records the overwritten rows on the tape so
that ``backward`` can roll the buffer back while it unwinds and restore it
afterwards.
"""

from __future__ import annotations

import contextlib
import itertools

import numpy as np

_creation = itertools.count()
_grad_enabled = True
_check_finite = False


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def set_finite_checks(enabled: bool) -> bool:
    """Raise ``FloatingPointError`` whenever an op produces NaN/Inf. Returns the old setting."""
    global _check_finite
    prev = _check_finite
    _check_finite = bool(enabled)
    return prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_seq", "_undo", "_redo")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self._seq = next(_creation)
        self._undo = None
        self._redo = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- autodiff ------------------------------------------------------
    def backward(self, grad=None) -> None:
        if not self.requires_grad:
            raise RuntimeError("backward() called on a tensor that is not on a tape")
        if grad is None:
            if self.data.size != 1:
                raise RuntimeError("backward() without an explicit gradient needs a scalar output")
            grad = np.ones_like(self.data)
        nodes = {}
        stack = [self]
        while stack:
            node = stack.pop()
            if id(node) in nodes:
                continue
            nodes[id(node)] = node
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in nodes:
                    stack.append(parent)
        order = sorted(nodes.values(), key=lambda n: n._seq, reverse=True)

        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        undone = []
        for node in order:
            g = grads.pop(id(node), None)
            if node._undo is not None:
                node._undo()
                undone.append(node)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            node.grad = g
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg
        for node in reversed(undone):
            node._redo()

    # -- operators -----------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a, b):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    @property
    def T(self):
        return transpose(self, None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    """Wrap operands; bare scalars/arrays adopt the dtype of the tensor operand."""
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, Tensor(np.asarray(b, dtype=a.dtype))
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return Tensor(np.asarray(a, dtype=b.dtype)), b
    return as_tensor(a), as_tensor(b)


def _raw(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def _make(data, parents, backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._seq = next(_creation)
    out._undo = None
    out._redo = None
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    if _check_finite and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite value produced by a forward op")
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise ---------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data / b.data, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def cast(a: Tensor, dtype) -> Tensor:
    """Change precision; the gradient is cast back to the input dtype."""
    dtype = np.dtype(dtype)
    if a.data.dtype == dtype:
        return a
    src = a.data.dtype
    return _make(a.data.astype(dtype), (a,), lambda g: (g.astype(src),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def silu(a: Tensor) -> Tensor:
    x = a.data
    s = 1.0 / (1.0 + np.exp(-x))

    def backward(g):
        return (g * (s * (1.0 + x * (1.0 - s))),)

    return _make(x * s, (a,), backward)


def gelu(a: Tensor) -> Tensor:
    """tanh approximation."""
    x = a.data
    c = np.sqrt(2.0 / np.pi)
    inner = c * (x + 0.044715 * x**3)
    t = np.tanh(inner)

    def backward(g):
        dinner = c * (1.0 + 3 * 0.044715 * x**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _make(0.5 * x * (1.0 + t), (a,), backward)


# -- reductions and shape ops ------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), backward)


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(tsum(a, axis, keepdims), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    orig = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(orig),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def getitem(a: Tensor, idx) -> Tensor:
    basic = _is_basic_index(idx)

    def backward(g):
        out = np.zeros_like(a.data)
        if basic:
            out[idx] = g
        else:
            np.add.at(out, idx, g)
        return (out,)

    data = a.data[idx]
    if basic:
        data = data.copy()
    return _make(data, (a,), backward)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors))
        )

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    return concat([reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors], axis)


# -- linear algebra ------------------------------------------------------

def _mm(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """``x @ w`` whose rows do not depend on how many rows are in the batch.

    A single-row product goes through BLAS gemv, which accumulates in a
    different order than gemm; duplicating the row keeps it on gemm.
    """
    if x.shape[-2] == 1 and x.shape[-1] > 0:
        return (np.concatenate([x, x], axis=-2) @ w)[..., :1, :]
    return x @ w


def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading dims."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")

    if b.ndim == 2 and a.ndim > 2:
        # activations times a weight matrix: one flat GEMM each way
        k = a.shape[-1]
        a2 = a.data.reshape(-1, k)

        def backward_flat(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ b.data.T).reshape(a.shape) if a.requires_grad else None
            gb = a.data.reshape(-1, k).T @ g2 if b.requires_grad else None
            return ga, gb

        return _make(_mm(a2, b.data).reshape(a.shape[:-1] + (b.shape[1],)), (a, b), backward_flat)

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(_mm(a.data, b.data), (a, b), backward)


# -- normalisation, softmax and attention pieces ---------------------------

def softmax_np(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax_np(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    y = softmax_np(a.data, axis)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (a,), backward)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    y = log_softmax_np(a.data, axis)

    def backward(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _make(y, (a,), backward)


def masked_softmax(a: Tensor, allowed: np.ndarray) -> Tensor:
    """Softmax over the last axis restricted to ``allowed`` entries.

    Disallowed entries get exactly zero weight; a row with nothing allowed
    is all zeros.
    """
    allowed = np.asarray(allowed, dtype=bool)
    z = np.where(allowed, a.data, -np.inf)
    m = z.max(axis=-1, keepdims=True, initial=-np.inf)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(z - m)
    s = e.sum(axis=-1, keepdims=True)
    y = np.divide(e, s, out=np.zeros_like(e), where=s > 0)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (a,), backward)


def rms_norm(a: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    x = a.data
    r = 1.0 / np.sqrt((x * x).mean(axis=-1, keepdims=True) + eps)
    xhat = x * r
    gdat = gain.data

    def backward(g):
        gx = ggain = None
        if a.requires_grad:
            gy = g * gdat
            gx = r * (gy - xhat * (gy * xhat).mean(axis=-1, keepdims=True))
        if gain.requires_grad:
            ggain = (g * xhat).reshape(-1, x.shape[-1]).sum(axis=0)
        return gx, ggain

    return _make(xhat * gdat, (a, gain), backward)


def rope_tables(positions, dim: int, base: float = 10000.0, dtype=np.float64):
    """cos/sin tables of shape ``[len(positions), dim // 2]``."""
    half = dim // 2
    inv = base ** (-np.arange(half, dtype=np.float64) / half)
    ang = np.asarray(positions, dtype=np.float64)[:, None] * inv[None, :]
    return np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)


def rope(a: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotary position encoding on the last axis (split-half convention)."""
    half = a.shape[-1] // 2
    x1, x2 = a.data[..., :half], a.data[..., half:]
    out = np.concatenate([x1 * cos - x2 * sin, x2 * cos + x1 * sin], axis=-1)

    def backward(g):
        g1, g2 = g[..., :half], g[..., half:]
        return (np.concatenate([g1 * cos + g2 * sin, g2 * cos - g1 * sin], axis=-1),)

    return _make(out, (a,), backward)


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids)

    def backward(g):
        out = np.zeros_like(table.data)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (out,)

    return _make(table.data[ids], (table,), backward)


# -- losses ------------------------------------------------------------------

def soft_cross_entropy(p, logits: Tensor) -> Tensor:
    """Per-row ``-sum_t p(t) log softmax(logits)(t)`` over the last axis.

    ``p`` is treated as a constant target; rows must sum to one within 1e-6.
    A 1-D input gives a 0-d result.
    """
    p = _raw(p)
    if p.shape != logits.shape:
        raise ValueError(f"target shape {p.shape} != logits shape {logits.shape}")
    mass = p.sum(axis=-1)
    if np.any(np.abs(mass - 1.0) > 1e-6) or np.any(p < 0):
        raise ValueError("target rows must be probability vectors")
    logq = log_softmax_np(logits.data)
    loss = -(p * logq).sum(axis=-1)

    def backward(g):
        g = np.asarray(g)[..., None]
        return (g * (np.exp(logq) * mass[..., None] - p),)

    return _make(np.asarray(loss), (logits,), backward)


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Per-row negative log-likelihood of integer ``targets``."""
    targets = np.asarray(targets)
    logq = log_softmax_np(logits.data)
    picked = np.take_along_axis(logq, targets[..., None], axis=-1)[..., 0]

    def backward(g):
        grad = np.exp(logq)
        np.put_along_axis(grad, targets[..., None], np.take_along_axis(grad, targets[..., None], -1) - 1.0, -1)
        return (np.asarray(g)[..., None] * grad,)

    return _make(-picked, (logits,), backward)


def smooth_l1(a, b) -> Tensor:
    """Mean Huber loss with threshold 1."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"smooth_l1 shape mismatch: {a.shape} vs {b.shape}")
    e = a.data - b.data
    ae = np.abs(e)
    n = max(e.size, 1)
    val = np.where(ae < 1.0, 0.5 * e * e, ae - 0.5).sum() / n

    def backward(g):
        d = np.where(ae < 1.0, e, np.sign(e)) * (g / n)
        return (d if a.requires_grad else None, -d if b.requires_grad else None)

    return _make(np.asarray(val, dtype=e.dtype), (a, b), backward)


# -- in-place buffer write -------------------------------------------------

def write_rows(buf: Tensor, index, values) -> Tensor:
    """Overwrite ``buf.data[index]`` with ``values`` in place.

    The returned tensor shares storage with ``buf``.  Gradient reaching the
    written slots flows to ``values``; the rest flows to ``buf``.  The
    overwritten contents are kept on the tape so backward can rewind.
    """
    values = as_tensor(values)
    storage = buf.data
    old = storage[index].copy()
    new = np.array(values.data, dtype=storage.dtype, copy=True)
    storage[index] = new

    def backward(g):
        gbuf = None
        if buf.requires_grad:
            gbuf = g.copy()
            gbuf[index] = 0
        return gbuf, (g[index] if values.requires_grad else None)

    out = _make(storage, (buf, values), backward)
    if out.requires_grad:
        def undo():
            storage[index] = old

        def redo():
            storage[index] = new

        out._undo = undo
        out._redo = redo
    return out
