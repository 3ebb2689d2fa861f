"""A small reverse-mode differentiation engine over numpy arrays.

Every op returns a new :class:`Tensor` that remembers its parents and a
closure mapping the output gradient to parent gradients.  ``backward`` walks
the graph in reverse topological order.  Broadcasting is supported; gradients
are summed back to each parent's shape.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np
from scipy.linalg import expm as _expm
from scipy.linalg import expm_frechet

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Build no graph inside the block (inference)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.name = name

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self, grad=None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topological(self)
        grads = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not _needs_grad(parent):
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # operator sugar
    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

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


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad or t._backward is not None


def _topological(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and _needs_grad(p):
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(_needs_grad(p) for p in parents):
        out._parents = parents
        out._backward = backward
    return out


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (undo numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ------------------------------------------------------------------ elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b), lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b), lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _make(
        out,
        (a, b),
        lambda g: (unbroadcast(g / b.data, a.shape), unbroadcast(-g * out / b.data, b.shape)),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    p = float(p)
    return _make(a.data**p, (a,), lambda g: (g * p * a.data ** (p - 1.0),))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (0.5 * g / out,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return _make(np.where(pos, a.data, 0.0), (a,), lambda g: (np.where(pos, g, 0.0),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """Tanh approximation of the Gaussian error linear unit."""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    th = np.tanh(inner)
    out = 0.5 * x * (1.0 + th)

    def back(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner),)

    return _make(out, (a,), back)


PHI1_CUTOFF = 1e-4


def phi1(a) -> Tensor:
    """``(1 - exp(-x)) / x`` with its series near 0; ``x >= 0`` expected."""
    a = as_tensor(a)
    x = a.data
    small = x < PHI1_CUTOFF
    safe = np.where(small, 1.0, x)
    em = np.exp(-safe)
    val = np.where(small, 1.0 - x / 2.0 + x * x / 6.0, -np.expm1(-safe) / safe)
    # d/dx: (e^{-x}(1 + x) - 1) / x^2 ; series -1/2 + x/3 - x^2/8
    der = np.where(small, -0.5 + x / 3.0 - x * x / 8.0, (em * (1.0 + safe) - 1.0) / (safe * safe))
    return _make(val, (a,), lambda g: (g * der,))


def where(cond, a, b) -> Tensor:
    cond = np.asarray(cond, dtype=bool)
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        np.where(cond, a.data, b.data),
        (a, b),
        lambda g: (unbroadcast(np.where(cond, g, 0.0), a.shape), unbroadcast(np.where(cond, 0.0, g), b.shape)),
    )


# ------------------------------------------------------------------ reductions & shape


def _expand_reduced(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    return _make(
        np.sum(a.data, axis=axis, keepdims=keepdims),
        (a,),
        lambda g: (np.array(_expand_reduced(g, a.shape, axis, keepdims)),),
    )


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else int(np.prod([a.shape[ax] for ax in np.atleast_1d(axis)]))
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    inv = np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def swapaxes(a, i: int, j: int) -> Tensor:
    a = as_tensor(a)
    return _make(np.swapaxes(a.data, i, j), (a,), lambda g: (np.swapaxes(g, i, j),))


def concat(tensors, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    cuts = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _make(np.concatenate([t.data for t in ts], axis=axis), tuple(ts), back)


def stack(tensors, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]

    def back(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(ts)))

    return _make(np.stack([t.data for t in ts], axis=axis), tuple(ts), back)


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)

    def back(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return _make(a.data[idx], (a,), back)


def take(a, indices, axis: int) -> Tensor:
    """Gather along one axis; the backward pass scatter-adds."""
    a = as_tensor(a)
    indices = np.asarray(indices, dtype=np.int64)
    axis = axis % a.ndim

    def back(g):
        out = np.zeros_like(a.data)
        moved = np.moveaxis(out, axis, 0)
        np.add.at(moved, indices, np.moveaxis(g, axis, 0))
        return (out,)

    return _make(np.take(a.data, indices, axis=axis), (a,), back)


def take_along(a, indices, axis: int) -> Tensor:
    """Per-row gather, ``np.take_along_axis`` semantics."""
    a = as_tensor(a)
    indices = np.asarray(indices, dtype=np.int64)
    axis = axis % a.ndim
    out_shape = list(np.broadcast_shapes(a.shape[:axis] + (1,) + a.shape[axis + 1 :], indices.shape))
    out_shape[axis] = indices.shape[axis]
    indices = np.broadcast_to(indices, tuple(out_shape))

    def back(g):
        out = np.zeros_like(a.data)
        idx = list(np.indices(indices.shape, sparse=True))
        idx[axis] = indices
        np.add.at(out, tuple(idx), g)
        return (out,)

    return _make(np.take_along_axis(a.data, indices, axis=axis), (a,), back)


def scatter_add(values, indices, size: int, axis: int = 0) -> Tensor:
    """Sum slices of ``values`` into ``size`` bins along ``axis`` (inverse of :func:`take`)."""
    v = as_tensor(values)
    indices = np.asarray(indices, dtype=np.int64)
    axis = axis % v.ndim
    shape = list(v.shape)
    shape[axis] = size
    out = np.zeros(shape)
    np.add.at(np.moveaxis(out, axis, 0), indices, np.moveaxis(v.data, axis, 0))
    return _make(out, (v,), lambda g: (np.take(g, indices, axis=axis),))


# ------------------------------------------------------------------ linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    A, B = a.data, b.data

    def back(g):
        if A.ndim == 1 and B.ndim == 1:
            return g * B, g * A
        if A.ndim == 1:
            ga = unbroadcast((B @ g[..., :, None])[..., 0], A.shape)
            gb = unbroadcast(A[:, None] * g[..., None, :], B.shape)
            return ga, gb
        if B.ndim == 1:
            ga = unbroadcast(g[..., :, None] * B, A.shape)
            gb = unbroadcast((np.swapaxes(A, -1, -2) @ g[..., :, None])[..., 0], B.shape)
            return ga, gb
        ga = unbroadcast(g @ np.swapaxes(B, -1, -2), A.shape)
        gb = unbroadcast(np.swapaxes(A, -1, -2) @ g, B.shape)
        return ga, gb

    return _make(A @ B, (a, b), back)


def expm(a) -> Tensor:
    """Matrix exponential of a square matrix; backward through the Frechet derivative."""
    a = as_tensor(a)
    out = _expm(a.data)
    return _make(out, (a,), lambda g: (expm_frechet(a.data.T, g, compute_expm=False),))


# ------------------------------------------------------------------ normalization & attention


def masked_softmax(x, mask=None, axis: int = -1) -> Tensor:
    """Softmax over ``axis`` restricted to ``mask``; fully masked rows give zeros."""
    x = as_tensor(x)
    data = x.data
    if mask is None:
        mask = np.ones(data.shape, dtype=bool)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), data.shape)
    z = np.where(mask, data, -np.inf)
    zmax = np.max(z, axis=axis, keepdims=True)
    zmax = np.where(np.isfinite(zmax), zmax, 0.0)
    e = np.where(mask, np.exp(np.where(mask, data, 0.0) - zmax), 0.0)
    s = e.sum(axis=axis, keepdims=True)
    y = e / np.where(s > 0, s, 1.0)

    def back(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), back)


def softmax(x, axis: int = -1) -> Tensor:
    return masked_softmax(x, None, axis)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return _make(out, (x,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def layer_norm(x, gamma=None, beta=None, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    x = as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    def back(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    out = _make(xhat, (x,), back)
    if gamma is not None:
        out = out * gamma
    if beta is not None:
        out = out + beta
    return out


# ------------------------------------------------------------------ scans


def affine_scan(a, b, x0) -> Tensor:
    """States of ``x_i = a_i * x_{i-1} + b_i`` for ``i = 1..K`` along axis -2.

    ``a`` and ``b`` are ``(..., K, d)`` and ``x0`` is ``(..., d)``.  The
    forward pass is the parallel prefix scan; the backward pass solves the
    adjoint recurrence ``lam_i = g_i + a_{i+1} lam_{i+1}`` with the same scan
    run in reverse.
    """
    from ..pscan import scan_affine

    a, b, x0 = as_tensor(a), as_tensor(b), as_tensor(x0)
    A = np.broadcast_to(a.data, np.broadcast_shapes(a.shape, b.shape))
    B = np.broadcast_to(b.data, A.shape)
    X0 = np.broadcast_to(x0.data, A.shape[:-2] + A.shape[-1:])
    K = A.shape[-2]
    if K == 0:
        return _make(np.zeros(A.shape), (a, b, x0), lambda g: (None, None, None))

    def to_scan(arr):  # (..., K, d) -> (K, prod(...)*d)
        return np.ascontiguousarray(np.moveaxis(arr, -2, 0).reshape(K, -1))

    def from_scan(arr):
        lead = A.shape[:-2] + A.shape[-1:]
        return np.moveaxis(arr.reshape((K,) + lead), 0, -2)

    pa, pb = scan_affine(to_scan(A), to_scan(B))
    X = from_scan(pa) * X0[..., None, :] + from_scan(pb)

    def back(g):
        # lam_i = g_i + a_{i+1} lam_{i+1}: a forward scan over the reversed sequence
        a_next = np.concatenate([A[..., 1:, :], np.ones_like(A[..., :1, :])], axis=-2)
        ra = to_scan(a_next)[::-1]
        rg = to_scan(g)[::-1]
        _, lam = scan_affine(np.ascontiguousarray(ra), np.ascontiguousarray(rg))
        lam = from_scan(np.ascontiguousarray(lam[::-1]))
        prev = np.concatenate([X0[..., None, :], X[..., :-1, :]], axis=-2)
        ga = lam * prev
        gx0 = A[..., 0, :] * lam[..., 0, :]
        return unbroadcast(ga, a.shape), unbroadcast(lam, b.shape), unbroadcast(gx0, x0.shape)

    return _make(X, (a, b, x0), back)


# ------------------------------------------------------------------ driver


def grad(f, params):
    """Gradients of the scalar ``f()`` with respect to each tensor in ``params``."""
    for p in params:
        p.grad = None
        p.requires_grad = True
    out = f()
    if not isinstance(out, Tensor):
        raise TypeError("f must return a Tensor")
    if out.size != 1:
        raise ValueError("grad needs a scalar-valued computation")
    out.backward()
    return [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]


def numeric_grad(f, params, eps: float = 1e-5):
    """Central finite differences of ``f()`` (scalar) with respect to ``params``."""
    out = []
    with no_grad():
        for p in params:
            g = np.zeros_like(p.data)
            flat = p.data.reshape(-1)
            gflat = g.reshape(-1)
            for i in range(flat.size):
                old = flat[i]
                flat[i] = old + eps
                fp = float(f().data)
                flat[i] = old - eps
                fm = float(f().data)
                flat[i] = old
                gflat[i] = (fp - fm) / (2 * eps)
            out.append(g)
    return out
