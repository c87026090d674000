"""Small reverse-mode autodiff over numpy arrays.

Every op returns a new :class:`Tensor` holding its parents and a closure that
pushes the output gradient back to them. ``backward`` walks the graph in
reverse topological order. Only tensors that (transitively) depend on a
``requires_grad`` leaf keep a tape entry, so forward passes over frozen
weights (the EMA teacher) record nothing.
"""

from __future__ import annotations

import contextlib
import math
from collections import OrderedDict

import numpy as np

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    # operator sugar
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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / other)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)


def as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data, parents, backward):
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _accum(t, g):
    # grads are never mutated in place, so an incoming array can be stored as is
    if not t.requires_grad:
        return
    if g.dtype != t.data.dtype:
        g = g.astype(t.data.dtype)
    t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)

    def backward(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), backward)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)

    def backward(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), backward)


def mul(a, b):
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        c = b

        def backward_s(g):
            _accum(a, g * c)

        return _make(a.data * c, (a,), backward_s)
    _check_broadcast("mul", a, b)

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), backward)


def square(a):
    def backward(g):
        _accum(a, 2.0 * a.data * g)

    return _make(a.data * a.data, (a,), backward)


def exp(a):
    y = np.exp(a.data)

    def backward(g):
        _accum(a, g * y)

    return _make(y, (a,), backward)


def log(a):
    def backward(g):
        _accum(a, g / a.data)

    return _make(np.log(a.data), (a,), backward)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a):
    """GELU, tanh form."""
    x = a.data
    # in-place arithmetic keeps the number of full-size temporaries down
    th = x * x
    th *= 0.044715
    th += 1.0
    th *= x
    th *= _GELU_C
    np.tanh(th, out=th)
    y = th + 1.0
    y *= x
    y *= 0.5

    def backward(g):
        # d/dx = 0.5 (1 + th) + 0.5 x (1 - th^2) C (1 + 3 * 0.044715 x^2)
        du = x * x
        du *= 3 * 0.044715
        du += 1.0
        du *= _GELU_C
        du *= x
        sech2 = th * th
        np.subtract(1.0, sech2, out=sech2)
        du *= sech2
        du += th
        du += 1.0
        du *= 0.5
        du *= g
        _accum(a, du)

    return _make(y, (a,), backward)


def dropout(a, p, rng, train):
    """Inverted dropout; identity when ``train`` is false or ``p`` is 0."""
    if not train or p <= 0.0:
        return a
    if p >= 1.0:
        raise ValueError("dropout rate must be < 1")
    keep = (rng.random(a.shape) >= p).astype(a.dtype) / (1.0 - p)

    def backward(g):
        _accum(a, g * keep)

    return _make(a.data * keep, (a,), backward)


# ------------------------------------------------------------------ reductions


def sum_(a, axis=None, keepdims=False):
    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.shape))

    return _make(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), backward)


def mean(a, axis=None, keepdims=False):
    if axis is None:
        n = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[i] for i in axes]))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g / n, a.shape))

    return _make(np.mean(a.data, axis=axis, keepdims=keepdims), (a,), backward)


# ------------------------------------------------------------------- structure


def reshape(a, shape):
    try:
        y = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {tuple(shape)}") from None

    def backward(g):
        _accum(a, g.reshape(a.shape))

    return _make(y, (a,), backward)


def transpose(a, axes):
    axes = tuple(axes) if axes else tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))

    def backward(g):
        _accum(a, g.transpose(inv))

    return _make(a.data.transpose(axes), (a,), backward)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _accum(t, piece)

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def slice_axis(a, start, stop, axis=-1):
    """``a[..., start:stop, ...]`` along ``axis``."""
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def backward(g):
        full = np.zeros_like(a.data)
        full[index] = g
        _accum(a, full)

    return _make(a.data[index], (a,), backward)


def _scatter_rows(n_rows, idx, g):
    """Sum rows of ``g`` (n, d) into an (n_rows, d) array at positions ``idx``."""
    out = np.zeros((n_rows, g.shape[-1]), dtype=g.dtype)
    np.add.at(out, idx, g)
    return out


def embedding(table, ids):
    """Row lookup ``table[ids]``; ``ids`` is an integer array of any shape."""
    ids = np.asarray(ids)
    if table.ndim != 2:
        raise ShapeError(f"embedding: table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(
            f"embedding: ids out of range [0, {table.shape[0]}) for table {table.shape}"
        )

    def backward(g):
        flat = g.reshape(-1, table.shape[1])
        _accum(table, _scatter_rows(table.shape[0], ids.reshape(-1), flat))

    return _make(table.data[ids], (table,), backward)


def gather_rows(x, idx):
    """Per-batch row gather: ``out[b, j] = x[b, idx[b, j]]`` for x of shape (B, T, d)."""
    idx = np.asarray(idx)
    if x.ndim != 3 or idx.ndim != 2 or idx.shape[0] != x.shape[0]:
        raise ShapeError(f"gather_rows: incompatible shapes {x.shape} and {idx.shape}")
    B, T, d = x.shape
    flat = (idx + (np.arange(B) * T)[:, None]).reshape(-1)

    def backward(g):
        _accum(x, _scatter_rows(B * T, flat, g.reshape(-1, d)).reshape(B, T, d))

    return _make(x.data.reshape(B * T, d)[flat].reshape(B, idx.shape[1], d), (x,), backward)


# ---------------------------------------------------------------------- linear


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if b.ndim == 2:
        # fold leading axes: one large GEMM beats numpy's batched loop
        k, n = b.shape
        a2 = a.data.reshape(-1, k)
        y = (a2 @ b.data).reshape(a.shape[:-1] + (n,))
    else:
        y = a.data @ b.data

    def backward(g):
        if b.ndim == 2:
            g2 = g.reshape(-1, g.shape[-1])
            if a.requires_grad:
                _accum(a, (g2 @ b.data.T).reshape(a.shape))
            if b.requires_grad:
                _accum(b, a.data.reshape(-1, b.shape[0]).T @ g2)
            return
        if a.requires_grad:
            _accum(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _make(y, (a, b), backward)


def linear(x, weight, bias=None):
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


# ------------------------------------------------------------- normalizations


def layer_norm(a, gamma, beta, eps=1e-6):
    d = a.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: input {a.shape} vs scale {gamma.shape}/shift {beta.shape}")
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def backward(g):
        if gamma.requires_grad:
            _accum(gamma, (g * xhat).reshape(-1, d).sum(axis=0))
        if beta.requires_grad:
            _accum(beta, g.reshape(-1, d).sum(axis=0))
        if a.requires_grad:
            gh = g * gamma.data
            ga = inv * (
                gh - gh.mean(axis=-1, keepdims=True)
                - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
            )
            _accum(a, ga)

    return _make(xhat * gamma.data + beta.data, (a, gamma, beta), backward)


def softmax(a):
    x = a.data
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        _accum(a, y * (g - (g * y).sum(axis=-1, keepdims=True)))

    return _make(y, (a,), backward)


def log_softmax(a):
    x = a.data
    z = x - x.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse

    def backward(g):
        _accum(a, g - np.exp(y) * g.sum(axis=-1, keepdims=True))

    return _make(y, (a,), backward)


def l2_normalize(a, eps=1e-12):
    x = a.data
    norm = np.maximum(np.sqrt((x * x).sum(axis=-1, keepdims=True)), eps)
    y = x / norm

    def backward(g):
        _accum(a, (g - y * (g * y).sum(axis=-1, keepdims=True)) / norm)

    return _make(y, (a,), backward)


def attention(q, k, v):
    """Scaled dot-product attention over (..., T, dh) inputs, built from primitives."""
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"attention: q {q.shape}, k {k.shape}, v {v.shape}")
    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = mul(matmul(q, transpose(k, _swap_last(k.ndim))), scale)
    return matmul(softmax(scores), v)


def _swap_last(n):
    axes = list(range(n))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


# -------------------------------------------------------------------- backward


def _topo(root):
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def reachable_leaves(root):
    """Leaf tensors whose gradient the tape can reach from ``root``."""
    return [t for t in _topo(root) if not t._parents]


def backward(loss, params=None):
    """Populate ``.grad`` of every requires-grad tensor reachable from ``loss``.

    If a :class:`ParamStore` is given, its grads are reset first, so
    parameters the loss does not reach end up with zero gradient.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if params is not None:
        for t in params.values():
            t.grad = None
    if not loss.requires_grad:
        if params is not None:
            params.zero_grad()
        return
    order = _topo(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    # free intermediate buffers; keep leaf grads
    for node in order:
        if node._parents:
            node.grad = None
            node._parents = ()
            node._backward = None
    if params is not None:
        for t in params.values():
            if t.grad is None:
                t.grad = np.zeros_like(t.data)


class ParamStore(OrderedDict):
    """Named parameters in insertion order."""

    def add(self, name, data, dtype=np.float64):
        if name in self:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(data, dtype=dtype), requires_grad=True, name=name)
        self[name] = t
        return t

    def zero_grad(self):
        for t in self.values():
            t.grad = np.zeros_like(t.data)

    def grads(self):
        return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in self.values()]

    def num_params(self):
        return sum(t.data.size for t in self.values())

    def astype(self, dtype):
        for t in self.values():
            t.data = t.data.astype(dtype)
            t.grad = None
        return self


# ------------------------------------------------------------------ grad check


class GradCheckError(FloatingPointError):
    pass


def grad_check(f, point, h=1e-4):
    """Max relative error between the tape gradient of scalar ``f`` and finite differences.

    ``f`` takes a Tensor and returns a scalar Tensor. The numeric gradient is
    the Richardson extrapolation of central differences at steps ``h`` and
    ``h/2``, which cancels the h^2 truncation term; without it, steep spots
    (layer norm over two nearly equal entries, say) fail on the estimate
    rather than on the gradient. The error at each coordinate is
    ``|analytic - numeric| / max(1, |analytic|)``.
    """
    x0 = np.array(point, dtype=np.float64)
    if not np.all(np.isfinite(x0)):
        bad = int(np.flatnonzero(~np.isfinite(x0.ravel()))[0])
        raise GradCheckError(f"non-finite input at coordinate {bad}")
    x = Tensor(x0.copy(), requires_grad=True)
    out = f(x)
    backward(out)
    analytic = x.grad if x.grad is not None else np.zeros_like(x0)

    numeric = np.zeros(x0.size)
    flat = x0.ravel()
    for i in range(flat.size):
        vals = []
        for step in (h, -h, h / 2, -h / 2):
            xp = flat.copy()
            xp[i] += step
            with no_grad():
                v = float(f(Tensor(xp.reshape(x0.shape))).data)
            if not math.isfinite(v):
                raise GradCheckError(f"non-finite function value at coordinate {i}")
            vals.append(v)
        d_h = (vals[0] - vals[1]) / (2 * h)
        d_half = (vals[2] - vals[3]) / h
        numeric[i] = (4 * d_half - d_h) / 3
    a = analytic.ravel()
    if not np.all(np.isfinite(a)):
        bad = int(np.flatnonzero(~np.isfinite(a))[0])
        raise GradCheckError(f"non-finite analytic gradient at coordinate {bad}")
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - numeric) / np.maximum(1.0, np.abs(a))))
