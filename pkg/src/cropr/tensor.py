"""Dense tensors with eager reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array. Operations on tensors that require
gradients record a node holding the parents and a closure mapping the
output gradient to per-parent gradients. :meth:`Tensor.backward` walks the
recorded graph once in reverse topological order and accumulates into the
``grad`` buffers of leaf tensors.

Shapes must match exactly, with two exceptions: ``add``/``sub`` accept a
right operand whose shape is a trailing suffix of the left one (bias and
positional-embedding adds), and ``matmul`` accepts a 2-D right operand that
is shared across the batch dimensions of the left one (weights).
"""
from __future__ import annotations

import contextlib
import math
import threading

import numpy as np

from . import kernels
from .errors import ContractError, GraphError, ShapeError

_DEFAULT_DTYPE = np.float64
_state = threading.local()


def get_default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype):
    """Set the float dtype for newly created tensors (float64 or float32)."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float64, np.float32):
        raise ValueError("only float64 and float32 are supported")
    _DEFAULT_DTYPE = dtype


@contextlib.contextmanager
def default_dtype(dtype):
    prev = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


def is_grad_enabled():
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_released")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype.kind != "f":
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = ()
        self._backward = None
        self._released = False

    # -- construction helpers -------------------------------------------------
    @classmethod
    def zeros(cls, *shape, requires_grad=False, name=None):
        return cls(np.zeros(shape, dtype=_DEFAULT_DTYPE), requires_grad, name=name)

    @classmethod
    def ones(cls, *shape, requires_grad=False, name=None):
        return cls(np.ones(shape, dtype=_DEFAULT_DTYPE), requires_grad, name=name)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self):
        return self._backward is None

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return len(self.data)

    # -- operators ------------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ShapeError("division by a tensor is not supported; use scale()")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self)

    # -- autodiff -------------------------------------------------------------
    def backward(self, grad=None):
        """Populate ``grad`` on every leaf reachable from this scalar.

        The recorded graph is released afterwards; a second call on the same
        output raises :class:`GraphError`.
        """
        if self._released:
            raise GraphError("backward() already ran on this graph; rebuild it with a new forward pass")
        if grad is None:
            if self.data.size != 1:
                raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            self._released = True
            return
        order = _topological_order(self)
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        for node in order:
            if node._backward is not None:
                node._parents = ()
                node._backward = None
                node._released = True
        self._released = True


def _topological_order(root):
    order = []
    seen = {id(root)}
    stack = [(root, iter(root._parents))]
    while stack:
        node, it = stack[-1]
        nxt = None
        for p in it:
            if p.requires_grad and id(p) not in seen:
                nxt = p
                break
        if nxt is None:
            stack.pop()
            order.append(node)
        else:
            seen.add(id(nxt))
            stack.append((nxt, iter(nxt._parents)))
    return order


def _as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=_DEFAULT_DTYPE))


def _result(data, parents, backward):
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _sum_to(g, shape):
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    return g


# -- elementwise --------------------------------------------------------------
def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if b.ndim > a.ndim or a.shape[a.ndim - b.ndim:] != b.shape:
        raise ShapeError(f"add: {a.shape} and {b.shape} (only suffix/bias broadcasting is allowed)")
    b_shape = b.shape

    def backward(g):
        return g, _sum_to(g, b_shape)

    return _result(a.data + b.data, (a, b), backward)


def sub(a, b):
    return add(a, neg(_as_tensor(b)))


def neg(a):
    return _result(-a.data, (a,), lambda g: (-g,))


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes must match exactly, got {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        return g * bd, g * ad

    return _result(ad * bd, (a, b), backward)


def scale(a, c):
    """Multiply by a constant (python scalar or numpy array broadcastable to ``a``)."""
    c = np.asarray(c, dtype=a.data.dtype) if not np.isscalar(c) else c
    return _result(a.data * c, (a,), lambda g: (g * c,))


def exp(a):
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a):
    ad = a.data
    return _result(np.log(ad), (a,), lambda g: (g / ad,))


def relu(a):
    mask = a.data > 0
    return _result(a.data * mask, (a,), lambda g: (g * mask,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a):
    """GELU, tanh approximation."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _result(out, (a,), backward)


def tanh(a):
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),))


def stop_gradient(a):
    """Identity in the forward pass; contributes exactly zero gradient to ``a``."""
    return Tensor(a.data)


# -- reductions and shape ops -------------------------------------------------
def sum_(a, axis=None, keepdims=False):
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def mean(a, axis=None, keepdims=False):
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if np.isscalar(axis) else axis
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return scale(sum_(a, axis, keepdims), 1.0 / n)


def reshape(a, shape):
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None):
    if axes is None:
        if a.ndim < 2:
            raise ShapeError("transpose needs at least 2 dimensions")
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def repeat_batch(a, batch):
    """Tile a tensor with leading dimension 1 to ``batch`` copies."""
    if a.shape[0] != 1:
        raise ShapeError(f"repeat_batch expects a leading dimension of 1, got {a.shape}")
    return _result(np.repeat(a.data, batch, axis=0), (a,), lambda g: (g.sum(axis=0, keepdims=True),))


def _check_rows(idx, num_rows):
    idx = kernels.as_index(idx)
    if idx.size and (idx.min() < 0 or idx.max() >= num_rows):
        raise IndexError(f"row index out of range for {num_rows} rows")
    return idx


def gather_rows(x, idx):
    """Select rows along the token axis.

    ``x`` is (M, D) with ``idx`` (K,), or (B, M, D) with ``idx`` (B, K).
    The backward pass routes gradient to the selected rows and zeros
    elsewhere (repeated indices accumulate).
    """
    unbatched = x.ndim == 2
    xd = x.data[None] if unbatched else x.data
    idx = np.asarray(idx)
    idx2 = idx[None] if unbatched else idx
    if idx2.ndim != 2 or idx2.shape[0] != xd.shape[0]:
        raise ShapeError(f"gather_rows: index shape {idx.shape} does not fit tensor {x.shape}")
    m = xd.shape[1]
    idx2 = _check_rows(idx2, m)
    xd = np.ascontiguousarray(xd)
    out = kernels.gather_rows(xd, idx2)

    def backward(g):
        g = np.ascontiguousarray(g[None] if unbatched else g)
        gx = kernels.scatter_add_rows(g, idx2, m)
        return (gx[0] if unbatched else gx,)

    return _result(out[0] if unbatched else out, (x,), backward)


def scatter_rows(x, idx, num_rows):
    """Place the rows of ``x`` at ``idx`` inside a zero tensor with ``num_rows`` rows."""
    unbatched = x.ndim == 2
    xd = x.data[None] if unbatched else x.data
    idx = np.asarray(idx)
    idx2 = idx[None] if unbatched else idx
    if idx2.shape != xd.shape[:2]:
        raise ShapeError(f"scatter_rows: index shape {idx.shape} does not fit tensor {x.shape}")
    idx2 = _check_rows(idx2, num_rows)
    srt = np.sort(idx2, axis=1)
    if srt.shape[1] > 1 and np.any(srt[:, 1:] == srt[:, :-1]):
        raise ContractError("scatter_rows: duplicate destination rows")
    out = kernels.scatter_add_rows(np.ascontiguousarray(xd), idx2, num_rows)

    def backward(g):
        g = np.ascontiguousarray(g[None] if unbatched else g)
        gx = kernels.gather_rows(g, idx2)
        return (gx[0] if unbatched else gx,)

    return _result(out[0] if unbatched else out, (x,), backward)


# -- linear algebra -----------------------------------------------------------
def matmul(a, b):
    """(..., m, k) @ (..., k, n); ``b`` may instead be a shared (k, n) matrix."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    shared = b.ndim == 2 and a.ndim > 2
    if not shared and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if shared:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _result(ad @ bd, (a, b), backward)


def linear(x, weight, bias=None):
    """``x @ weight + bias`` with ``weight`` stored as (in, out)."""
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input width {x.shape[-1]} != weight rows {weight.shape[0]}")
    xd, wd = x.data, weight.data
    out = xd @ wd
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gx = g @ wd.T if x.requires_grad else None
        gw = xd.reshape(-1, xd.shape[-1]).T @ g.reshape(-1, g.shape[-1]) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        gb = g.reshape(-1, g.shape[-1]).sum(axis=0)
        return gx, gw, gb

    return _result(out, parents, backward)


def softmax(x, axis=-1):
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (x,), backward)


def layer_norm(x, gamma, beta, eps=1e-6):
    """Normalise over the last axis, then apply ``gamma`` / ``beta``."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        gxhat = g * gamma.data
        n = xd.shape[-1]
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).sum(axis=-1, keepdims=True) / n)
        flat_g = g.reshape(-1, n)
        ggamma = (flat_g * xhat.reshape(-1, n)).sum(axis=0)
        gbeta = flat_g.sum(axis=0)
        return gx, ggamma, gbeta

    return _result(out, (x, gamma, beta), backward)


# -- losses -------------------------------------------------------------------
def cross_entropy(logits, labels, ignore_index=None):
    """Softmax cross-entropy averaged over all non-ignored positions.

    ``logits`` is (..., C) and ``labels`` the matching integer array (...).
    If every position is ignored the loss is 0 with zero gradient.
    """
    labels = np.asarray(labels)
    if labels.shape != logits.shape[:-1]:
        raise ShapeError(f"cross_entropy: labels {labels.shape} vs logits {logits.shape}")
    c = logits.shape[-1]
    flat = logits.data.reshape(-1, c)
    lab = labels.reshape(-1).astype(np.int64)
    valid = np.ones(lab.shape, dtype=bool) if ignore_index is None else lab != ignore_index
    if np.any((lab[valid] < 0) | (lab[valid] >= c)):
        raise IndexError(f"label out of range for {c} classes")
    count = int(valid.sum())
    z = flat - flat.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    safe = np.where(valid, lab, 0)
    nll = lse - z[np.arange(len(lab)), safe]
    loss = (nll * valid).sum() / count if count else 0.0
    shape = logits.shape

    def backward(g):
        if not count:
            return (np.zeros(shape, dtype=flat.dtype),)
        p = np.exp(z - lse[:, None])
        p[np.arange(len(lab)), safe] -= 1.0
        p *= (valid / count)[:, None]
        return ((p * g).reshape(shape),)

    return _result(np.asarray(loss, dtype=flat.dtype), (logits,), backward)


def binary_cross_entropy_with_logits(logits, targets):
    """Mean sigmoid binary cross-entropy over every element."""
    t = np.asarray(targets, dtype=logits.dtype)
    if t.shape != logits.shape:
        raise ShapeError(f"bce: targets {t.shape} vs logits {logits.shape}")
    x = logits.data
    # log(1 + exp(-|x|)) formulation is stable for large |x|
    per = np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x)))
    n = x.size

    def backward(g):
        sig = 0.5 * (1.0 + np.tanh(0.5 * x))
        return (g * (sig - t) / n,)

    return _result(np.asarray(per.mean(), dtype=x.dtype), (logits,), backward)
