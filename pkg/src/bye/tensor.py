"""Minimal reverse-mode autodiff over numpy arrays.

Only what the point-cloud encoders and the contrastive loss need: dense
2-D/3-D tensors, a handful of layers, and Adam.  Data is float32 unless a
tensor is explicitly created with another float dtype (used by gradient
checks that evaluate the forward pass in float64).
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np

DTYPE = np.float32

_GRAD_ENABLED = True


def grad_enabled():
    return _GRAD_ENABLED


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data)
        dtype = DTYPE if dtype is None else dtype
        if arr.dtype != dtype:
            arr = arr.astype(dtype)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def backward(self):
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
        order = _topological_order(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

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

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _topological_order(root):
    order, seen = [], set()
    stack = [(root, False)]
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def _result(data, parents, backward, op):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    track = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out.requires_grad = track
    if track:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# elementwise arithmetic


def add(a, b):
    a, b = as_tensor(a), as_tensor(b, like=a)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), backward, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b, like=a)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b):
    if not isinstance(b, Tensor) and np.isscalar(b):
        a = as_tensor(a)
        s = float(b)

        def backward_scalar(g):
            return (g * s,)

        return _result(a.data * s, (a,), backward_scalar, "scale")
    a, b = as_tensor(a), as_tensor(b, like=a)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), backward, "mul")


def div(a, b):
    if not isinstance(b, Tensor) and np.isscalar(b):
        return mul(a, 1.0 / b)
    a, b = as_tensor(a), as_tensor(b, like=a)

    def backward(g):
        ga = g / b.data
        gb = -g * a.data / (b.data * b.data)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(a.data / b.data, (a, b), backward, "div")


def exp(x):
    out = np.exp(x.data)

    def backward(g):
        return (g * out,)

    return _result(out, (x,), backward, "exp")


def log(x):
    def backward(g):
        return (g / x.data,)

    return _result(np.log(x.data), (x,), backward, "log")


def relu(x):
    out = np.maximum(x.data, 0)

    def backward(g):
        return (g * (out > 0),)

    return _result(out, (x,), backward, "relu")


# reductions and shape ops


def tsum(x, axis=None, keepdims=False):
    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), backward, "sum")


def mean(x, axis=None, keepdims=False):
    n = x.data.size if axis is None else x.shape[axis]
    return mul(tsum(x, axis, keepdims), 1.0 / n)


def reshape(x, shape):
    def backward(g):
        return (g.reshape(x.shape),)

    return _result(x.data.reshape(shape), (x,), backward, "reshape")


def transpose(x):
    if x.ndim != 2:
        raise ValueError(f"transpose: expected 2-D tensor, got shape {x.shape}")

    def backward(g):
        return (g.T,)

    return _result(x.data.T, (x,), backward, "transpose")


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    ax = axis % tensors[0].ndim
    for t in tensors[1:]:
        other = tuple(s for i, s in enumerate(t.shape) if i != ax)
        ref = tuple(s for i, s in enumerate(tensors[0].shape) if i != ax)
        if other != ref:
            raise ValueError(f"concat: incompatible shapes {[t.shape for t in tensors]} on axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=ax))

    return _result(np.concatenate([t.data for t in tensors], axis=ax), tensors, backward, "concat")


def gather_rows(x, indices):
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size and (indices.min() < 0 or indices.max() >= x.shape[0]):
        raise IndexError(f"gather_rows: index out of range for {x.shape[0]} rows")

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, indices, g)
        return (gx,)

    return _result(x.data[indices], (x,), backward, "gather_rows")


def pick(x, rows, cols):
    """Select x[rows[i], cols[i]] into a 1-D tensor."""
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (rows, cols), g)
        return (gx,)

    return _result(x.data[rows, cols], (x,), backward, "pick")


def max_reduce(x, axis):
    """Max along ``axis``; the gradient goes to the first maximal entry."""
    arg = np.argmax(x.data, axis=axis)
    idx = np.expand_dims(arg, axis)
    out = np.take_along_axis(x.data, idx, axis=axis).squeeze(axis)

    def backward(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx, np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return _result(out, (x,), backward, "max_reduce")


def segment_max(x, offsets):
    """Row-wise max over contiguous row segments.

    ``offsets`` holds the start row of each segment (first entry 0); segment
    ``s`` spans ``offsets[s]:offsets[s + 1]``.  Used for per-cloud global
    pooling when clouds of different sizes are stacked along rows.
    """
    offsets = np.asarray(offsets, dtype=np.int64)
    n = x.shape[0]
    ends = np.append(offsets[1:], n)
    if np.any(ends <= offsets):
        raise ValueError("segment_max: empty segment")
    arg = np.empty((offsets.shape[0], x.shape[1]), dtype=np.int64)
    for s, (a, b) in enumerate(zip(offsets, ends)):
        arg[s] = x.data[a:b].argmax(axis=0) + a
    cols = np.broadcast_to(np.arange(x.shape[1]), arg.shape)
    vals = x.data[arg, cols]

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[arg, cols] = g
        return (gx,)

    return _result(vals, (x,), backward, "segment_max")


# linear algebra and layers


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b, like=a)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: shape mismatch {a.shape} @ {b.shape}")

    def backward(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _result(a.data @ b.data, (a, b), backward, "matmul")


def linear(x, weight, bias=None):
    """x @ weight + bias with weight shaped (in, out)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ValueError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ValueError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    out = x.data @ weight.data
    if bias is not None:
        out += bias.data

    def backward(g):
        gx = g @ weight.data.T if x.requires_grad else None
        gw = x.data.T @ g if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, backward, "linear")


def batch_norm(x, gamma, beta, running_mean, running_var, training, momentum=0.9, eps=1e-5):
    """Batch normalization over rows of an (N, C) tensor.

    In training mode the batch statistics are used and the running buffers
    (numpy arrays) are updated in place as ``momentum * old + (1 - momentum) * new``.
    """
    if x.ndim != 2 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ValueError(f"batch_norm: input {x.shape} vs gamma {gamma.shape} beta {beta.shape}")
    xd = x.data
    n = xd.shape[0]
    if training:
        if n < 2:
            raise ValueError("batch_norm: training mode needs at least 2 rows")
        mu = xd.mean(axis=0)
        centered = xd - mu
        var = np.einsum("ij,ij->j", centered, centered) / n
        running_mean *= momentum
        running_mean += (1 - momentum) * mu
        running_var *= momentum
        running_var += (1 - momentum) * var * (n / (n - 1))
    else:
        # eval mode is a fixed affine map: one multiply and one add over the data
        mu = running_mean.astype(xd.dtype)
        var = running_var
        centered = None
    inv_std = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    scale = gamma.data * inv_std
    if training:
        out = centered * scale
        out += beta.data
    else:
        out = xd * scale
        out += beta.data - mu * scale

    def backward(g):
        gb = g.sum(axis=0)
        c = centered if training else xd - mu
        gg = np.einsum("ij,ij->j", g, c) * inv_std
        gx = g * scale
        if training:
            # scale * (g - mean(g) - xhat * mean(g * xhat))
            gx -= (scale / n) * gb
            gx -= c * (scale * inv_std * gg / n)
        return gx, gg, gb

    return _result(out, (x, gamma, beta), backward, "batch_norm")


def l2_normalize(x, axis=-1):
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    if np.any(norm == 0):
        raise ValueError("l2_normalize: zero-norm vector, normalization undefined")
    y = x.data / norm

    def backward(g):
        return ((g - y * (g * y).sum(axis=axis, keepdims=True)) / norm,)

    return _result(y, (x,), backward, "l2_normalize")


def logsumexp(x, axis=-1, mask=None):
    """log(sum(exp(x))) along ``axis``, restricted to entries where ``mask`` is True."""
    xd = x.data
    if mask is None:
        mask = np.ones(xd.shape, dtype=bool)
    if not np.all(mask.any(axis=axis)):
        raise ValueError("logsumexp: a row has no unmasked entries")
    masked = np.where(mask, xd, -np.inf)
    m = masked.max(axis=axis, keepdims=True)
    e = np.where(mask, np.exp(masked - m), 0).astype(xd.dtype)
    s = e.sum(axis=axis, keepdims=True)
    out = (m + np.log(s)).squeeze(axis)
    soft = e / s

    def backward(g):
        return (np.expand_dims(g, axis) * soft,)

    return _result(out.astype(xd.dtype), (x,), backward, "logsumexp")


# optimizer


@dataclass
class AdamState:
    lr: float = 0.003
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params, grads, state):
    """One in-place Adam update with bias correction."""
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            continue
        if m.shape != p.data.shape:
            raise ValueError(f"adam_step: moment shape {m.shape} != parameter shape {p.data.shape}")
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        mhat = m / c1
        vhat = v / c2
        p.data -= (state.lr * mhat / (np.sqrt(vhat) + state.eps)).astype(p.data.dtype)
