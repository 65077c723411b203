"""Dense float64 tensors with reverse-mode automatic differentiation.

Every op records its parents and a backward closure on the output tensor.
Node ids come from a global counter, so creation order is a valid
topological order; ``backward`` replays reachable nodes by descending id.

Only same-shape and scalar operands are accepted by the elementwise ops.
The few places that need a broadcast (bias add, batched weights in
``matmul``, ``expand``) are explicit ops with their own reductions in
backward.
"""

import contextlib
import itertools
import math

import numpy as np
from scipy.special import erf

from . import _kernels
from .errors import (
    AxisOutOfRange,
    DomainError,
    IndexOutOfRange,
    NonFiniteLoss,
    NonScalarLoss,
    ShapeMismatch,
)

_ids = itertools.count()
_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled():
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node_id", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node_id = next(_ids)
        self.op = "leaf"
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return reduce_sum(self, axis)

    def mean(self, axis=None):
        return reduce_mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def backward(self):
        backward(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, op, backward_fn):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.node_id = next(_ids)
    out.op = op
    track = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = track
    if track:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _is_scalar(x):
    return isinstance(x, (int, float, np.floating, np.integer))


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def _check_same(a, b, name):
    if a.shape != b.shape:
        raise ShapeMismatch(f"{name}: shapes {a.shape} and {b.shape} differ (no broadcasting)")


def add(a, b):
    if _is_scalar(b):
        c = float(b)
        return _make(a.data + c, (a,), "add_scalar", lambda g: (g,))
    _check_same(a, b, "add")
    return _make(a.data + b.data, (a, b), "add", lambda g: (g, g))


def sub(a, b):
    if _is_scalar(b):
        c = float(b)
        return _make(a.data - c, (a,), "sub_scalar", lambda g: (g,))
    _check_same(a, b, "sub")
    return _make(a.data - b.data, (a, b), "sub", lambda g: (g, -g))


def mul(a, b):
    if _is_scalar(b):
        c = float(b)
        return _make(a.data * c, (a,), "mul_scalar", lambda g: (g * c,))
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), "mul", lambda g: (g * bd, g * ad))


def div(a, b):
    """Pointwise quotient; a zero divisor yields inf/nan for ``check_finite`` to flag."""
    if _is_scalar(b):
        c = float(b)
        with np.errstate(divide="ignore", invalid="ignore"):
            out = a.data / c
        return _make(out, (a,), "div_scalar", lambda g: (g / c,))
    _check_same(a, b, "div")
    ad, bd = a.data, b.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = ad / bd

    def bw(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            return g / bd, -g * ad / (bd * bd)

    return _make(out, (a, b), "div", bw)


def neg(a):
    return _make(-a.data, (a,), "neg", lambda g: (-g,))


def elementwise(a, b, kind):
    ops = {"add": add, "sub": sub, "mul": mul, "div": div}
    if kind not in ops:
        raise ValueError(f"unknown elementwise kind {kind!r}")
    return ops[kind](a, b)


def check_finite(t, what="tensor"):
    data = t.data if isinstance(t, Tensor) else np.asarray(t)
    if not np.all(np.isfinite(data)):
        raise NonFiniteLoss(f"{what} contains non-finite values")
    return t


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------


def sigmoid(a):
    x = a.data
    # split by sign so neither branch overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    # saves the output only
    return _make(out, (a,), "sigmoid", lambda g: (g * out * (1.0 - out),))


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a):
    """Exact GELU, x * Phi(x)."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = x * cdf

    def bw(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf),)

    return _make(out, (a,), "gelu", bw)


def softmax(a):
    """Softmax over the last axis."""
    x = a.data
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, (a,), "softmax", bw)


def log(a):
    x = a.data
    if np.any(x <= 0):
        raise DomainError("log of non-positive entries")
    return _make(np.log(x), (a,), "log", lambda g: (g / x,))


def clip(a, lo, hi):
    """Clamp into [lo, hi]; gradient passes only where the input was inside."""
    x = a.data
    inside = (x >= lo) & (x <= hi)
    return _make(np.clip(x, lo, hi), (a,), "clip", lambda g: (g * inside,))


def activation(a, kind):
    fns = {"sigmoid": sigmoid, "gelu": gelu, "softmax_lastdim": softmax, "softmax": softmax, "log": log}
    if kind not in fns:
        raise ValueError(f"unknown activation {kind!r}")
    return fns[kind](a)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a, b):
    """Matrix product.

    Supported forms: ``(..., m, k) @ (k, n)`` with the right operand shared
    across leading dims, and ``(..., m, k) @ (..., k, n)`` with identical
    leading dims.
    """
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeMismatch(f"matmul needs rank >= 2, got {ad.shape} and {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeMismatch(f"matmul inner dims differ: {ad.shape} @ {bd.shape}")
    if bd.ndim == 2:
        out = ad @ bd

        def bw(g):
            ga = g @ bd.T
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return ga, gb

        return _make(out, (a, b), "matmul", bw)
    if ad.shape[:-2] != bd.shape[:-2]:
        raise ShapeMismatch(f"matmul batch dims differ: {ad.shape} @ {bd.shape}")
    out = ad @ bd

    def bw_batched(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return _make(out, (a, b), "bmm", bw_batched)


def add_bias(x, b):
    """x + b with b of shape x.shape[-1:] repeated over leading dims."""
    if b.shape != x.shape[-1:]:
        raise ShapeMismatch(f"bias {b.shape} does not match last dim of {x.shape}")
    lead = tuple(range(x.ndim - 1))
    return _make(x.data + b.data, (x, b), "add_bias", lambda g: (g, g.sum(axis=lead)))


def expand(a, n):
    """Stack ``n`` copies of ``a`` along a new leading axis."""
    out = np.broadcast_to(a.data, (n,) + a.shape).copy()
    return _make(out, (a,), "expand", lambda g: (g.sum(axis=0),))


# ---------------------------------------------------------------------------
# reductions and reindexing
# ---------------------------------------------------------------------------


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if not -ndim <= axis < ndim:
        raise AxisOutOfRange(f"axis {axis} out of range for rank {ndim}")
    return axis % ndim


def reduce_sum(a, axis=None):
    ax = _norm_axis(axis, a.ndim)
    shape = a.shape
    if ax is None:
        return _make(np.array(a.data.sum()), (a,), "sum", lambda g: (np.broadcast_to(g, shape).copy(),))
    out = a.data.sum(axis=ax)
    return _make(out, (a,), "sum", lambda g: (np.broadcast_to(np.expand_dims(g, ax), shape).copy(),))


def reduce_mean(a, axis=None):
    ax = _norm_axis(axis, a.ndim)
    shape = a.shape
    if ax is None:
        n = a.size
        return _make(np.array(a.data.mean()), (a,), "mean", lambda g: (np.broadcast_to(g / n, shape).copy(),))
    n = shape[ax]
    out = a.data.mean(axis=ax)
    return _make(out, (a,), "mean", lambda g: (np.broadcast_to(np.expand_dims(g, ax) / n, shape).copy(),))


def reduce(a, kind, axis=None):
    if kind == "sum":
        return reduce_sum(a, axis)
    if kind == "mean":
        return reduce_mean(a, axis)
    raise ValueError(f"unknown reduction {kind!r}")


def reshape(a, shape):
    shape = tuple(int(s) for s in shape)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeMismatch(f"cannot reshape {src} to {shape}") from exc
    return _make(out, (a,), "reshape", lambda g: (g.reshape(src),))


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(int(x) for x in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeMismatch(f"invalid permutation {axes} for rank {a.ndim}")
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), "transpose", lambda g: (np.transpose(g, inv),))


def gather_rows(table, ids):
    """Rows of a (V, d) table at integer ``ids`` of any shape -> ids.shape + (d,)."""
    ids = np.asarray(ids, dtype=np.int64)
    v = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= v):
        raise IndexOutOfRange(f"ids must lie in [0, {v})")
    out = table.data[ids]
    tshape = table.shape

    def bw(g):
        return (_kernels.scatter_add_rows(tshape[0], ids.reshape(-1), g.reshape(-1, tshape[1])),)

    return _make(out, (table,), "gather_rows", bw)


def stop_gradient(a):
    return Tensor(a.data)


# ---------------------------------------------------------------------------
# fused layers
# ---------------------------------------------------------------------------


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalise over the last axis, then scale and shift."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeMismatch("layer_norm gain/bias must match the last dim")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    lead = tuple(range(xd.ndim - 1))

    def bw(g):
        gg = g * gamma.data
        gx = inv * (gg - gg.mean(axis=-1, keepdims=True) - xhat * (gg * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(out, (x, gamma, beta), "layer_norm", bw)


def conv2d(x, w, stride=1, pad=0):
    """NHWC convolution with an HWIO kernel, no bias."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeMismatch("conv2d expects x (B,H,W,C) and w (kh,kw,Cin,Cout)")
    b, h, wd, c = x.shape
    kh, kw, cin, cout = w.shape
    if cin != c:
        raise ShapeMismatch(f"conv2d channels differ: input {c}, kernel {cin}")
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x.data
    hp, wp = xp.shape[1], xp.shape[2]
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    cols = _kernels.im2col(xp, kh, kw, stride, ho, wo)
    wmat = w.data.reshape(kh * kw * cin, cout)
    out = cols @ wmat

    def bw(g):
        g2 = g.reshape(-1, cout)
        gw = (cols.reshape(-1, kh * kw * cin).T @ g2).reshape(w.shape)
        gcols = (g2 @ wmat.T).reshape(b, ho, wo, kh * kw * cin)
        gxp = _kernels.col2im(gcols, hp, wp, c, kh, kw, stride)
        gx = gxp[:, pad:pad + h, pad:pad + wd, :] if pad else gxp
        return gx, gw

    return _make(out, (x, w), "conv2d", bw)


# ---------------------------------------------------------------------------
# backward pass and gradient checking
# ---------------------------------------------------------------------------


def backward(loss, retain_graph=False):
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable tracked tensor."""
    if loss.size != 1:
        raise NonScalarLoss(f"loss must be scalar, got shape {loss.shape}")
    if not np.isfinite(loss.data).all():
        raise NonFiniteLoss("loss is not finite")
    if not loss.requires_grad:
        return
    nodes = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if t.node_id in nodes:
            continue
        nodes[t.node_id] = t
        stack.extend(p for p in t._parents if p.requires_grad and p.node_id not in nodes)
    pending = {loss.node_id: np.ones_like(loss.data)}
    for nid in sorted(nodes, reverse=True):
        t = nodes[nid]
        g = pending.pop(nid, None)
        if g is None:
            continue
        t.grad = g if t.grad is None else t.grad + g
        if t._backward is None:
            continue
        grads = t._backward(g)
        for p, pg in zip(t._parents, grads):
            if not p.requires_grad or pg is None:
                continue
            prev = pending.get(p.node_id)
            pending[p.node_id] = pg if prev is None else prev + pg
        if not retain_graph:
            t._parents = ()
            t._backward = None


def check_grad(f, point, h=1e-5):
    """Max over coordinates of |g_ad - g_fd| / max(1, |g_fd|) for scalar ``f``.

    ``point`` is a Tensor (or a list of Tensors) with requires_grad set;
    ``f`` takes no arguments and reads the current values of ``point``.
    """
    points = point if isinstance(point, (list, tuple)) else [point]
    for p in points:
        p.grad = None
    loss = f()
    backward(loss)
    worst = 0.0
    for p in points:
        ad = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            with no_grad():
                fp = f().item()
            flat[i] = orig - h
            with no_grad():
                fm = f().item()
            flat[i] = orig
            fd = (fp - fm) / (2.0 * h)
            err = abs(ad.reshape(-1)[i] - fd) / max(1.0, abs(fd))
            worst = max(worst, err)
        p.grad = None
    return worst
