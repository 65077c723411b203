"""Layers, parameter initialisation, SGD and learning-rate schedules."""

import math

import numpy as np

from . import tensor as T
from .errors import MissingGradient, ShapeMismatch, ZeroLengthSequence
from .tensor import Tensor


def init_params(shape, scheme, rng, sigma=0.02, fan_in=None):
    """Seeded draw of a parameter array.

    ``uniform_fanin`` draws from U(-1/sqrt(fan_in), 1/sqrt(fan_in)) where
    fan_in defaults to the product of all but the last dim.
    """
    shape = tuple(int(s) for s in shape)
    if any(s <= 0 for s in shape):
        raise ValueError(f"dims must be positive, got {shape}")
    if scheme == "zeros":
        return np.zeros(shape)
    if scheme == "ones":
        return np.ones(shape)
    if scheme == "normal":
        return rng.normal(0.0, sigma, size=shape)
    if scheme == "uniform_fanin":
        if fan_in is None:
            fan_in = int(np.prod(shape[:-1])) if len(shape) > 1 else shape[0]
        bound = 1.0 / math.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)
    raise ValueError(f"unknown init scheme {scheme!r}")


class Module:
    """Container that tracks parameters and sub-modules in definition order."""

    def __init__(self):
        self._params = {}
        self._schemes = {}
        self._children = {}

    def param(self, name, shape, scheme, rng, **kw):
        t = Tensor(init_params(shape, scheme, rng, **kw), requires_grad=True)
        self._params[name] = t
        self._schemes[name] = scheme
        return t

    def child(self, name, module):
        self._children[name] = module
        return module

    def named_parameters(self, prefix=""):
        for name, t in self._params.items():
            yield prefix + name, t
        for name, mod in self._children.items():
            yield from mod.named_parameters(prefix + name + ".")

    def named_schemes(self, prefix=""):
        for name, s in self._schemes.items():
            yield prefix + name, s
        for name, mod in self._children.items():
            yield from mod.named_schemes(prefix + name + ".")

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def state_dict(self):
        return {k: t.data.copy() for k, t in self.named_parameters()}

    def load_state_dict(self, state, strict=True):
        own = dict(self.named_parameters())
        if strict and set(own) != set(state):
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            raise KeyError(f"state mismatch; missing={missing} unexpected={extra}")
        for k, arr in state.items():
            if k not in own:
                continue
            if own[k].shape != arr.shape:
                raise ShapeMismatch(f"{k}: expected {own[k].shape}, got {arr.shape}")
            own[k].data = np.array(arr, dtype=np.float64)

    def zero_grad(self):
        for t in self.parameters():
            t.grad = None


class Linear(Module):
    def __init__(self, d_in, d_out, rng, bias=True):
        super().__init__()
        self.d_in, self.d_out = d_in, d_out
        self.weight = self.param("weight", (d_in, d_out), "uniform_fanin", rng)
        self.bias = self.param("bias", (d_out,), "zeros", rng) if bias else None

    def __call__(self, x):
        if x.shape[-1] != self.d_in:
            raise ShapeMismatch(f"linear expects last dim {self.d_in}, got {x.shape}")
        y = T.matmul(x, self.weight)
        return T.add_bias(y, self.bias) if self.bias is not None else y


def linear_forward(layer, x):
    return layer(x)


class LayerNorm(Module):
    def __init__(self, d, rng, eps=1e-5):
        super().__init__()
        self.eps = eps
        self.gamma = self.param("gamma", (d,), "ones", rng)
        self.beta = self.param("beta", (d,), "zeros", rng)

    def __call__(self, x):
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


class MultiHeadAttention(Module):
    """Scaled dot-product attention over ``h`` heads.

    Inputs are (B, n, d); unbatched (n, d) inputs are accepted and returned
    unbatched. The softmax weights of the last call are kept in ``last_attn``
    with shape (B, h, n_q, n_k).
    """

    def __init__(self, d, h, rng):
        super().__init__()
        if d % h:
            raise ShapeMismatch(f"width {d} not divisible by {h} heads")
        self.d, self.h, self.d_head = d, h, d // h
        self.wq = self.child("wq", Linear(d, d, rng))
        self.wk = self.child("wk", Linear(d, d, rng))
        self.wv = self.child("wv", Linear(d, d, rng))
        self.wo = self.child("wo", Linear(d, d, rng))
        self.last_attn = None

    def _split(self, x):
        b, n, _ = x.shape
        return x.reshape(b, n, self.h, self.d_head).transpose(0, 2, 1, 3)

    def __call__(self, q, k, v):
        squeeze = q.ndim == 2
        if squeeze:
            q, k, v = (T.reshape(t, (1,) + t.shape) for t in (q, k, v))
        if k.shape[1] == 0:
            raise ZeroLengthSequence("attention over an empty key sequence")
        if k.shape != v.shape or q.shape[0] != k.shape[0] or q.shape[-1] != self.d or k.shape[-1] != self.d:
            raise ShapeMismatch(f"attention shapes q={q.shape} k={k.shape} v={v.shape}")
        b, n_q, _ = q.shape
        qh = self._split(self.wq(q))
        kh = self._split(self.wk(k))
        vh = self._split(self.wv(v))
        scores = T.matmul(qh, kh.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(self.d_head))
        attn = T.softmax(scores)
        self.last_attn = attn.data
        ctx = T.matmul(attn, vh).transpose(0, 2, 1, 3).reshape(b, n_q, self.d)
        out = self.wo(ctx)
        return T.reshape(out, out.shape[1:]) if squeeze else out


def multihead_attention(layer, q, k, v):
    return layer(q, k, v)


class FeedForward(Module):
    def __init__(self, d, hidden, rng):
        super().__init__()
        self.fc1 = self.child("fc1", Linear(d, hidden, rng))
        self.fc2 = self.child("fc2", Linear(hidden, d, rng))

    def __call__(self, x):
        return self.fc2(T.gelu(self.fc1(x)))


class TransformerDecoderLayer(Module):
    """Self-attention, cross-attention, feed-forward; post-norm residual sublayers.

    With ``cross=False`` the cross-attention sublayer is absent and the layer
    is a plain encoder block.
    """

    def __init__(self, d, h, ffn_hidden, rng, cross=True):
        super().__init__()
        self.cross = cross
        self.self_attn = self.child("self_attn", MultiHeadAttention(d, h, rng))
        self.norm1 = self.child("norm1", LayerNorm(d, rng))
        if cross:
            self.cross_attn = self.child("cross_attn", MultiHeadAttention(d, h, rng))
            self.norm2 = self.child("norm2", LayerNorm(d, rng))
        self.ffn = self.child("ffn", FeedForward(d, ffn_hidden, rng))
        self.norm3 = self.child("norm3", LayerNorm(d, rng))

    def __call__(self, tokens, mem_keys=None, mem_values=None):
        x = self.norm1(tokens + self.self_attn(tokens, tokens, tokens))
        if self.cross:
            if mem_keys is None or mem_values is None:
                raise ShapeMismatch("cross-attention layer needs memory keys and values")
            x = self.norm2(x + self.cross_attn(x, mem_keys, mem_values))
        return self.norm3(x + self.ffn(x))


def decoder_layer_forward(layer, tokens, mem_keys, mem_values):
    return layer(tokens, mem_keys, mem_values)


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------


class SGD:
    """Momentum SGD: v <- mu*v + g + wd*theta; theta <- theta - lr*v."""

    def __init__(self, params, lr, momentum=0.0, weight_decay=0.0):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        if weight_decay < 0:
            raise ValueError("weight decay must be non-negative")
        self.params = list(params)
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self.buffers = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        if self.params and all(p.grad is None for p in self.params):
            raise MissingGradient("no parameter has a gradient; call backward() first")
        for p, buf in zip(self.params, self.buffers):
            g = np.zeros_like(p.data) if p.grad is None else p.grad
            buf *= self.momentum
            buf += g
            if self.weight_decay:
                buf += self.weight_decay * p.data
            p.data -= self.lr * buf
            p.grad = None


def clip_grad_norm(params, max_norm):
    """Rescale gradients in place so their global L2 norm is at most ``max_norm``."""
    grads = [p.grad for p in params if p.grad is not None]
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


def sgd_step(state, params=None):
    state.step()


class CosineLR:
    def __init__(self, lr0, total):
        self.lr0 = float(lr0)
        self.total = int(total)

    def __call__(self, t):
        t = min(max(t, 0), self.total)
        return self.lr0 * (1.0 + math.cos(math.pi * t / self.total)) / 2.0


class PlateauLR:
    """Divide the rate by ``1/factor`` once the monitored metric has not
    improved for more than ``patience`` consecutive epochs."""

    def __init__(self, lr0, patience=4, factor=0.1, mode="min", threshold=0.0):
        self.lr = float(lr0)
        self.patience = patience
        self.factor = factor
        self.mode = mode
        self.threshold = threshold
        self.best = math.inf if mode == "min" else -math.inf
        self.bad_epochs = 0

    def _improved(self, metric):
        if self.mode == "min":
            return metric < self.best - self.threshold
        return metric > self.best + self.threshold

    def step(self, metric):
        if self._improved(metric):
            self.best = metric
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
        if self.bad_epochs > self.patience:
            self.lr *= self.factor
            self.bad_epochs = 0
        return self.lr


def lr_schedule(kind, step_info):
    """Stateless convenience wrapper.

    cosine: ``step_info = (lr0, t, T)``.
    plateau: ``step_info = (lr0, metrics, patience)``; replays the metric
    stream and returns the rate after the last epoch.
    """
    if kind == "cosine":
        lr0, t, total = step_info
        return CosineLR(lr0, total)(t)
    if kind == "plateau":
        lr0, metrics, patience = step_info
        sched = PlateauLR(lr0, patience=patience)
        lr = lr0
        for m in metrics:
            lr = sched.step(m)
        return lr
    raise ValueError(f"unknown schedule {kind!r}")
