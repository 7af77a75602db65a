"""Dense float64 layers with hand-written backward passes.

Every layer follows the same protocol::

    out, cache = layer.forward(*inputs)
    grads_wrt_inputs = layer.backward(dout, cache)

``backward`` accumulates into ``Parameter.grad`` and returns the gradients
of its tensor inputs. Caches are plain tuples, so a layer instance can be
reused several times inside one forward pass.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from . import kernels


class DimensionError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


@dataclass
class Parameter:
    value: np.ndarray
    grad: np.ndarray = field(init=False)
    velocity: np.ndarray = field(init=False)

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.velocity = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad[...] = 0.0


@dataclass(frozen=True)
class AttentionConfig:
    model_dim: int
    num_heads: int = 1
    include_residual: bool = True

    def __post_init__(self):
        if self.model_dim < 1 or self.num_heads < 1:
            raise DimensionError("model_dim and num_heads must be positive")
        if self.model_dim % self.num_heads:
            raise DimensionError(
                f"model_dim {self.model_dim} not divisible by num_heads {self.num_heads}")


def uniform_init(rng, fan_in, shape):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


# -- primitives ---------------------------------------------------------------

def matmul(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def matmul_backward(dc, a, b):
    return dc @ b.T, a.T @ dc


def sigmoid(x):
    return kernels.sigmoid(np.asarray(x, dtype=np.float64))


def sigmoid_backward(dy, y):
    return dy * y * (1.0 - y)


def softmax_rows(x, mask=None):
    """Softmax over the last axis. ``mask`` (broadcastable, bool) keeps True entries."""
    x = np.asarray(x, dtype=np.float64)
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    m = np.max(x, axis=-1, keepdims=True)
    ex = np.exp(x - m)
    return ex / np.sum(ex, axis=-1, keepdims=True)


def softmax_backward(dp, p):
    return p * (dp - np.sum(dp * p, axis=-1, keepdims=True))


_SQRT_2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x):
    return 0.5 * x * (1.0 + erf(x / _SQRT_2))


def gelu_grad(x):
    cdf = 0.5 * (1.0 + erf(x / _SQRT_2))
    return cdf + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def relu(x):
    return np.maximum(x, 0.0)


def relu_grad(x):
    return (x > 0).astype(np.float64)


ACTIVATIONS = {"gelu": (gelu, gelu_grad), "relu": (relu, relu_grad)}


# -- layers -------------------------------------------------------------------

class Module:
    """Minimal parameter container; children are discovered by attribute."""

    def __init__(self):
        self.params: dict[str, Parameter] = {}

    def children(self):
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix=""):
        for name, p in self.params.items():
            yield prefix + name, p
        for name, child in self.children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()


class Linear(Module):
    def __init__(self, d_in, d_out, rng, bias=True):
        super().__init__()
        self.d_in, self.d_out = d_in, d_out
        self.params["weight"] = Parameter(uniform_init(rng, d_in, (d_in, d_out)))
        if bias:
            self.params["bias"] = Parameter(uniform_init(rng, d_in, (d_out,)))

    def forward(self, x):
        if x.shape[-1] != self.d_in:
            raise DimensionError(f"Linear expects last dim {self.d_in}, got {x.shape}")
        y = x @ self.params["weight"].value
        if "bias" in self.params:
            y = y + self.params["bias"].value
        return y, x

    def backward(self, dy, x):
        w = self.params["weight"]
        w.grad += x.reshape(-1, self.d_in).T @ dy.reshape(-1, self.d_out)
        if "bias" in self.params:
            self.params["bias"].grad += dy.reshape(-1, self.d_out).sum(axis=0)
        return dy @ w.value.T


class MLP(Module):
    """linear -> activation -> linear."""

    def __init__(self, d_in, d_hidden, d_out, rng, activation="gelu"):
        super().__init__()
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.activation = activation
        self.fc1 = Linear(d_in, d_hidden, rng)
        self.fc2 = Linear(d_hidden, d_out, rng)

    def forward(self, x):
        act, _ = ACTIVATIONS[self.activation]
        h, c1 = self.fc1.forward(x)
        a = act(h)
        y, c2 = self.fc2.forward(a)
        return y, (c1, h, c2)

    def backward(self, dy, cache):
        c1, h, c2 = cache
        _, act_grad = ACTIVATIONS[self.activation]
        da = self.fc2.backward(dy, c2)
        return self.fc1.backward(da * act_grad(h), c1)


class MultiHeadAttention(Module):
    """Scaled dot-product attention with per-head Q/K/V and an output projection.

    ``forward(xq, xk, xv, mask=None)``; ``mask`` is a boolean (A, B) array of
    allowed query/key pairs. The residual (``xq`` added to the output) is
    applied only when ``cfg.include_residual`` is set.
    """

    def __init__(self, cfg: AttentionConfig, rng):
        super().__init__()
        self.cfg = cfg
        d = cfg.model_dim
        self.q = Linear(d, d, rng)
        self.k = Linear(d, d, rng)
        self.v = Linear(d, d, rng)
        self.o = Linear(d, d, rng)

    def _split(self, x):
        h = self.cfg.num_heads
        return x.reshape(x.shape[0], h, -1).transpose(1, 0, 2)

    @staticmethod
    def _merge(x):
        return x.transpose(1, 0, 2).reshape(x.shape[1], -1)

    def forward(self, xq, xk=None, xv=None, mask=None):
        xk = xq if xk is None else xk
        xv = xk if xv is None else xv
        d = self.cfg.model_dim
        if xq.shape[1] != d or xk.shape[1] != d or xv.shape[1] != d:
            raise DimensionError(
                f"attention dim {d} vs inputs {xq.shape}, {xk.shape}, {xv.shape}")
        if xk.shape[0] != xv.shape[0]:
            raise DimensionError("key and value lengths differ")
        q, cq = self.q.forward(xq)
        k, ck = self.k.forward(xk)
        v, cv = self.v.forward(xv)
        qh, kh, vh = self._split(q), self._split(k), self._split(v)
        scale = 1.0 / math.sqrt(qh.shape[-1])
        s = (qh @ kh.transpose(0, 2, 1)) * scale
        p = softmax_rows(s, None if mask is None else mask[None])
        oh = p @ vh
        o = self._merge(oh)
        y, co = self.o.forward(o)
        if self.cfg.include_residual:
            y = y + xq
        return y, (cq, ck, cv, qh, kh, vh, p, co, scale)

    def backward(self, dy, cache):
        cq, ck, cv, qh, kh, vh, p, co, scale = cache
        do = self.o.backward(dy, co)
        doh = self._split(do)
        dp = doh @ vh.transpose(0, 2, 1)
        dvh = p.transpose(0, 2, 1) @ doh
        ds = softmax_backward(dp, p) * scale
        dqh = ds @ kh
        dkh = ds.transpose(0, 2, 1) @ qh
        dxq = self.q.backward(self._merge(dqh), cq)
        dxk = self.k.backward(self._merge(dkh), ck)
        dxv = self.v.backward(self._merge(dvh), cv)
        if self.cfg.include_residual:
            dxq = dxq + dy
        return dxq, dxk, dxv


def msa(x, attn: MultiHeadAttention):
    """Self-attention forward helper; returns the output only."""
    return attn.forward(x)[0]


def mhca(q, k, v, attn: MultiHeadAttention):
    if q.shape[1] != k.shape[1]:
        raise DimensionError(f"query dim {q.shape[1]} != key dim {k.shape[1]}")
    return attn.forward(q, k, v)[0]


def mlp(x, layer: MLP):
    return layer.forward(x)[0]


# -- verification and optimisation -------------------------------------------

def finite_diff_grad(loss_fn, param: Parameter, h=1e-5, coords=None):
    """Central-difference gradient of ``loss_fn()`` w.r.t. ``param.value``.

    ``coords`` optionally restricts the check to a list of flat indices;
    the remaining entries of the returned array are NaN.
    """
    flat = param.value.reshape(-1)
    out = np.full(flat.shape, np.nan) if coords is not None else np.zeros(flat.shape)
    idx = range(flat.size) if coords is None else coords
    for i in idx:
        orig = flat[i]
        flat[i] = orig + h
        fp = float(loss_fn())
        flat[i] = orig - h
        fm = float(loss_fn())
        flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NonFiniteError(f"non-finite loss at coordinate {i}")
        out[i] = (fp - fm) / (2.0 * h)
    return out.reshape(param.value.shape)


def sgd_momentum_step(param: Parameter, lr, mu):
    if not np.all(np.isfinite(param.grad)):
        raise NonFiniteError("non-finite gradient")
    param.velocity *= mu
    param.velocity += param.grad
    param.value -= lr * param.velocity
    return param
