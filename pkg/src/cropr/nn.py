"""Parameter containers and small layers built on :mod:`cropr.tensor`."""
from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import Tensor


def trunc_normal(rng, shape, std=0.02):
    """Normal(0, std) truncated to +-2 std by resampling."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def param(data, name=None):
    return Tensor(np.asarray(data, dtype=T.get_default_dtype()), requires_grad=True, name=name)


class Module:
    """Minimal parameter tree: tensors with ``requires_grad`` are parameters."""

    def named_parameters(self, prefix=""):
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
            elif isinstance(value, dict):
                for k, item in value.items():
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{k}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def num_parameters(self):
        return int(sum(p.size for p in self.parameters()))

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self):
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state, strict=True):
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        unexpected = set(state) - set(own)
        if strict and (missing or unexpected):
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, p in own.items():
            if name in state:
                arr = np.asarray(state[name])
                if arr.shape != p.shape:
                    raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
                p.data = arr.astype(p.dtype, copy=True)


class Linear(Module):
    def __init__(self, rng, d_in, d_out, bias=True, std=0.02):
        self.weight = param(trunc_normal(rng, (d_in, d_out), std))
        self.bias = param(np.zeros(d_out)) if bias else None

    def __call__(self, x):
        return T.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-6):
        self.gamma = param(np.ones(dim))
        self.beta = param(np.zeros(dim))
        self.eps = eps

    def __call__(self, x):
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


class MLP(Module):
    def __init__(self, rng, dim, hidden):
        self.fc1 = Linear(rng, dim, hidden)
        self.fc2 = Linear(rng, hidden, dim)

    def __call__(self, x):
        return self.fc2(T.gelu(self.fc1(x)))


def split_heads(x, heads):
    b, m, d = x.shape
    return x.reshape(b, m, heads, d // heads).transpose(0, 2, 1, 3)


def merge_heads(x):
    b, h, m, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, m, h * dh)


class Attention(Module):
    """Multi-head attention with separate q/k/v projections.

    Used for self-attention (``context is None``) and for cross-attention
    from a query sequence into a context sequence. The most recent
    head-averaged probabilities are kept in ``last_probs`` when
    ``keep_probs`` is set.
    """

    def __init__(self, rng, dim, heads):
        if dim % heads:
            raise ValueError(f"width {dim} not divisible by {heads} heads")
        self.heads = heads
        self.q = Linear(rng, dim, dim)
        self.k = Linear(rng, dim, dim)
        self.v = Linear(rng, dim, dim)
        self.proj = Linear(rng, dim, dim)
        self.keep_probs = False
        self.last_probs = None

    def logits(self, x, context=None):
        context = x if context is None else context
        dh = x.shape[-1] // self.heads
        q = split_heads(self.q(x), self.heads)
        k = split_heads(self.k(context), self.heads)
        return T.matmul(q, k.transpose()) / math.sqrt(dh)

    def __call__(self, x, context=None):
        context = x if context is None else context
        probs = T.softmax(self.logits(x, context), axis=-1)
        if self.keep_probs:
            self.last_probs = probs.data
        v = split_heads(self.v(context), self.heads)
        return self.proj(merge_heads(T.matmul(probs, v)))


class AdamW:
    """Decoupled-weight-decay Adam over a list of parameters."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.05):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.wd = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            if self.wd and p.ndim > 1:
                p.data -= self.lr * self.wd * p.data
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None
