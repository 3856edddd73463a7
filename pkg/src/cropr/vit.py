"""Toy Vision Transformer: patch embedding, pre-norm blocks, pooling head."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError
from .nn import MLP, Attention, LayerNorm, Linear, Module, param, trunc_normal
from .tensor import Tensor

CLS_POSITION = -1


@dataclass
class ViTConfig:
    image_side: int = 64
    patch_size: int = 8
    channels: int = 3
    depth: int = 8
    width: int = 64
    heads: int = 4
    mlp_ratio: float = 4.0
    droppath_rates: list = None
    drop_path_max: float = 0.0
    pooling: str = "avg"
    num_classes: int = 10
    cls_token: bool = False

    def __post_init__(self):
        if self.image_side % self.patch_size:
            raise ConfigError(f"image side {self.image_side} not divisible by patch {self.patch_size}")
        if self.width % self.heads:
            raise ConfigError(f"width {self.width} not divisible by {self.heads} heads")
        if self.pooling not in ("avg", "cls"):
            raise ConfigError(f"unknown pooling {self.pooling!r}")
        if self.pooling == "cls" and not self.cls_token:
            raise ConfigError("cls pooling requires cls_token=True")
        if self.droppath_rates is None:
            # linearly spaced 0 -> max over depth
            if self.depth > 1:
                self.droppath_rates = [self.drop_path_max * i / (self.depth - 1) for i in range(self.depth)]
            else:
                self.droppath_rates = [0.0] * self.depth
        self.droppath_rates = [float(r) for r in self.droppath_rates]
        if len(self.droppath_rates) != self.depth:
            raise ConfigError("droppath_rates length must equal depth")
        if any(not 0.0 <= r < 1.0 for r in self.droppath_rates):
            raise ConfigError("droppath rates must lie in [0, 1)")

    @property
    def grid(self):
        return self.image_side // self.patch_size

    @property
    def num_patches(self):
        return self.grid ** 2

    @property
    def hidden(self):
        return int(round(self.mlp_ratio * self.width))

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown model keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TokenBatch:
    """Tokens (B, M, D) travelling with their original raster positions.

    The CLS token, when present, sits at sequence index 0 with position
    ``CLS_POSITION``. ``stages`` optionally tags each token with the block
    after which it was pruned (``-1`` for tokens that were never pruned).
    """

    tokens: Tensor
    positions: np.ndarray
    cls_present: bool = False
    stages: np.ndarray = field(default=None)

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.int64)
        if self.positions.shape != self.tokens.shape[:2]:
            raise ContractError(f"positions {self.positions.shape} do not match tokens {self.tokens.shape}")

    @property
    def batch(self):
        return self.tokens.shape[0]

    @property
    def num_tokens(self):
        return self.tokens.shape[1]

    @property
    def num_patches(self):
        return self.num_tokens - int(self.cls_present)

    def with_tokens(self, tokens):
        return TokenBatch(tokens, self.positions, self.cls_present, self.stages)


def droppath(x, rate, training, rng=None):
    """Stochastic depth on a residual branch (B, ...), one draw per sample."""
    if not training or rate <= 0.0:
        return x
    keep = 1.0 - rate
    shape = (x.shape[0],) + (1,) * (x.ndim - 1)
    mask = (rng.random(shape) < keep).astype(x.dtype)
    return T.scale(x, mask / keep)


class Block(Module):
    """Pre-norm transformer block: x + DP(MHSA(LN x)), then x + DP(MLP(LN x))."""

    def __init__(self, rng, width, heads, hidden, drop_rate=0.0):
        self.norm1 = LayerNorm(width)
        self.attn = Attention(rng, width, heads)
        self.norm2 = LayerNorm(width)
        self.mlp = MLP(rng, width, hidden)
        self.drop_rate = drop_rate

    def __call__(self, x, training=False, rng=None, droppath_off=False):
        rate = 0.0 if droppath_off else self.drop_rate
        x = x + droppath(self.attn(self.norm1(x)), rate, training, rng)
        x = x + droppath(self.mlp(self.norm2(x)), rate, training, rng)
        return x

    def attention_probs(self, x):
        """Head-averaged self-attention probabilities (B, M, M), no graph."""
        with T.no_grad():
            probs = T.softmax(self.attn.logits(self.norm1(x)), axis=-1).data
        return probs.mean(axis=1)


def attention_readout(probs, mode, cls_present):
    """Turn head-averaged attention (B, M, M) into per-token scores (B, M).

    ``cls``: the CLS token's attention row. ``avg``: column means, i.e. the
    attention each token receives averaged over all queries. The CLS entry
    is set to +inf so selectors never prune it.
    """
    if probs.ndim == 4:
        probs = probs.mean(axis=1)
    if mode == "cls":
        if not cls_present:
            raise ContractError("cls-mode attention scores need a CLS token")
        scores = probs[:, 0, :].copy()
    elif mode == "avg":
        scores = probs.mean(axis=1)
    else:
        raise ValueError(f"unknown attention readout mode {mode!r}")
    if cls_present:
        scores[:, 0] = np.inf
    return scores


class ViT(Module):
    def __init__(self, config, rng):
        c = config
        self.config = c
        self.patch_dim = c.channels * c.patch_size ** 2
        self.embed = Linear(rng, self.patch_dim, c.width)
        self.pos_embed = param(trunc_normal(rng, (c.num_patches, c.width)))
        if c.cls_token:
            self.cls = param(trunc_normal(rng, (1, 1, c.width)))
            self.cls_pos = param(trunc_normal(rng, (1, c.width)))
        self.blocks = [Block(rng, c.width, c.heads, c.hidden, r) for r in c.droppath_rates]
        self.norm = LayerNorm(c.width)
        self.head = Linear(rng, c.width, c.num_classes)

    def patchify(self, images):
        images = np.asarray(images)
        if images.ndim != 4:
            raise ContractError(f"images must be B x C x H x W, got {images.shape}")
        b, ch, h, w = images.shape
        p = self.config.patch_size
        if ch != self.config.channels or h % p or w % p:
            raise ConfigError(f"image shape {images.shape} incompatible with patch {p}, channels {self.config.channels}")
        if h != self.config.image_side or w != self.config.image_side:
            raise ConfigError(f"image side must be {self.config.image_side}, got {h}x{w}")
        x = images.reshape(b, ch, h // p, p, w // p, p).transpose(0, 2, 4, 1, 3, 5)
        return x.reshape(b, (h // p) * (w // p), ch * p * p).astype(T.get_default_dtype())

    def patch_embed(self, images):
        patches = self.patchify(images)
        b, m, _ = patches.shape
        x = self.embed(Tensor(patches)) + self.pos_embed
        positions = np.broadcast_to(np.arange(m), (b, m))
        if self.config.cls_token:
            cls = T.repeat_batch(self.cls + self.cls_pos, b)
            x = T.concat([cls, x], axis=1)
            positions = np.concatenate([np.full((b, 1), CLS_POSITION), positions], axis=1)
        return TokenBatch(x, positions, self.config.cls_token)

    def pool(self, batch, pooling=None):
        pooling = pooling or self.config.pooling
        x = batch.tokens
        if pooling == "cls":
            if not batch.cls_present:
                raise ContractError("cls pooling without a CLS token")
            return T.gather_rows(x, np.zeros((batch.batch, 1), dtype=np.int64)).reshape(batch.batch, x.shape[-1])
        if batch.cls_present:
            idx = np.broadcast_to(np.arange(1, batch.num_tokens), (batch.batch, batch.num_patches))
            x = T.gather_rows(x, idx)
        return x.mean(axis=1)

    def pool_and_head(self, batch, pooling=None):
        return self.head(self.norm(self.pool(batch, pooling)))

    def dense_head(self, tokens):
        """Per-token LN + linear (Segmenter-style linear decoder)."""
        return self.head(self.norm(tokens))

    def self_attention_scores(self, batch, block_index, mode="cls"):
        probs = self.blocks[block_index].attention_probs(batch.tokens)
        return attention_readout(probs, mode, batch.cls_present)

    def forward_features(self, images, training=False, rng=None):
        batch = self.patch_embed(images)
        x = batch.tokens
        for blk in self.blocks:
            x = blk(x, training, rng)
        return batch.with_tokens(x)

    def __call__(self, images, training=False, rng=None):
        return self.pool_and_head(self.forward_features(images, training, rng))
