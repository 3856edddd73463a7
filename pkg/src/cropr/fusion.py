"""Reactivating pruned tokens: Last Layer Fusion and the comparison fusers.

All position-based fusers share :func:`merge_by_position`: concatenate the
kept tokens with every pruned stage, then reorder the rows into raster
order (CLS first). Pruned values are used exactly as captured at prune
time.
"""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import FusionError
from .nn import MLP, Attention, LayerNorm, Module, param, trunc_normal
from .vit import CLS_POSITION, TokenBatch

KEPT_STAGE = 0


def merge_by_position(kept, pruned_stages, m0):
    """Rows of ``kept`` and all ``pruned_stages`` in original raster order.

    Returns a :class:`TokenBatch` with ``m0`` patch tokens (+CLS) whose
    ``stages`` field holds, per token, the block after which it was pruned
    (``KEPT_STAGE`` for survivors). Raises :class:`FusionError` unless the
    positions form exactly ``{0..m0-1}`` (+ the CLS sentinel).
    """
    parts = [kept] + list(pruned_stages)
    b = kept.batch
    stage_tags = []
    for i, part in enumerate(parts):
        if part.batch != b:
            raise FusionError("batch sizes differ between kept and pruned tokens")
        if i == 0:
            tags = kept.stages if kept.stages is not None else np.full(part.positions.shape, KEPT_STAGE)
        else:
            tags = part.stages if part.stages is not None else np.full(part.positions.shape, -1)
        stage_tags.append(np.asarray(tags, dtype=np.int64))
    positions = np.concatenate([p.positions for p in parts], axis=1)
    stages = np.concatenate(stage_tags, axis=1)
    order = np.argsort(positions, axis=1, kind="stable")
    sorted_pos = np.take_along_axis(positions, order, axis=1)
    cls = bool(kept.cls_present)
    expected = np.arange(m0)
    if cls:
        expected = np.concatenate([[CLS_POSITION], expected])
    if sorted_pos.shape[1] != expected.size or np.any(sorted_pos != expected):
        raise FusionError("positions of kept and pruned tokens do not form a duplicate-free grid")
    tokens = T.concat([p.tokens for p in parts], axis=1) if len(parts) > 1 else kept.tokens
    tokens = T.gather_rows(tokens, order)
    return TokenBatch(tokens, sorted_pos, cls, np.take_along_axis(stages, order, axis=1))


def llf_fuse(kept, pruned_stages, m0, block=None, training=False, rng=None):
    """Last Layer Fusion: reinsert everything, then run the final block.

    ``kept`` is the output of the penultimate block. When ``block`` is given
    it is applied to the fused sequence with DropPath disabled.
    """
    fused = merge_by_position(kept, pruned_stages, m0)
    if block is None:
        return fused
    return fused.with_tokens(block(fused.tokens, training, rng, droppath_off=True))


def token_concat_fuse(kept, pruned_stages, m0):
    """Concatenate pruned tokens after the final block (no further mixing)."""
    return merge_by_position(kept, pruned_stages, m0)


class CrossAttnFuser(Module):
    """Freshly initialised cross-attention block with grid-shaped queries.

    ``out = Q + Attn(LN Q, LN X)``, then ``out + MLP(LN out)``.
    """

    def __init__(self, rng, width, heads, hidden, num_queries):
        self.queries = param(trunc_normal(rng, (1, num_queries, width)))
        self.norm_q = LayerNorm(width)
        self.norm_kv = LayerNorm(width)
        self.attn = Attention(rng, width, heads)
        self.norm2 = LayerNorm(width)
        self.mlp = MLP(rng, width, hidden)

    def __call__(self, context):
        q = T.repeat_batch(self.queries, context.shape[0])
        out = q + self.attn(self.norm_q(q), self.norm_kv(context))
        return out + self.mlp(self.norm2(out))


def cross_attn_fuse(kept, fuser):
    """Grid queries attend into the kept tokens; pruned tokens are unused."""
    out = fuser(kept.tokens)
    b, n = out.shape[:2]
    return TokenBatch(out, np.broadcast_to(np.arange(n), (b, n)), False)


def cross_attn_concat_fuse(kept, pruned_stages, m0, fuser):
    """Grid queries attend into kept + pruned tokens."""
    merged = merge_by_position(kept, pruned_stages, m0)
    out = fuser(merged.tokens)
    b, n = out.shape[:2]
    return TokenBatch(out, np.broadcast_to(np.arange(n), (b, n)), False,
                      merged.stages[:, int(merged.cls_present):])


def mhsa_concat_fuse(kept, pruned_stages, m0, block, training=False, rng=None):
    """Concatenate, then one freshly initialised self-attention block."""
    merged = merge_by_position(kept, pruned_stages, m0)
    return merged.with_tokens(block(merged.tokens, training, rng))


def dtop_logit_fuse(kept_logits, pruned_logits, m0):
    """Assemble a full logit grid from final-head and per-stage aux logits.

    ``kept_logits`` carries the final head's logits of the surviving tokens;
    each entry of ``pruned_logits`` carries the logits that the auxiliary
    head of the pruning stage produced for the tokens pruned there.
    """
    return merge_by_position(kept_logits, pruned_logits, m0)
