"""Cross-attention pruning module: scorer, selectors, aggregator, heads, fold.

During training a module scores the M input tokens with learnable queries
(``A = Q X^T``, summed over queries), keeps the top K, and pools the tokens
with ``softmax(A / sqrt(D))`` into an auxiliary prediction head whose loss is
the only learning signal of the queries. For inference the queries collapse
into one vector ``qbar = sum_n Q_n`` and scoring becomes ``X @ qbar``.
"""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from . import tensor as T
from .errors import ConfigError, ContractError, ScheduleError, UnsupportedVariantError
from .nn import MLP, LayerNorm, Linear, Module, param, split_heads, merge_heads, trunc_normal
from .tensor import Tensor
from .vit import TokenBatch

TASKS = ("classification", "segmentation", "multilabel")
IGNORE_INDEX = 255

# Number of N x M attention matrices materialised by the training scorer.
# The folded path never touches it; tests assert that.
op_counter = Counter()


@dataclass
class CroprVariant:
    scorer: str = "simple"  # "simple" | "mha"
    mlp: bool = True
    selector: str = "topk"  # "topk" | "sampling"
    stop_gradient: bool = True
    mha_heads: int = 4

    def __post_init__(self):
        if self.scorer not in ("simple", "mha"):
            raise ConfigError(f"unknown scorer {self.scorer!r}")
        if self.selector not in ("topk", "sampling"):
            raise ConfigError(f"unknown selector {self.selector!r}")


class CroprModule(Module):
    """Learnable state of one pruning module (queries, aggregator, aux head)."""

    def __init__(self, rng, width, num_classes, task="classification", num_queries=1,
                 mlp_ratio=4.0, variant=None):
        if task not in TASKS:
            raise ConfigError(f"unknown task {task!r}")
        if num_queries < 1:
            raise ConfigError("a pruning module needs at least one query")
        if task != "segmentation" and num_queries != 1:
            raise ConfigError(f"{task} modules use exactly one query, got {num_queries}")
        variant = variant or CroprVariant()
        self.task = task
        self.width = width
        self.num_classes = num_classes
        self.variant = variant
        self.queries = param(trunc_normal(rng, (num_queries, width)))
        if variant.scorer == "mha":
            if width % variant.mha_heads:
                raise ConfigError("width not divisible by scorer heads")
            self.score_norm = LayerNorm(width)
            self.wq = Linear(rng, width, width)
            self.wk = Linear(rng, width, width)
            self.wv = Linear(rng, width, width)
            self.wo = Linear(rng, width, width)
        if variant.mlp:
            self.agg_norm = LayerNorm(width)
            self.agg_mlp = MLP(rng, width, int(round(mlp_ratio * width)))
        self.head_norm = LayerNorm(width)
        self.head = Linear(rng, width, num_classes)

    @property
    def num_queries(self):
        return self.queries.shape[0]


@dataclass
class RouteResult:
    keep: TokenBatch
    pruned: TokenBatch
    scores: np.ndarray
    attention: Tensor = None
    prune_stage: int = None
    keep_index: np.ndarray = field(default=None, repr=False)
    prune_index: np.ndarray = field(default=None, repr=False)
    aggregated: Tensor = field(default=None, repr=False)


@dataclass
class FoldedRouter:
    """Inference-time router: a single summed query plus its prune count."""

    qbar: np.ndarray
    prune_count: int = 0
    block: int = None


def _keys(x, state):
    return T.stop_gradient(x.tokens) if state.variant.stop_gradient else x.tokens


def score(x, state, keys=None):
    """Raw cross-attention logits ``A`` and per-token scores ``a``.

    ``A`` has shape (B, N, M) for the simple scorer and (B, H, N, M) for the
    MHA variant. ``a`` (numpy, B x M) is ``A`` summed over queries (and
    heads); the CLS score is +inf.
    """
    keys = _keys(x, state) if keys is None else keys
    op_counter["attention_matrix"] += 1
    if state.variant.scorer == "simple":
        A = T.matmul(keys, state.queries.transpose()).transpose(0, 2, 1)
        a = A.data.sum(axis=1)
    else:
        b = keys.shape[0]
        h = state.variant.mha_heads
        kn = state.score_norm(keys)
        q = state.wq(state.queries).reshape(1, state.num_queries, state.width)
        q = split_heads(T.repeat_batch(q, b), h)
        k = split_heads(state.wk(kn), h)
        A = T.matmul(q, k.transpose())
        a = A.data.sum(axis=(1, 2))
    a = np.array(a, dtype=np.float64)
    if x.cls_present:
        a[:, 0] = np.inf
    return A, a


def _validate_k(x, k):
    lo = 1 + int(x.cls_present)
    if not lo <= k <= x.num_tokens:
        raise ContractError(f"K={k} outside [{lo}, {x.num_tokens}]")


def _route(x, keep_idx, prune_idx, scores, attention=None, stage=None):
    def take(idx):
        tokens = T.gather_rows(x.tokens, idx)
        pos = np.take_along_axis(x.positions, idx, axis=1)
        stages = None if x.stages is None else np.take_along_axis(x.stages, idx, axis=1)
        return TokenBatch(tokens, pos, x.cls_present, stages)

    keep = take(keep_idx)
    pruned = take(prune_idx)
    pruned.cls_present = False
    return RouteResult(keep, pruned, scores, attention, stage, keep_idx, prune_idx)


def _with_cls(x, a):
    a = np.array(a, dtype=np.float64)
    if a.shape != x.positions.shape:
        raise ContractError(f"scores {a.shape} do not match tokens {x.positions.shape}")
    if x.cls_present:
        a[:, 0] = np.inf
    return a


def select_topk(x, a, k, attention=None, stage=None):
    """Keep the ``k`` highest-scoring tokens (ties: lower position first).

    Both output sets preserve the input order. ``k`` counts the CLS token,
    which is always kept.
    """
    _validate_k(x, k)
    a = _with_cls(x, a)
    keep_idx, prune_idx = kernels.topk_split(a, k)
    return _route(x, keep_idx, prune_idx, a, attention, stage)


def select_sampling(x, a, k, rng, attention=None, stage=None):
    """Sample ``k`` distinct tokens without replacement, P ~ softmax(a).

    Implemented with the Gumbel-top-k trick; -inf scores are never drawn
    while finite alternatives remain, CLS (+inf) is always drawn.
    """
    _validate_k(x, k)
    a = _with_cls(x, a)
    with np.errstate(invalid="ignore"):
        keys = a + rng.gumbel(size=a.shape)
    keys = np.where(np.isnan(keys), -np.inf, keys)
    keep_idx, prune_idx = kernels.topk_split(keys, k)
    return _route(x, keep_idx, prune_idx, a, attention, stage)


def aggregate(values, A, state):
    """``Z = MLP(LN(X')) + X'`` with ``X' = softmax(A / sqrt(D)) X``."""
    d = values.shape[-1]
    if state.variant.scorer == "simple":
        probs = T.softmax(A / math.sqrt(d), axis=-1)
        xp = T.matmul(probs, values)
    else:
        h = state.variant.mha_heads
        probs = T.softmax(A / math.sqrt(d // h), axis=-1)
        v = split_heads(state.wv(state.score_norm(values)), h)
        xp = state.wo(merge_heads(T.matmul(probs, v)))
    if state.variant.mlp:
        return state.agg_mlp(state.agg_norm(xp)) + xp
    return xp


def head_logits(z, state):
    return state.head(state.head_norm(z))


def aux_head_classification(z, labels, state):
    """Logits (B, C) from the single aggregated token and the CE loss."""
    logits = head_logits(z, state).reshape(z.shape[0], state.num_classes)
    return logits, T.cross_entropy(logits, labels)


def aux_head_dense(z, labels, state, ignore_index=IGNORE_INDEX):
    """Per-patch logits (B, h*w, C) and per-patch CE against patch labels."""
    labels = np.asarray(labels)
    b, n = z.shape[0], z.shape[1]
    if labels.shape[0] != b or labels[0].size != n:
        raise ContractError(f"label grid {labels.shape} does not match {n} queries")
    logits = head_logits(z, state)
    return logits, T.cross_entropy(logits, labels.reshape(b, n), ignore_index=ignore_index)


def aux_head_multilabel(z, targets, state):
    logits = head_logits(z, state).reshape(z.shape[0], state.num_classes)
    return logits, T.binary_cross_entropy_with_logits(logits, targets)


def aux_loss(z, labels, state):
    if state.task == "classification":
        return aux_head_classification(z, labels, state)
    if state.task == "segmentation":
        return aux_head_dense(z, labels, state)
    return aux_head_multilabel(z, labels, state)


def downsample_labels(pixel_labels, patch, ignore_index=IGNORE_INDEX, num_classes=None):
    """Majority vote of pixel labels inside each patch cell.

    Ignored pixels do not vote, a cell with only ignored pixels stays
    ignored, and ties go to the smaller class id. Accepts (H, W) or
    (B, H, W) integer arrays.
    """
    labels = np.asarray(pixel_labels)
    squeeze = labels.ndim == 2
    if squeeze:
        labels = labels[None]
    h, w = labels.shape[-2:]
    if h % patch or w % patch:
        raise ContractError(f"label map {h}x{w} not divisible by patch {patch}")
    labels = np.ascontiguousarray(labels, dtype=np.int64)
    if num_classes is None:
        valid = labels[labels != ignore_index]
        num_classes = int(valid.max()) + 1 if valid.size else 1
    out = kernels.majority_downsample(labels, patch, ignore_index, num_classes)
    return out[0] if squeeze else out


def fold(state):
    """Collapse the queries into ``qbar``; aggregator and head are dropped."""
    if state.variant.scorer != "simple":
        raise UnsupportedVariantError(f"scorer variant {state.variant.scorer!r} cannot be folded; "
                                      "only the projection-free scorer reduces to a single query")
    return FoldedRouter(state.queries.data.sum(axis=0).copy())


def folded_score(x, router):
    """``a = X qbar`` (B, M); O(M*D), no N x M intermediate."""
    tokens = x.tokens.data if isinstance(x, TokenBatch) else np.asarray(x)
    qbar = np.asarray(router.qbar if isinstance(router, FoldedRouter) else router, dtype=tokens.dtype)
    a = kernels.folded_scores(np.ascontiguousarray(tokens), np.ascontiguousarray(qbar))
    a = np.asarray(a, dtype=np.float64)
    if isinstance(x, TokenBatch) and x.cls_present:
        a[:, 0] = np.inf
    return a


def cropr_forward_train(x, state, r, labels, rng=None, stage=None, invert=False, sampling=None):
    """One training-mode pass: route ``x`` and compute the auxiliary loss.

    ``A`` is computed once and reused by the aggregator. Returns the
    :class:`RouteResult` and the auxiliary loss tensor. ``invert`` prunes
    the highest-scoring tokens instead (non-salient baseline). ``sampling``
    overrides the variant's selector (None: use the variant).
    """
    available = x.num_tokens - int(x.cls_present)
    if r < 0 or r >= available:
        raise ScheduleError(f"cannot prune {r} of {available} prunable tokens")
    keys = _keys(x, state)
    A, a = score(x, state, keys)
    z = aggregate(keys, A, state)
    _, loss = aux_loss(z, labels, state)
    k = x.num_tokens - r
    sel_scores = -a if invert else a
    if sampling is None:
        sampling = state.variant.selector == "sampling"
    if sampling:
        if rng is None:
            raise ContractError("sampling selector needs an rng")
        route = select_sampling(x, sel_scores, k, rng, A, stage)
    else:
        route = select_topk(x, sel_scores, k, A, stage)
    route.scores = a
    route.aggregated = z
    return route, loss
