"""Training-free token scorers used as pruning baselines.

Each scorer returns a (B, M) score array aligned with the tokens of a
:class:`~cropr.vit.TokenBatch`; selection always goes through
:func:`cropr.pruner.select_topk`, which protects the CLS token.
"""
import numpy as np

from . import kernels
from .vit import attention_readout


def random_score(batch, num_tokens, rng):
    """i.i.d. uniform scores."""
    return rng.random((batch, num_tokens))


def variance_score(images, patch):
    """Per-patch pixel variance averaged over channels, shape (B, h*w).

    Population variance; the scale factor cannot change a Top-K keep set.
    """
    images = np.ascontiguousarray(images, dtype=np.float64)
    return kernels.patch_variance(images, patch)


def scores_at_positions(per_patch, positions):
    """Look up per-patch scores for the tokens currently in the sequence."""
    positions = np.asarray(positions)
    safe = np.where(positions < 0, 0, positions)
    out = np.take_along_axis(per_patch, safe, axis=1).astype(np.float64)
    out[positions < 0] = np.inf
    return out


def attn_topk_score(probs, mode="cls", cls_present=True):
    """Scores read out of a block's self-attention matrix (cls row or column means)."""
    return attention_readout(probs, mode, cls_present)


def invert(selector):
    """Wrap a scorer so that the most relevant tokens get the lowest scores."""
    def inverted(*args, **kwargs):
        return -np.asarray(selector(*args, **kwargs))

    inverted.__name__ = f"inverted_{getattr(selector, '__name__', 'selector')}"
    return inverted
