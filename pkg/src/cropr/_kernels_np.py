"""Pure-numpy reference implementations of the routing kernels.

Every function here has a twin in ``_kernels_nb`` with an identical
signature; ``cropr.kernels`` picks one of the two at import time.
"""
import numpy as np


def topk_split(scores, k):
    order = np.argsort(-scores, axis=1, kind="stable")
    keep = np.sort(order[:, :k], axis=1)
    prune = np.sort(order[:, k:], axis=1)
    return keep, prune


def gather_rows(x, idx):
    return np.take_along_axis(x, idx[:, :, None], axis=1)


def scatter_add_rows(src, idx, num_rows):
    b, _, d = src.shape
    out = np.zeros((b, num_rows, d), dtype=src.dtype)
    batch = np.broadcast_to(np.arange(b)[:, None], idx.shape)
    np.add.at(out, (batch, idx), src)
    return out


def folded_scores(x, qbar):
    return x @ qbar


def patch_variance(images, patch):
    b, c, h, w = images.shape
    cells = images.reshape(b, c, h // patch, patch, w // patch, patch)
    cells = cells - cells[:, :, :, :1, :, :1]
    var = cells.var(axis=(3, 5))
    return var.mean(axis=1).reshape(b, -1)


def majority_downsample(labels, patch, ignore_index, num_classes):
    b, h, w = labels.shape
    cells = labels.reshape(b, h // patch, patch, w // patch, patch)
    cells = cells.transpose(0, 1, 3, 2, 4).reshape(b, h // patch, w // patch, -1)
    onehot = cells[..., None] == np.arange(num_classes)
    counts = onehot.sum(axis=-2)
    out = counts.argmax(axis=-1).astype(labels.dtype)
    out[counts.sum(axis=-1) == 0] = ignore_index
    return out
