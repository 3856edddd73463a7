"""numba-compiled routing kernels; see ``_kernels_np`` for the contracts."""
import numpy as np
from numba import njit


@njit(cache=False)
def topk_split(scores, k):
    b, m = scores.shape
    keep = np.empty((b, k), dtype=np.int64)
    prune = np.empty((b, m - k), dtype=np.int64)
    chosen = np.zeros(m, dtype=np.bool_)
    for i in range(b):
        order = np.argsort(-scores[i], kind="mergesort")
        chosen[:] = False
        for j in range(k):
            chosen[order[j]] = True
        ik = 0
        ip = 0
        for j in range(m):
            if chosen[j]:
                keep[i, ik] = j
                ik += 1
            else:
                prune[i, ip] = j
                ip += 1
    return keep, prune


@njit(cache=False)
def gather_rows(x, idx):
    b, k = idx.shape
    d = x.shape[2]
    out = np.empty((b, k, d), dtype=x.dtype)
    for i in range(b):
        for j in range(k):
            src = idx[i, j]
            for t in range(d):
                out[i, j, t] = x[i, src, t]
    return out


@njit(cache=False)
def scatter_add_rows(src, idx, num_rows):
    b, k, d = src.shape
    out = np.zeros((b, num_rows, d), dtype=src.dtype)
    for i in range(b):
        for j in range(k):
            dst = idx[i, j]
            for t in range(d):
                out[i, dst, t] += src[i, j, t]
    return out


# reassociated sums stay within the 1e-12 parity tolerance
@njit(cache=False, fastmath=True)
def folded_scores(x, qbar):
    b, m, d = x.shape
    out = np.empty((b, m), dtype=x.dtype)
    for i in range(b):
        for j in range(m):
            acc = 0.0
            for t in range(d):
                acc += x[i, j, t] * qbar[t]
            out[i, j] = acc
    return out


@njit(cache=False)
def patch_variance(images, patch):
    b, c, h, w = images.shape
    gh = h // patch
    gw = w // patch
    n = patch * patch
    out = np.zeros((b, gh * gw), dtype=images.dtype)
    for i in range(b):
        for r in range(gh):
            for q in range(gw):
                total = 0.0
                for ch in range(c):
                    # shift by the first pixel: constant cells give exactly 0
                    shift = images[i, ch, r * patch, q * patch]
                    mean = 0.0
                    for y in range(patch):
                        for x in range(patch):
                            mean += images[i, ch, r * patch + y, q * patch + x] - shift
                    mean /= n
                    ss = 0.0
                    for y in range(patch):
                        for x in range(patch):
                            dv = images[i, ch, r * patch + y, q * patch + x] - shift - mean
                            ss += dv * dv
                    total += ss / n
                out[i, r * gw + q] = total / c
    return out


@njit(cache=False)
def majority_downsample(labels, patch, ignore_index, num_classes):
    b, h, w = labels.shape
    gh = h // patch
    gw = w // patch
    out = np.empty((b, gh, gw), dtype=labels.dtype)
    counts = np.zeros(num_classes, dtype=np.int64)
    for i in range(b):
        for r in range(gh):
            for q in range(gw):
                counts[:] = 0
                seen = 0
                for y in range(patch):
                    for x in range(patch):
                        v = labels[i, r * patch + y, q * patch + x]
                        if v != ignore_index and 0 <= v < num_classes:
                            counts[v] += 1
                            seen += 1
                if seen == 0:
                    out[i, r, q] = ignore_index
                else:
                    best = 0
                    for cl in range(1, num_classes):
                        if counts[cl] > counts[best]:
                            best = cl
                    out[i, r, q] = best
    return out
