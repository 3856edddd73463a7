"""Synthetic datasets whose token-level relevance is known exactly.

Three generators, all patch-aligned so that a relevance mask maps 1:1 to
patch tokens:

* needle classification: a third of the pixels of the informative patch
  show the class template, a third a fixed beacon, a third a fixed marker.
  Decoy patches carry the marker and the template of a random class, with
  random signs in place of the beacon. Random +-1 distractors and
  low-variance noise fill the rest. Every stamped patch has per-channel
  mean 0 and variance 1, so pixel variance cannot find the informative one.
* toy segmentation: coloured rectangles on a striped, noisy background.
* multilabel: one stamped template per present class.

Each sample ``i`` of a dataset is drawn from ``default_rng([seed, i])`` so
datasets are pure functions of the seed and can be sharded by index.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError


@dataclass
class NeedleSample:
    image: np.ndarray
    label: int
    mask: np.ndarray


def _rademacher(rng, shape):
    return rng.integers(0, 2, size=shape) * 2.0 - 1.0


def _pixel_groups(rng, shape, n):
    """Per channel, split pixels into ``n`` groups of even size."""
    c, pix = shape[0], int(np.prod(shape[1:]))
    base = [2 * (pix // (2 * n))] * n
    for i in range((pix - sum(base)) // 2):
        base[i % n] += 2
    out = np.empty((c, pix), dtype=np.int64)
    for ch in range(c):
        sizes = np.roll(base, ch)
        out[ch, rng.permutation(pix)] = np.repeat(np.arange(n), sizes)
    return out.reshape(shape)


def _balanced_signs(rng, mask):
    """+-1 on ``mask`` with equally many of each sign per channel, 0 elsewhere."""
    out = np.zeros(mask.shape)
    for ch in range(mask.shape[0]):
        idx = np.flatnonzero(mask[ch])
        vals = np.where(np.arange(len(idx)) < len(idx) // 2, 1.0, -1.0)
        out[ch].flat[idx] = rng.permutation(vals)
    return out


def _stamp(image, pos, grid, patch, pattern):
    r, c = divmod(int(pos), grid)
    image[:, r * patch:(r + 1) * patch, c * patch:(c + 1) * patch] = pattern


class NeedleTask:
    """Class templates, beacon and sampling rules of the needle task.

    ``num_decoys`` patches carry the template of a uniformly random class
    (independent of the label); the label is determined by the
    ``num_informative`` beacon patches alone.
    """

    def __init__(self, num_classes=4, num_informative=1, num_decoys=11, num_distractors=36,
                 image_side=64, patch=8, channels=3, noise=0.1, template_seed=1234):
        grid = image_side // patch
        if image_side % patch:
            raise ConfigError("image side not divisible by patch")
        if num_informative < 1 or num_informative + num_decoys + num_distractors > grid * grid:
            raise ConfigError("too many stamped patches for the grid")
        if num_classes < 2:
            raise ConfigError("need at least two classes")
        self.num_classes = num_classes
        self.num_informative = num_informative
        self.num_decoys = num_decoys
        self.num_distractors = num_distractors
        self.image_side = image_side
        self.patch = patch
        self.channels = channels
        self.grid = grid
        self.noise = noise
        trng = np.random.default_rng(template_seed)
        shape = (channels, patch, patch)
        group = _pixel_groups(trng, shape, 3)
        self.beacon_pixels = group == 1
        self.templates = np.stack([_balanced_signs(trng, group == 0) for _ in range(num_classes)])
        self.beacon = _balanced_signs(trng, self.beacon_pixels)
        self.marker = _balanced_signs(trng, group == 2)

    @property
    def num_patches(self):
        return self.grid * self.grid

    def sample(self, rng, label=None):
        c, s, p = self.channels, self.image_side, self.patch
        if label is None:
            label = int(rng.integers(self.num_classes))
        image = rng.normal(0.0, self.noise, size=(c, s, s))
        k, d, r = self.num_informative, self.num_decoys, self.num_distractors
        chosen = rng.choice(self.num_patches, size=k + d + r, replace=False)
        mask = np.zeros(self.num_patches, dtype=bool)
        for pos in chosen[:k]:
            _stamp(image, pos, self.grid, p, self.templates[label] + self.beacon + self.marker)
            mask[pos] = True
        for pos in chosen[k:k + d]:
            noise = _balanced_signs(rng, self.beacon_pixels)
            _stamp(image, pos, self.grid, p, self.templates[rng.integers(self.num_classes)] + noise + self.marker)
        for pos in chosen[k + d:]:
            _stamp(image, pos, self.grid, p, _balanced_signs(rng, np.ones((c, p, p), dtype=bool)))
        return NeedleSample(image, label, mask.reshape(self.grid, self.grid))

    def dataset(self, n, seed, start=0):
        images = np.empty((n, self.channels, self.image_side, self.image_side))
        labels = np.empty(n, dtype=np.int64)
        masks = np.empty((n, self.grid, self.grid), dtype=bool)
        for i in range(n):
            smp = self.sample(np.random.default_rng([seed, start + i]))
            images[i], labels[i], masks[i] = smp.image, smp.label, smp.mask
        return {"images": images, "labels": labels, "masks": masks}


def gen_needle_classification(num_classes, num_informative, rng, **kwargs):
    """Endless stream of :class:`NeedleSample` drawn from ``rng``."""
    task = NeedleTask(num_classes, num_informative, **kwargs)
    while True:
        yield task.sample(rng)


def patches_of(images, patch):
    """(B, C, H, W) -> (B, h*w, C*p*p) in raster order."""
    b, c, h, w = images.shape
    x = images.reshape(b, c, h // patch, patch, w // patch, patch).transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(b, (h // patch) * (w // patch), c * patch * patch)


class NearestCentroidOracle:
    """Classifier that only looks at the masked (informative) patches.

    Features are the mean pixel vector of the masked patches; centroids
    are their per-class means over labelled training samples.
    """

    def __init__(self, patch):
        self.patch = patch
        self.centroids = None

    def _features(self, images, masks):
        p = patches_of(np.asarray(images, dtype=np.float64), self.patch)
        m = np.asarray(masks).reshape(len(p), -1).astype(np.float64)
        return (p * m[..., None]).sum(axis=1) / np.maximum(m.sum(axis=1, keepdims=True), 1.0)

    def fit(self, images, labels, masks):
        f = self._features(images, masks)
        labels = np.asarray(labels)
        self.centroids = np.stack([f[labels == c].mean(axis=0) for c in range(labels.max() + 1)])
        return self

    def predict(self, images, masks):
        f = self._features(images, masks)
        d = ((f[:, None, :] - self.centroids[None]) ** 2).sum(axis=-1)
        return d.argmin(axis=1)


# -- segmentation -------------------------------------------------------------

@dataclass
class SegSample:
    image: np.ndarray
    labels: np.ndarray
    rects: list


class SegmentationTask:
    """Axis-aligned rectangles (classes 1..C-1) on a textured background (class 0).

    Every pixel carries the same stripe texture and Gaussian noise; a
    rectangle adds its class colour. Rectangle corners snap to multiples of
    ``align`` pixels. Later rectangles paint over earlier ones.
    """

    def __init__(self, num_classes=4, image_side=64, patch=8, channels=3, max_rects=3,
                 min_side=16, max_side=40, color_scale=0.6, texture=0.5, noise=1.0,
                 align=8, palette_seed=99):
        if num_classes < 2:
            raise ConfigError("segmentation needs background + at least one class")
        if min_side > max_side or max_side > image_side or min_side < align:
            raise ConfigError("invalid rectangle size range")
        self.num_classes = num_classes
        self.image_side = image_side
        self.patch = patch
        self.channels = channels
        self.max_rects = max_rects
        self.min_side = min_side
        self.max_side = max_side
        self.texture = texture
        self.noise = noise
        self.align = align
        prng = np.random.default_rng(palette_seed)
        palette = prng.normal(size=(num_classes, channels))
        palette /= np.linalg.norm(palette, axis=1, keepdims=True)
        palette[0] = 0.0
        self.palette = palette * color_scale

    def _rect(self, rng):
        a, s = self.align, self.image_side
        hh = int(rng.integers(self.min_side // a, self.max_side // a + 1)) * a
        ww = int(rng.integers(self.min_side // a, self.max_side // a + 1)) * a
        y0 = int(rng.integers(0, (s - hh) // a + 1)) * a
        x0 = int(rng.integers(0, (s - ww) // a + 1)) * a
        return y0, x0, y0 + hh, x0 + ww

    def sample(self, rng, num_rects=None):
        s, c = self.image_side, self.channels
        if num_rects is None:
            num_rects = int(rng.integers(1, self.max_rects + 1))
        labels = np.zeros((s, s), dtype=np.int64)
        rects = []
        for _ in range(num_rects):
            cls = int(rng.integers(1, self.num_classes))
            y0, x0, y1, x1 = self._rect(rng)
            labels[y0:y1, x0:x1] = cls
            rects.append((cls, y0, x0, y1, x1))
        yy, xx = np.mgrid[0:s, 0:s]
        theta = rng.uniform(0, np.pi)
        period = rng.uniform(6.0, 16.0)
        phase = rng.uniform(0, 2 * np.pi)
        stripes = np.sin(2 * np.pi * (np.cos(theta) * xx + np.sin(theta) * yy) / period + phase)
        image = self.texture * stripes[None] + rng.normal(0.0, self.noise, size=(c, s, s))
        image += self.palette[labels].transpose(2, 0, 1)
        return SegSample(image, labels, rects)

    def dataset(self, n, seed, start=0):
        s = self.image_side
        images = np.empty((n, self.channels, s, s))
        labels = np.empty((n, s, s), dtype=np.int64)
        for i in range(n):
            smp = self.sample(np.random.default_rng([seed, start + i]))
            images[i], labels[i] = smp.image, smp.labels
        return {"images": images, "pixel_labels": labels}


def gen_toy_segmentation(num_classes, rng, **kwargs):
    """One (image, pixel labels) pair drawn from ``rng``."""
    smp = SegmentationTask(num_classes, **kwargs).sample(rng)
    return smp.image, smp.labels


# -- multilabel ----------------------------------------------------------------

class MultilabelTask:
    """Each class is present with probability ``p_present``; present classes
    get their template stamped into one random patch."""

    def __init__(self, num_classes=4, image_side=64, patch=8, channels=3, noise=0.3,
                 p_present=0.5, template_seed=4321):
        grid = image_side // patch
        if num_classes > grid * grid:
            raise ConfigError("more classes than patches")
        self.num_classes = num_classes
        self.image_side = image_side
        self.patch = patch
        self.channels = channels
        self.grid = grid
        self.noise = noise
        self.p_present = p_present
        trng = np.random.default_rng(template_seed)
        self.templates = _rademacher(trng, (num_classes, channels, patch, patch))

    def sample(self, rng, present=None):
        c, s = self.channels, self.image_side
        if present is None:
            present = rng.random(self.num_classes) < self.p_present
        present = np.asarray(present, dtype=bool)
        image = rng.normal(0.0, self.noise, size=(c, s, s))
        classes = np.flatnonzero(present)
        positions = rng.choice(self.grid * self.grid, size=classes.size, replace=False)
        for cls, pos in zip(classes, positions):
            _stamp(image, pos, self.grid, self.patch, self.templates[cls])
        return image, present.astype(np.float64)

    def dataset(self, n, seed, start=0):
        s = self.image_side
        images = np.empty((n, self.channels, s, s))
        targets = np.empty((n, self.num_classes))
        for i in range(n):
            images[i], targets[i] = self.sample(np.random.default_rng([seed, start + i]))
        return {"images": images, "targets": targets}

    def correlation_scores(self, images):
        """Per-class max normalised correlation over patches, (B, C)."""
        p = patches_of(np.asarray(images, dtype=np.float64), self.patch)
        t = self.templates.reshape(self.num_classes, -1)
        corr = p @ t.T / t.shape[1]
        return corr.max(axis=1)


def gen_multilabel(num_classes, rng, present=None, **kwargs):
    """One (image, binary target) pair drawn from ``rng``."""
    return MultilabelTask(num_classes, **kwargs).sample(rng, present)


# -- metrics -------------------------------------------------------------------

def retention_recall(kept, masks):
    """Mean fraction of informative patches present in the final keep set.

    ``kept`` is a (B, K) array of kept patch positions (negative entries,
    i.e. CLS, are ignored) or any object with a ``kept_positions``
    attribute. ``masks`` are (B, h, w) or (B, M0) booleans. Samples with an
    empty mask are skipped; NaN if every mask is empty.
    """
    kept = getattr(kept, "kept_positions", kept)
    kept = np.asarray(kept)
    masks = np.asarray(masks, dtype=bool)
    b = masks.shape[0]
    masks = masks.reshape(b, -1)
    out = []
    for i in range(b):
        total = masks[i].sum()
        if total == 0:
            continue
        pos = kept[i][kept[i] >= 0] if kept.ndim == 2 else np.empty(0, dtype=np.int64)
        out.append(masks[i][pos].sum() / total)
    return float(np.mean(out)) if out else float("nan")


def mean_iou(pred, target, num_classes, ignore_index=255):
    """Mean IoU over classes that occur in prediction or target."""
    pred = np.asarray(pred).ravel()
    target = np.asarray(target).ravel()
    valid = target != ignore_index
    pred, target = pred[valid], target[valid]
    ious = []
    for c in range(num_classes):
        p, t = pred == c, target == c
        union = np.logical_or(p, t).sum()
        if union:
            ious.append(np.logical_and(p, t).sum() / union)
    return float(np.mean(ious)) if ious else float("nan")


TASK_BUILDERS = {"needle": NeedleTask, "segmentation": SegmentationTask, "multilabel": MultilabelTask}


def build_task(name, **kwargs):
    if name not in TASK_BUILDERS:
        raise ConfigError(f"unknown dataset {name!r}; choose from {sorted(TASK_BUILDERS)}")
    return TASK_BUILDERS[name](**kwargs)
