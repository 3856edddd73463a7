"""Training loop and evaluation for :class:`~cropr.model.PrunedViT`."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import mean_iou, retention_recall
from .errors import ConfigError, ContractError
from .nn import AdamW
from .pruner import IGNORE_INDEX, downsample_labels


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 0.05
    warmup_steps: int = 0
    aux_weight: float = 1.0
    seed: int = 0
    eval_batch_size: int = 128

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown train keys: {sorted(unknown)}")
        return cls(**d)


def targets_for(model, data):
    """Task-appropriate targets from a dataset dict."""
    if model.task == "classification":
        return data["labels"]
    if model.task == "multilabel":
        return data["targets"]
    if "patch_labels" not in data:
        data["patch_labels"] = downsample_labels(
            data["pixel_labels"], model.config.patch_size, IGNORE_INDEX, model.config.num_classes)
    return data["patch_labels"]


def _check(model, data):
    images = data["images"]
    cfg = model.config
    if images.shape[1:] != (cfg.channels, cfg.image_side, cfg.image_side):
        raise ContractError(f"dataset images {images.shape[1:]} do not match the model input")


def train(model, train_data, cfg, test_data=None, on_epoch=None):
    """Run ``cfg.epochs`` epochs; returns one metrics dict per epoch.

    The active schedule of each epoch comes from the model schedule's
    curriculum. ``on_epoch(row)`` is called after every epoch.
    """
    _check(model, train_data)
    images = train_data["images"]
    targets = targets_for(model, train_data)
    n = images.shape[0]
    opt = AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    order_rng = np.random.default_rng(cfg.seed)
    rows = []
    step = 0
    for epoch in range(cfg.epochs):
        schedule = model.schedule.for_epoch(epoch)
        order = order_rng.permutation(n)
        sums = {"main_loss": 0.0}
        aux_sums = {}
        batches = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            if cfg.warmup_steps:
                opt.lr = cfg.lr * min(1.0, (step + 1) / cfg.warmup_steps)
            out = model.forward(images[idx], targets[idx], training=True, schedule=schedule,
                                aux_weight=cfg.aux_weight)
            if not np.isfinite(out.loss.item()):
                raise FloatingPointError(f"non-finite loss at epoch {epoch}, step {step}")
            out.loss.backward()
            opt.step()
            opt.zero_grad()
            sums["main_loss"] += out.main_loss.item()
            for block, loss in out.aux_losses.items():
                aux_sums[block] = aux_sums.get(block, 0.0) + loss.item()
            batches += 1
            step += 1
        row = {"epoch": epoch, "r_max": max((e.r for e in schedule.entries), default=0),
               "main_loss": sums["main_loss"] / batches}
        for block in sorted(aux_sums):
            row[f"aux_loss_b{block}"] = aux_sums[block] / batches
        if test_data is not None:
            row.update(evaluate(model, test_data, cfg.eval_batch_size))
        rows.append(row)
        if on_epoch is not None:
            on_epoch(row)
    return rows


def predict_all(model, images, batch_size=128, folded=False, rng=None):
    """Concatenated logits and kept positions over a dataset."""
    logits, kept = [], []
    for start in range(0, images.shape[0], batch_size):
        out = model.predict(images[start:start + batch_size], folded=folded, rng=rng)
        logits.append(out.logits.data)
        kept.append(out.kept_positions)
    return np.concatenate(logits), np.concatenate(kept)


def evaluate(model, data, batch_size=128, folded=False, rng=None):
    """Task metric (+ retention recall when relevance masks are present).

    DToP-style fusion needs auxiliary logits, so that model is evaluated
    with its auxiliary heads active instead of through :func:`predict_all`.
    """
    _check(model, data)
    targets = targets_for(model, data)
    images = data["images"]
    if model.fusion == "dtop":
        logits, kept = [], []
        for start in range(0, images.shape[0], batch_size):
            sl = slice(start, start + batch_size)
            with T.no_grad():
                out = model.forward(images[sl], targets[sl], rng=rng)
            logits.append(out.logits.data)
            kept.append(out.kept_positions)
        logits, kept = np.concatenate(logits), np.concatenate(kept)
    else:
        logits, kept = predict_all(model, images, batch_size, folded, rng)
    row = {}
    if model.task == "classification":
        row["accuracy"] = float((logits.argmax(axis=-1) == targets).mean())
    elif model.task == "multilabel":
        row["accuracy"] = float(((logits > 0) == (targets > 0.5)).mean())
    else:
        pred = logits.argmax(axis=-1)
        row["miou"] = mean_iou(pred, targets.reshape(pred.shape), model.config.num_classes)
    if "masks" in data:
        row["recall"] = retention_recall(kept, data["masks"])
    return row
