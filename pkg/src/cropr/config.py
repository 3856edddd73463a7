"""JSON run-config: sections, defaults, overrides and the derived objects.

Precedence (lowest to highest): built-in defaults, the ``--config`` file,
``--set section.key=value`` overrides (in command-line order), then the
dedicated flags such as ``--seed``.
"""
from __future__ import annotations

import copy
import hashlib
import json
import subprocess
from pathlib import Path

from . import __version__
from .errors import ConfigError
from .schedule import (Curriculum, PruningSchedule, build_per_block, build_staged,
                       staged_from_keep_targets)
from .vit import ViTConfig

SECTIONS = ("model", "schedule", "task", "selector", "fusion", "train", "bench")

DEFAULTS = {
    "model": {"image_side": 64, "patch_size": 8, "channels": 3, "depth": 8, "width": 64, "heads": 4,
              "mlp_ratio": 4.0, "drop_path_max": 0.0, "pooling": "avg", "num_classes": 4,
              "cls_token": False},
    "schedule": {"kind": "staged", "stages": [{"block": 1, "r": 48}]},
    "task": {"name": "needle", "train_size": 2048, "test_size": 512, "seed": 1, "params": {}},
    "selector": {"name": "cropr", "variant": {}},
    "fusion": {"name": "none"},
    "train": {"epochs": 10, "batch_size": 32, "lr": 1e-3, "weight_decay": 0.05, "warmup_steps": 0,
              "aux_weight": 1.0, "seed": 0, "eval_batch_size": 128, "precision": "float32",
              "init_from": None},
    "bench": {"batch_sizes": [8, 32], "reps": 5, "router_tokens": 4096, "router_width": 64,
              "router_reps": 50, "kernel_tokens": 1024},
}

TASK_KINDS = {"needle": "classification", "segmentation": "segmentation", "multilabel": "multilabel"}


def _merge(base, update):
    out = copy.deepcopy(base)
    for k, v in update.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def normalize(cfg):
    """Accept shorthand string values for ``selector`` and ``fusion``."""
    cfg = dict(cfg)
    for key in ("selector", "fusion"):
        if isinstance(cfg.get(key), str):
            cfg[key] = {"name": cfg[key]}
    unknown = set(cfg) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    return cfg


def load(path=None, overrides=(), base=None):
    cfg = copy.deepcopy(DEFAULTS if base is None else base)
    if path is not None:
        try:
            with open(path) as fh:
                user = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        user = normalize(user)
        if "schedule" in user:
            cfg["schedule"] = {}
        cfg = _merge(cfg, user)
    for item in overrides:
        cfg = apply_override(cfg, item)
    return cfg


def apply_override(cfg, item):
    """``section.key.sub=value``; the value is parsed as JSON, else kept as text."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    parts = key.split(".")
    if parts[0] not in SECTIONS:
        raise ConfigError(f"override {key!r}: unknown section {parts[0]!r}")
    cfg = normalize(cfg)
    node = cfg
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            node[p] = {}
        node = node[p]
    node[parts[-1]] = value
    return cfg


def config_hash(cfg):
    text = json.dumps(cfg, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(text.encode()).hexdigest()[:12]


def version_string():
    """Package version plus the git commit of the source tree when available."""
    try:
        rev = subprocess.run(["git", "describe", "--always", "--dirty"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=5)
        if rev.returncode == 0 and rev.stdout.strip():
            return f"{__version__}+g{rev.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def header_lines(cfg, command):
    return [f"cropr {command}", f"version {version_string()}", f"config_hash {config_hash(cfg)}",
            "flops_convention 1 multiply-add = 2 FLOPs"]


def model_config(cfg):
    try:
        return ViTConfig.from_dict(cfg["model"])
    except TypeError as exc:
        raise ConfigError(f"bad model section: {exc}") from exc


def schedule_from(cfg, model_cfg=None):
    """Build the :class:`PruningSchedule` described by ``cfg['schedule']``.

    ``kind`` is ``per_block`` (``r``), ``staged`` (``stages``),
    ``keep_targets`` (``blocks``, ``keep``) or ``explicit`` (a full schedule
    dict). ``depth``, ``m0`` and ``cls`` default to the model's values and
    ``llf`` to ``fusion == "llf"``.
    """
    s = dict(cfg["schedule"])
    kind = s.pop("kind", "explicit")
    model_cfg = model_cfg or model_config(cfg)
    fusion = cfg.get("fusion", {}).get("name", "none") if isinstance(cfg.get("fusion"), dict) else cfg.get("fusion")
    depth = int(s.pop("depth", model_cfg.depth))
    m0 = int(s.pop("m0", model_cfg.num_patches))
    cls = bool(s.pop("cls", model_cfg.cls_token))
    llf = bool(s.pop("llf", fusion == "llf"))
    kw = {"curriculum": Curriculum(**s.pop("curriculum", {})), "prefer_div8": bool(s.pop("prefer_div8", False))}
    try:
        if kind == "per_block":
            return build_per_block(depth, m0, int(s.pop("r")), llf, cls, **kw)
        if kind == "staged":
            return build_staged(s.pop("stages", []), m0, llf, cls, depth, **kw)
        if kind == "keep_targets":
            return staged_from_keep_targets(s.pop("blocks"), s.pop("keep"), m0, llf, cls, depth, **kw)
        if kind == "explicit":
            return PruningSchedule(depth, m0, cls, llf, s.pop("entries", []), **kw)
    except KeyError as exc:
        raise ConfigError(f"schedule kind {kind!r} needs key {exc}") from exc
    raise ConfigError(f"unknown schedule kind {kind!r}")


def task_kind(cfg):
    name = cfg["task"]["name"]
    if name not in TASK_KINDS:
        raise ConfigError(f"unknown task {name!r}; choose from {sorted(TASK_KINDS)}")
    return TASK_KINDS[name]
