"""Self-describing binary container for checkpoints and array dumps.

Layout (ASCII header, then raw little-endian data)::

    CROPR-CONTAINER 1
    meta <single-line JSON>
    entries <n>
    <name> <dtype> <shape> <offset> <nbytes>      (n lines)
    end
    <data bytes>

``dtype`` is a numpy type string (``<f8``, ``<f4``, ``<i8``, ``|b1``, ...),
``shape`` is comma-separated (``-`` for a 0-d array) and ``offset`` counts
bytes from the first data byte. Names may not contain whitespace.
"""
from __future__ import annotations

import json

import numpy as np

from . import __version__
from .errors import ConfigError, ContractError
from .pruner import FoldedRouter

MAGIC = b"CROPR-CONTAINER 1\n"


def _le(arr):
    # np.ascontiguousarray would promote 0-d arrays to 1-d
    return np.asarray(arr, dtype=arr.dtype.newbyteorder("<"), order="C")


def save_container(path, arrays, meta=None):
    """Write ``arrays`` (name -> ndarray) and ``meta`` (JSON-able dict)."""
    meta = dict(meta or {})
    lines = [f"meta {json.dumps(meta, sort_keys=True, separators=(',', ':'))}", f"entries {len(arrays)}"]
    blobs, offset = [], 0
    for name, arr in arrays.items():
        if not name or any(ch.isspace() for ch in name):
            raise ContractError(f"invalid entry name {name!r}")
        arr = _le(np.asarray(arr))
        shape = ",".join(str(s) for s in arr.shape) if arr.ndim else "-"
        lines.append(f"{name} {arr.dtype.str} {shape} {offset} {arr.nbytes}")
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    lines.append("end")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(("\n".join(lines) + "\n").encode("ascii"))
        for blob in blobs:
            fh.write(blob)


def load_container(path):
    """Inverse of :func:`save_container`; returns ``(arrays, meta)``."""
    with open(path, "rb") as fh:
        if fh.readline() != MAGIC:
            raise ContractError(f"{path}: not a container file")
        meta_line = fh.readline().decode("ascii").rstrip("\n")
        if not meta_line.startswith("meta "):
            raise ContractError(f"{path}: missing meta line")
        meta = json.loads(meta_line[5:])
        count_line = fh.readline().decode("ascii").split()
        if len(count_line) != 2 or count_line[0] != "entries":
            raise ContractError(f"{path}: missing entries line")
        specs = []
        for _ in range(int(count_line[1])):
            name, dtype, shape, offset, nbytes = fh.readline().decode("ascii").split()
            dims = () if shape == "-" else tuple(int(s) for s in shape.split(","))
            specs.append((name, np.dtype(dtype), dims, int(offset), int(nbytes)))
        if fh.readline() != b"end\n":
            raise ContractError(f"{path}: header not terminated")
        data = fh.read()
    arrays = {}
    for name, dtype, dims, offset, nbytes in specs:
        if offset + nbytes > len(data):
            raise ContractError(f"{path}: entry {name} truncated")
        arr = np.frombuffer(data, dtype=dtype, count=nbytes // dtype.itemsize, offset=offset)
        arrays[name] = arr.reshape(dims).astype(dtype.newbyteorder("="), copy=True)
    return arrays, meta


def model_meta(model, extra=None):
    meta = {
        "kind": "training",
        "version": __version__,
        "model": model.config.to_dict(),
        "schedule": model.schedule.to_dict(),
        "task": model.task,
        "selector": model.selector,
        "fusion": model.fusion,
        "variant": vars(model.variant).copy(),
        "seed": model.seed,
        "dtype": np.dtype(model.vit.head.weight.dtype).name,
    }
    meta.update(extra or {})
    return meta


def save_model(path, model, extra_meta=None):
    """Full training checkpoint: every parameter, pruning modules included."""
    save_container(path, model.state_dict(), model_meta(model, extra_meta))


def save_folded(path, model, extra_meta=None):
    """Inference checkpoint: backbone (+fusion) weights and one ``qbar`` per module."""
    if model.folded is None:
        model.fold()
    arrays = {f"vit.{k}": v for k, v in model.vit.state_dict().items()}
    if model.fuser is not None:
        arrays.update({f"fuser.{k}": v for k, v in model.fuser.state_dict().items()})
    for block, router in sorted(model.folded.items()):
        arrays[f"router.{block}.qbar"] = router.qbar
    meta = model_meta(model, extra_meta)
    meta["kind"] = "folded"
    save_container(path, arrays, meta)


def load_model(path):
    """Rebuild a :class:`~cropr.model.PrunedViT` from either checkpoint kind."""
    from . import tensor as T
    from .model import build_model

    arrays, meta = load_container(path)
    kind = meta.get("kind")
    if kind not in ("training", "folded"):
        raise ConfigError(f"{path}: unknown checkpoint kind {kind!r}")
    with T.default_dtype(np.dtype(meta.get("dtype", "float64"))):
        model = build_model(meta["model"], meta["schedule"], meta["task"], meta["selector"],
                            meta["fusion"], meta.get("variant"), meta.get("seed", 0))
    if kind == "training":
        model.load_state_dict(arrays)
        return model, meta
    model.vit.load_state_dict({k[4:]: v for k, v in arrays.items() if k.startswith("vit.")})
    if model.fuser is not None:
        model.fuser.load_state_dict({k[6:]: v for k, v in arrays.items() if k.startswith("fuser.")})
    prune_map = model.schedule.prune_map()
    model.croprs = {}
    model.folded = {}
    for key, qbar in arrays.items():
        if key.startswith("router."):
            block = int(key.split(".")[1])
            model.folded[block] = FoldedRouter(qbar, prune_map.get(block, 0), block)
    return model, meta
