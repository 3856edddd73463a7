"""Backend dispatch for the hot routing kernels.

numba-compiled kernels are used by default. Setting the environment
variable ``CROPR_DISABLE_NUMBA=1`` (or calling ``set_backend("numpy")``)
selects the pure-numpy fallback, which is also used automatically when
numba cannot be imported. Both backends produce identical results; the
test-suite checks this and ``benchmarks/bench_kernels.py`` times them.
"""
import os

import numpy as np

from . import _kernels_np

ENV_FLAG = "CROPR_DISABLE_NUMBA"

try:
    from . import _kernels_nb
except ImportError:  # pragma: no cover - numba is a declared dependency
    _kernels_nb = None

_NAMES = (
    "topk_split",
    "gather_rows",
    "scatter_add_rows",
    "folded_scores",
    "patch_variance",
    "majority_downsample",
)

_backend = "numpy"


def available_backends():
    return ("numba", "numpy") if _kernels_nb is not None else ("numpy",)


def get_backend():
    return _backend


def set_backend(name):
    """Switch every kernel in this module to ``name`` ("numba" or "numpy")."""
    global _backend
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown kernel backend {name!r}")
    if name == "numba" and _kernels_nb is None:
        raise RuntimeError("numba backend requested but numba is not importable")
    impl = _kernels_nb if name == "numba" else _kernels_np
    g = globals()
    for fn in _NAMES:
        g[fn] = getattr(impl, fn)
    _backend = name


def backend_module(name):
    return _kernels_nb if name == "numba" else _kernels_np


def _default_backend():
    flag = os.environ.get(ENV_FLAG, "").strip().lower()
    if flag in ("1", "true", "yes", "on") or _kernels_nb is None:
        return "numpy"
    return "numba"


set_backend(_default_backend())


def as_index(idx):
    return np.ascontiguousarray(idx, dtype=np.int64)
