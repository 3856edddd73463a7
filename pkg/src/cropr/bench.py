"""Wall-clock benchmark harness with a fixed CSV layout.

Timing uses ``time.perf_counter`` after ``warmup`` untimed calls. Each row
is one (config, batch size, precision); a ``<config>/best`` row summarises
the best throughput over batch sizes. Workloads are built from seeded
generators so the analytic columns are reproducible.
"""
from __future__ import annotations

import csv
import io
import time

import numpy as np

from . import kernels
from . import pruner as P
from . import selectors as S
from . import tensor as T
from .vit import TokenBatch

HEADER = ["config", "mode", "batch", "precision", "workers", "reps", "imgs_per_sec",
          "p50_ms", "p95_ms", "flops", "flash_attn"]


def time_calls(fn, reps=20, warmup=3):
    """Per-call wall times in seconds (warmup calls excluded)."""
    for _ in range(warmup):
        fn()
    out = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        out.append(time.perf_counter() - t0)
    return np.asarray(out)


def row(config, mode, batch, precision, times, flops=None):
    p50 = float(np.percentile(times, 50))
    return {
        "config": config,
        "mode": mode,
        "batch": batch,
        "precision": precision,
        "workers": 1,
        "reps": len(times),
        "imgs_per_sec": batch / p50 if p50 > 0 else float("inf"),
        "p50_ms": 1e3 * p50,
        "p95_ms": 1e3 * float(np.percentile(times, 95)),
        "flops": "" if flops is None else flops,
        "flash_attn": "n/a",
    }


def best_rows(rows):
    """One ``<config>/best`` row per (config, mode, precision)."""
    best = {}
    for r in rows:
        key = (r["config"], r["mode"], r["precision"])
        if key not in best or r["imgs_per_sec"] > best[key]["imgs_per_sec"]:
            best[key] = r
    return [dict(r, config=f"{r['config']}/best") for r in best.values()]


def bench_router(num_tokens=4096, width=64, batch=1, reps=50, warmup=5, seed=0, precision="float64"):
    """Per-module routing time: folded scorer vs random selector (same Top-K split).

    Both paths score and split a (B, M, D) token tensor into keep/prune
    index sets with K = M/2; neither gathers rows.
    """
    rng = np.random.default_rng(seed)
    dt = np.dtype(precision)
    x = np.ascontiguousarray(rng.normal(size=(batch, num_tokens, width)).astype(dt))
    qbar = rng.normal(size=width).astype(dt)
    router = P.FoldedRouter(qbar)
    k = num_tokens // 2
    sel_rng = np.random.default_rng(seed + 1)

    def folded():
        kernels.topk_split(P.folded_score(x, router), k)

    def random_sel():
        kernels.topk_split(S.random_score(batch, num_tokens, sel_rng), k)

    out = []
    for mode, fn in (("cropr_folded", folded), ("random", random_sel)):
        out.append(row(f"router/M{num_tokens}/D{width}", mode, batch, precision, time_calls(fn, reps, warmup)))
    return out


def bench_model(model, batch_sizes=(8, 32), reps=5, warmup=1, seed=0, folded=True, label=None):
    """Inference throughput of a model on seeded random images."""
    from .flops import flops as count_flops

    cfg = model.config
    rng = np.random.default_rng(seed)
    precision = np.dtype(model.vit.head.weight.dtype).name
    total = count_flops(cfg, model.schedule, model.task == "segmentation").total
    label = label or f"{model.selector}/{model.fusion}/tpr{round(100 * model.schedule.tpr)}"
    out = []
    for b in batch_sizes:
        images = rng.normal(size=(b, cfg.channels, cfg.image_side, cfg.image_side))
        use_fold = folded and model.selector in ("cropr", "non_salient")

        def run():
            model.predict(images, folded=use_fold, rng=np.random.default_rng(seed))

        out.append(row(label, "folded" if use_fold else "eager", b, precision,
                       time_calls(run, reps, warmup), total * b))
    return out


def bench_kernels(batch=8, num_tokens=1024, width=64, reps=20, warmup=3, seed=0):
    """Each hot kernel under every available backend."""
    rng = np.random.default_rng(seed)
    scores = rng.normal(size=(batch, num_tokens))
    x = rng.normal(size=(batch, num_tokens, width))
    idx = np.sort(rng.permuted(np.tile(np.arange(num_tokens), (batch, 1)), axis=1)[:, : num_tokens // 2], axis=1)
    qbar = rng.normal(size=width)
    side = int(np.sqrt(num_tokens)) * 8
    images = rng.normal(size=(batch, 3, side, side))
    labels = rng.integers(0, 5, size=(batch, side, side)).astype(np.int64)
    cases = {
        "topk_split": lambda m: m.topk_split(scores, num_tokens // 2),
        "gather_rows": lambda m: m.gather_rows(x, idx),
        "scatter_add_rows": lambda m: m.scatter_add_rows(x[:, : num_tokens // 2], idx, num_tokens),
        "folded_scores": lambda m: m.folded_scores(x, qbar),
        "patch_variance": lambda m: m.patch_variance(images, 8),
        "majority_downsample": lambda m: m.majority_downsample(labels, 8, 255, 5),
    }
    out = []
    for backend in kernels.available_backends():
        mod = kernels.backend_module(backend)
        for name, case in cases.items():
            times = time_calls(lambda: case(mod), reps, warmup)
            out.append(row(f"kernel/{name}/M{num_tokens}", backend, batch, "float64", times))
    return out


def to_csv(rows, header_lines=()):
    """CSV text: ``# ``-prefixed header lines, then the fixed column header."""
    buf = io.StringIO()
    for line in header_lines:
        buf.write(f"# {line}\n")
    writer = csv.DictWriter(buf, fieldnames=HEADER, lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: (f"{v:.6g}" if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def make_tokens(batch, num_tokens, width, seed=0, cls=False):
    """Seeded :class:`TokenBatch` for microbenchmarks and tests."""
    rng = np.random.default_rng(seed)
    tokens = T.Tensor(rng.normal(size=(batch, num_tokens, width)))
    pos = np.broadcast_to(np.arange(num_tokens), (batch, num_tokens)).copy()
    if cls:
        pos[:, 0] = -1
        pos[:, 1:] = np.arange(num_tokens - 1)
    return TokenBatch(tokens, pos, cls)
