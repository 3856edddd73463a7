"""Command-line entry point (``cropr <command>``).

Exit codes: 0 success, 2 configuration error, 3 numeric or validation
failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import bench as B
from . import config as C
from . import tensor as T
from .checkpoint import load_container, load_model, save_container, save_folded, save_model
from .data import build_task
from .errors import ConfigError, CroprError, ScheduleError, UnsupportedVariantError
from .flops import flops
from .model import PrunedViT, build_model
from .schedule import format_table, tpr_percent, validate_div8
from .train import TrainConfig, evaluate, targets_for, train

log = logging.getLogger("cropr")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


class NumericFailure(Exception):
    pass


# -- helpers ---------------------------------------------------------------------

def _resolve(args):
    cfg = C.load(args.config, args.set or ())
    if getattr(args, "seed", None) is not None:
        cfg["train"]["seed"] = args.seed
    return cfg


def _precision(cfg):
    name = cfg["train"].get("precision", "float32")
    if name not in ("float32", "float64"):
        raise ConfigError(f"precision must be float32 or float64, got {name!r}")
    return np.dtype(name)


def _dataset(cfg, model_cfg, split, n=None):
    t = cfg["task"]
    params = dict(t.get("params", {}))
    params.setdefault("image_side", model_cfg.image_side)
    params.setdefault("patch", model_cfg.patch_size)
    params.setdefault("channels", model_cfg.channels)
    params.setdefault("num_classes", model_cfg.num_classes)
    try:
        task = build_task(t["name"], **params)
    except TypeError as exc:
        raise ConfigError(f"bad task params: {exc}") from exc
    seed = int(t.get("seed", 1))
    size = n if n is not None else int(t["train_size" if split == "train" else "test_size"])
    # train and test streams come from disjoint seed sequences
    return task.dataset(size, [seed, 0 if split == "train" else 1])


def _build(cfg):
    model_cfg = C.model_config(cfg)
    schedule = C.schedule_from(cfg, model_cfg)
    sel = cfg["selector"]
    with T.default_dtype(_precision(cfg)):
        model = build_model(model_cfg, schedule, C.task_kind(cfg), sel["name"], cfg["fusion"]["name"],
                            sel.get("variant") or None, int(cfg["train"]["seed"]))
    return model


def _write_csv(path, rows, header, fieldnames=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fieldnames = fieldnames or sorted({k for r in rows for k in r}, key=lambda k: (k != "epoch", k))
    with open(path, "w", newline="") as fh:
        for line in header:
            fh.write(f"# {line}\n")
        writer = csv.DictWriter(fh, fieldnames=fieldnames, lineterminator="\n", restval="")
        writer.writeheader()
        for r in rows:
            writer.writerow({k: (f"{v:.9g}" if isinstance(v, float) else v) for k, v in r.items()})


def read_csv(path):
    """Rows of a CSV written by this tool (``#`` header lines skipped)."""
    with open(path) as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def _out(args, name):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out / name


# -- commands ----------------------------------------------------------------------

def cmd_schedule(args):
    cfg = _resolve(args)
    schedule = C.schedule_from(cfg)
    print(schedule.to_json(indent=2))
    print(format_table(schedule))
    print(f"total_pruned {schedule.total_pruned} of {schedule.m0} patch tokens; "
          f"TPR {schedule.tpr:.4f} ({tpr_percent(schedule)}%)")
    for w in validate_div8(schedule):
        print(f"warning: {w}")
    if args.out:
        path = _out(args, "schedule.json")
        path.write_text(schedule.to_json(indent=2) + "\n")
    return EXIT_OK


def cmd_train(args):
    cfg = _resolve(args)
    model = _build(cfg)
    tcfg = dict(cfg["train"])
    precision = np.dtype(tcfg.pop("precision", "float32"))
    init_from = tcfg.pop("init_from", None)
    tcfg = TrainConfig.from_dict(tcfg)
    header = C.header_lines(cfg, "train")
    with T.default_dtype(precision):
        if init_from:
            src, _ = load_model(init_from)
            model.vit.load_state_dict(src.vit.state_dict())
        train_data = _dataset(cfg, model.config, "train")
        test_data = _dataset(cfg, model.config, "test")
        rows = []

        def on_epoch(row):
            rows.append(row)
            log.info("epoch %d %s", row["epoch"], {k: round(v, 4) for k, v in row.items() if k != "epoch"})

        try:
            train(model, train_data, tcfg, test_data, on_epoch)
        except FloatingPointError as exc:
            raise NumericFailure(str(exc)) from exc
    _write_csv(_out(args, "metrics.csv"), rows, header)
    save_model(_out(args, "model.ckpt"), model, {"config_hash": C.config_hash(cfg), "run_config": cfg})
    print(json.dumps(rows[-1] if rows else {}, sort_keys=True))
    return EXIT_OK


def _eval_model(args, cfg):
    model, meta = load_model(args.checkpoint)
    selector = args.selector or model.selector
    fusion = args.fusion or model.fusion
    schedule = model.schedule
    if args.rate is not None:
        schedule = schedule.at_rate(args.rate)
    if (selector, fusion) != (model.selector, model.fusion) or schedule is not model.schedule:
        if fusion != model.fusion:
            d = schedule.to_dict()
            d["llf"] = fusion == "llf"
            schedule = type(schedule).from_dict(d)
        with T.default_dtype(np.dtype(meta.get("dtype", "float64"))):
            other = PrunedViT(model.config, schedule, model.task, selector, fusion, model.variant, model.seed)
        other.vit.load_state_dict(model.vit.state_dict())
        if selector == model.selector and set(other.croprs) <= set(model.croprs):
            for key, module in other.croprs.items():
                module.load_state_dict(model.croprs[key].state_dict())
        if model.folded_only and selector == model.selector:
            other.croprs = {}
            other.folded = {b: r for b, r in model.folded.items() if b in schedule.prune_map()}
        model = other
    return model, meta


def cmd_eval(args):
    cfg = _resolve(args)
    model, meta = _eval_model(args, cfg)
    run_cfg = meta.get("run_config", cfg)
    if args.config:
        run_cfg = cfg
    with T.default_dtype(np.dtype(meta.get("dtype", "float64"))):
        data = _dataset(run_cfg, model.config, "test", args.num_samples)
        if args.workers > 1:
            row = _parallel_eval(model, data, args.workers, args.folded)
        else:
            row = evaluate(model, data, folded=args.folded, rng=np.random.default_rng(cfg["train"]["seed"]))
    row = {"selector": model.selector, "fusion": model.fusion, "tpr": model.schedule.tpr,
           "folded": bool(args.folded), "samples": len(data["images"]), **row}
    header = C.header_lines(run_cfg, "eval") + [f"checkpoint {args.checkpoint}",
                                                f"selector {model.selector}", f"fusion {model.fusion}"]
    _write_csv(_out(args, "eval.csv"), [row], header, list(row))
    print(json.dumps(row, sort_keys=True))
    return EXIT_OK


def _parallel_eval(model, data, workers, folded):
    """Evaluate disjoint shards on a thread pool; parameters are read-only."""
    n = len(data["images"])
    bounds = np.linspace(0, n, workers + 1).astype(int)
    shards = [{k: v[a:b] for k, v in data.items()} for a, b in zip(bounds[:-1], bounds[1:]) if b > a]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(lambda d: (len(d["images"]), evaluate(model, d, folded=folded)), shards))
    total = sum(k for k, _ in results)
    keys = results[0][1].keys()
    return {key: sum(k * r[key] for k, r in results) / total for key in keys}


def cmd_fold(args):
    model, meta = load_model(args.checkpoint)
    if model.selector not in ("cropr", "non_salient"):
        raise ConfigError(f"checkpoint uses selector {model.selector!r}; nothing to fold")
    model.fold()
    out = Path(args.output) if args.output else Path(args.checkpoint).with_suffix(".folded.ckpt")
    save_folded(out, model, {k: v for k, v in meta.items() if k in ("config_hash", "run_config")})
    if args.verify:
        cfg = meta.get("run_config") or C.load()
        folded, _ = load_model(out)
        rng = np.random.default_rng(args.verify_seed)
        c = model.config
        images = rng.normal(size=(args.verify, c.channels, c.image_side, c.image_side))
        a = model.predict(images).logits.data
        b = folded.predict(images, folded=True).logits.data
        err = float(np.max(np.abs(a - b)) / max(1.0, float(np.max(np.abs(a)))))
        print(f"verify: {args.verify} inputs, max rel. logit difference {err:.3e}")
        if err > 1e-6:
            raise NumericFailure(f"folded predictions differ from training-mode routing ({err:.3e})")
    print(str(out))
    return EXIT_OK


def cmd_bench(args):
    cfg = _resolve(args)
    bc = cfg["bench"]
    rows = []
    rows += B.bench_router(bc["router_tokens"], bc["router_width"], reps=bc["router_reps"],
                           seed=cfg["train"]["seed"])
    model = _build(cfg)
    unpruned_cfg = json.loads(json.dumps(cfg))
    unpruned_cfg["schedule"] = {"kind": "staged", "stages": []}
    unpruned_cfg["fusion"] = {"name": "none" if C.task_kind(cfg) != "segmentation" else "token_concat"}
    unpruned = _build(unpruned_cfg)
    rows += B.bench_model(model, bc["batch_sizes"], bc["reps"], seed=cfg["train"]["seed"])
    rows += B.bench_model(unpruned, bc["batch_sizes"], bc["reps"], seed=cfg["train"]["seed"],
                          label="unpruned")
    if not args.skip_kernels:
        rows += B.bench_kernels(num_tokens=bc["kernel_tokens"], seed=cfg["train"]["seed"])
    rows += B.best_rows(rows)
    report = flops(model.config, model.schedule, model.task == "segmentation")
    base = flops(model.config, None, model.task == "segmentation")
    header = C.header_lines(cfg, "bench") + [
        f"analytic_flops pruned={report.total:.6g} unpruned={base.total:.6g} ratio={report.total / base.total:.4f}"]
    text = B.to_csv(rows, header)
    _out(args, "bench.csv").write_text(text)
    print(text, end="")
    return EXIT_OK


def _stage_codes(model, stage_map):
    """Pruning block per patch, kept patches coded as depth + 1."""
    kept = model.config.depth + 1
    return np.where(stage_map == 0, kept, stage_map)


def _inputs(args, model, meta):
    if args.input:
        images = np.load(args.input)
        return images[None] if images.ndim == 3 else images
    cfg = meta.get("run_config") or C.load()
    return _dataset(cfg, model.config, "test", args.index + 1)["images"][args.index:args.index + 1]


def _stage_map(model, images):
    if model.fusion == "dtop":
        # auxiliary heads need targets; routing is label-independent
        with T.no_grad():
            dummy = np.zeros((len(images),) + _target_shape(model), dtype=_target_dtype(model))
            return model.forward(images, dummy).stage_map
    return model.predict(images, rng=np.random.default_rng(0)).stage_map


def _target_shape(model):
    c = model.config
    return {"classification": (), "multilabel": (c.num_classes,), "segmentation": (c.grid, c.grid)}[model.task]


def _target_dtype(model):
    return np.float64 if model.task == "multilabel" else np.int64


def write_pgm(path, values, maxval):
    """Binary PGM (P5), one byte per pixel."""
    values = np.asarray(values)
    if maxval > 255 or values.min() < 0 or values.max() > maxval:
        raise ConfigError("PGM values must lie in [0, maxval <= 255]")
    h, w = values.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n{maxval}\n".encode("ascii"))
        fh.write(values.astype(np.uint8).tobytes())


def read_pgm(path):
    with open(path, "rb") as fh:
        data = fh.read()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h = (int(v) for v in parts[1].split())
    maxval = int(parts[2])
    return np.frombuffer(parts[3], dtype=np.uint8, count=w * h).reshape(h, w), maxval


def cmd_heatmap(args):
    model, meta = load_model(args.checkpoint)
    images = _inputs(args, model, meta)
    codes = _stage_codes(model, _stage_map(model, images))[0]
    c = model.config
    grid = codes.reshape(c.grid, c.grid)
    scale = args.scale or c.patch_size
    write_pgm(_out(args, "heatmap.pgm"), np.kron(grid, np.ones((scale, scale), dtype=np.int64)), c.depth + 1)
    rows = [{"position": int(p), "row": int(p // c.grid), "col": int(p % c.grid), "stage": int(codes[p])}
            for p in range(c.num_patches)]
    cfg = meta.get("run_config") or {}
    _write_csv(_out(args, "heatmap.csv"), rows, C.header_lines(cfg, "heatmap") + [f"kept_code {c.depth + 1}"],
               ["position", "row", "col", "stage"])
    hist = {int(k): int(v) for k, v in zip(*np.unique(codes, return_counts=True))}
    print(json.dumps({"stage_histogram": hist}, sort_keys=True))
    return EXIT_OK


def _pre_head_tokens(model, images):
    """(B, M0, D) tokens entering the head, raster order, plus stage codes."""
    from .fusion import merge_by_position
    from .model import _drop_cls

    with T.no_grad():
        if model.fusion == "dtop":
            out = model.forward(images, np.zeros((len(images),) + _target_shape(model), dtype=_target_dtype(model)))
        else:
            out = model.forward(images, rng=np.random.default_rng(0))
    final = out.final
    m0 = model.config.num_patches
    if final.num_patches != m0:
        pruned = [r.pruned for r in out.routes]
        final = merge_by_position(out.routes[-1].keep if model.fusion == "none" else final, pruned, m0) \
            if model.fusion in ("none", "dtop") else final
    final = _drop_cls(final)
    return final.tokens.data, _stage_codes(model, out.stage_map)


def cmd_export_tokens(args):
    model, meta = load_model(args.checkpoint)
    cfg = meta.get("run_config") or C.load()
    data = _dataset(cfg, model.config, "test", args.num_samples)
    tokens, stages = [], []
    for start in range(0, len(data["images"]), 64):
        t, s = _pre_head_tokens(model, data["images"][start:start + 64])
        tokens.append(t)
        stages.append(s)
    tokens = np.concatenate(tokens)
    stages = np.concatenate(stages)
    n, m0, d = tokens.shape
    arrays = {"tokens": tokens.reshape(n * m0, d), "stage": stages.reshape(n * m0),
              "image_index": np.repeat(np.arange(n), m0), "position": np.tile(np.arange(m0), n)}
    for key in ("labels", "targets"):
        if key in data:
            arrays[key] = data[key]
    meta_out = {"kind": "tokens", "rows_per_image": m0, "kept_code": model.config.depth + 1,
                "config_hash": C.config_hash(cfg), "version": C.version_string()}
    path = _out(args, "tokens.bin")
    save_container(path, arrays, meta_out)
    print(f"{path} {n * m0} rows")
    return EXIT_OK


def cmd_gen_data(args):
    cfg = _resolve(args)
    model_cfg = C.model_config(cfg)
    data = _dataset(cfg, model_cfg, args.split, args.num_samples)
    meta = {"kind": "dataset", "task": cfg["task"], "split": args.split, "config_hash": C.config_hash(cfg),
            "version": C.version_string()}
    path = _out(args, f"{cfg['task']['name']}_{args.split}.bin")
    save_container(path, data, meta)
    print(str(path))
    return EXIT_OK


ABLATIONS = {
    "baseline": {},
    "mha_scorer": {"scorer": "mha"},
    "sampling_selector": {"selector": "sampling"},
    "mlp_off": {"mlp": False},
    "stop_grad_off": {"stop_gradient": False},
}


def cmd_ablate(args):
    cfg = _resolve(args)
    rows = []
    for name, variant in ABLATIONS.items():
        if args.only and name not in args.only:
            continue
        run = json.loads(json.dumps(cfg))
        run["selector"] = {"name": "cropr", "variant": variant}
        model = _build(run)
        tcfg = dict(run["train"])
        precision = np.dtype(tcfg.pop("precision", "float32"))
        tcfg.pop("init_from", None)
        with T.default_dtype(precision):
            train_data = _dataset(run, model.config, "train")
            test_data = _dataset(run, model.config, "test")
            hist = train(model, train_data, TrainConfig.from_dict(tcfg), test_data)
        row = {"variant": name, **{k: v for k, v in hist[-1].items() if not k.startswith("aux_")}}
        log.info("ablation %s %s", name, row)
        rows.append(row)
    _write_csv(_out(args, "ablation.csv"), rows, C.header_lines(cfg, "ablate"),
               list(dict.fromkeys(k for r in rows for k in r)))
    for r in rows:
        print(json.dumps(r, sort_keys=True))
    return EXIT_OK


# -- parser ------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="cropr", description="Token pruning for toy Vision Transformers")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True):
        sp.add_argument("--config", help="JSON run-config")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config key, e.g. schedule.r=8 (repeatable)")
        if seed:
            sp.add_argument("--seed", type=int, help="overrides train.seed")
        sp.add_argument("--out", default="runs/latest", help="output directory")

    sp = sub.add_parser("schedule", help="print a schedule, its trajectory and TPR")
    common(sp, seed=False)
    sp.set_defaults(func=cmd_schedule, out=None)

    sp = sub.add_parser("train", help="train a model; writes model.ckpt and metrics.csv")
    common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint; writes eval.csv")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--selector", help="swap the token selector (backbone weights are kept)")
    sp.add_argument("--fusion", help="swap the fusion strategy")
    sp.add_argument("--rate", type=int, help="rescale the schedule so its largest R is this value")
    sp.add_argument("--folded", action="store_true", help="route with folded queries")
    sp.add_argument("--num-samples", type=int)
    sp.add_argument("--workers", type=int, default=1, help="evaluation threads (opt-in)")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("fold", help="write an inference checkpoint with summed queries")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--output")
    sp.add_argument("--verify", type=int, default=0, metavar="N",
                    help="compare folded vs training-mode predictions on N seeded inputs")
    sp.add_argument("--verify-seed", type=int, default=0)
    sp.set_defaults(func=cmd_fold)

    sp = sub.add_parser("bench", help="router, model and kernel wall-clock benchmarks")
    common(sp)
    sp.add_argument("--skip-kernels", action="store_true")
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("heatmap", help="per-patch pruning stage map (PGM + CSV)")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--input", help=".npy image (C,H,W) or batch; default: a test sample")
    sp.add_argument("--index", type=int, default=0)
    sp.add_argument("--scale", type=int, help="pixels per patch in the PGM (default: patch size)")
    sp.add_argument("--out", default="runs/latest")
    sp.set_defaults(func=cmd_heatmap)

    sp = sub.add_parser("export-tokens", help="dump pre-head tokens with pruning-stage tags")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--num-samples", type=int, default=16)
    sp.add_argument("--out", default="runs/latest")
    sp.set_defaults(func=cmd_export_tokens)

    sp = sub.add_parser("gen-data", help="export a synthetic dataset in the container format")
    common(sp)
    sp.add_argument("--split", choices=("train", "test"), default="test")
    sp.add_argument("--num-samples", type=int)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("ablate", help="train the pruning-module variants and compare them")
    common(sp)
    sp.add_argument("--only", nargs="+", choices=sorted(ABLATIONS))
    sp.set_defaults(func=cmd_ablate)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (ConfigError, ScheduleError, UnsupportedVariantError, KeyError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericFailure, FloatingPointError, CroprError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
