"""Time every routing kernel under the numba and numpy backends.

    python benchmarks/bench_kernels.py --tokens 1024 4096 --out kernels.csv

Prints the benchmark CSV followed by a numpy/numba speedup per kernel.
"""
import argparse
import sys
from collections import defaultdict

from cropr import bench


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--tokens", type=int, nargs="+", default=[1024, 4096])
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--reps", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="also write the CSV here")
    args = p.parse_args(argv)

    rows = []
    for m in args.tokens:
        rows += bench.bench_kernels(args.batch, m, args.width, args.reps, seed=args.seed)
    text = bench.to_csv(rows, ["cropr kernel benchmark", "backends " + " ".join(bench.kernels.available_backends())])
    print(text, end="")
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)

    p50 = defaultdict(dict)
    for r in rows:
        p50[r["config"]][r["mode"]] = r["p50_ms"]
    for config, by_backend in p50.items():
        if {"numba", "numpy"} <= set(by_backend):
            print(f"{config}: numba {by_backend['numpy'] / by_backend['numba']:.2f}x vs numpy", file=sys.stderr)
    return rows


if __name__ == "__main__":
    main()
