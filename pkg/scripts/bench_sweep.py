"""Time forward/inverse/logdet for dense, LU, and chain layers over a size
grid, then report the fitted log-log slopes and plot the medians.

Usage:
    python3 scripts/bench_sweep.py --out results/bench
"""

import argparse
from pathlib import Path

from cdflow import bench, viz


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", type=Path, default=Path("results/bench"))
    ap.add_argument("--ns", type=str, default=None,
                    help="comma-separated sizes (default: 16..1024 grid)")
    ap.add_argument("--batch", type=int, default=64)
    ap.add_argument("--m", type=int, default=2)
    ap.add_argument("--repeats", type=int, default=30)
    ap.add_argument("--include-reshape", action="store_true")
    ap.add_argument("--multi-thread", action="store_true",
                    help="let BLAS use all cores instead of pinning to one")
    args = ap.parse_args()

    ns = bench.DEFAULT_NS if args.ns is None else \
        tuple(int(s) for s in args.ns.split(","))
    cfg = bench.BenchConfig(ns=ns, batch=args.batch, m=args.m,
                            repeats=args.repeats,
                            include_reshape=args.include_reshape,
                            single_thread=not args.multi_thread)
    records = bench.bench_suite(cfg)

    args.out.mkdir(parents=True, exist_ok=True)
    bench.write_records(args.out / "bench.csv", records)

    if len(set(ns)) >= 4:  # slope fits use the upper half of the grid
        for op in bench.OPS:
            for kind in bench.KINDS:
                slope = bench.slope_fit(records, kind, op)
                print(f"{kind:8s} {op:8s} slope {slope:+.3f}")

    series = {}
    for kind in bench.KINDS:
        for op in bench.OPS:
            pts = sorted((r.n, r.median_ms) for r in records
                         if r.kind == kind and r.op == op)
            series[f"{kind} {op}"] = ([p[0] for p in pts],
                                      [p[1] for p in pts])
    viz.line_chart_svg(args.out / "bench.svg", series, xlabel="n",
                       ylabel="median ms", title="layer op cost vs size",
                       log_x=True, log_y=True)
    print(f"wrote {args.out / 'bench.csv'} and {args.out / 'bench.svg'}")


if __name__ == "__main__":
    main()
