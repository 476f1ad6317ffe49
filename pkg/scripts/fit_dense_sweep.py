"""Fit chains of increasing depth to fixed dense targets and report how the
relative Frobenius error falls with m.

Usage:
    python3 scripts/fit_dense_sweep.py --out results/fit_dense
"""

import argparse
from pathlib import Path

import numpy as np
import scipy.linalg
import scipy.stats

from cdflow import bench, structured, viz


def make_target(kind: str, n: int, rng: np.random.Generator) -> np.ndarray:
    if kind == "gaussian":
        return rng.standard_normal((n, n)) / np.sqrt(n)
    if kind == "orthogonal":
        return scipy.stats.ortho_group.rvs(n, random_state=rng)
    if kind == "circulant":
        c = rng.uniform(-1.0, 1.0, size=n)
        c[0] += 3.0
        return scipy.linalg.circulant(c)
    raise ValueError(f"unknown target kind {kind!r}")


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", type=Path, default=Path("results/fit_dense"))
    ap.add_argument("--target", default="orthogonal",
                    choices=["gaussian", "orthogonal", "circulant"])
    ap.add_argument("--n", type=int, default=8)
    ap.add_argument("--ms", type=str, default="2,4,8")
    ap.add_argument("--seeds", type=str, default="0,1,2,3,4")
    ap.add_argument("--steps", type=int, default=8000)
    ap.add_argument("--lr", type=float, default=0.02)
    args = ap.parse_args()

    ms = tuple(int(s) for s in args.ms.split(","))
    seeds = tuple(int(s) for s in args.seeds.split(","))
    args.out.mkdir(parents=True, exist_ok=True)

    rows = []
    curves = {}
    for seed in seeds:
        rng = np.random.default_rng(100 + seed)
        target = make_target(args.target, args.n, rng)
        for m in ms:
            _, hist = structured.fit_dense(target, m=m, steps=args.steps,
                                           lr=args.lr, seed=seed)
            rows.append({"seed": seed, "m": m, "final_error": hist[-1]})
            if seed == seeds[0]:
                stride = max(1, args.steps // 400)
                curves[f"m={m}"] = (list(range(1, len(hist) + 1, stride)),
                                    list(hist[::stride]))
    bench.write_csv(args.out / "errors.csv", rows)

    for m in ms:
        finals = [r["final_error"] for r in rows if r["m"] == m]
        print(f"m={m}: median final error {np.median(finals):.6f} "
              f"(min {min(finals):.6f}, max {max(finals):.6f})")
    viz.line_chart_svg(args.out / "curves.svg", curves, xlabel="step",
                       ylabel="relative error", log_y=True,
                       title=f"{args.target} {args.n}x{args.n} target")
    print(f"wrote {args.out}/errors.csv and {args.out}/curves.svg")


if __name__ == "__main__":
    main()
