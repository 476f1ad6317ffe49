"""Sweep the chain factor count m: op timings at a fixed size, and
(optionally) short fixed-budget density fits to confirm every m trains.

Usage:
    python3 scripts/m_ablation.py --out results/ablation --train
"""

import argparse
from pathlib import Path

import numpy as np

from cdflow import bench, train, viz


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", type=Path, default=Path("results/ablation"))
    ap.add_argument("--n", type=int, default=96)
    ap.add_argument("--ms", type=str, default="2,3,4,5")
    ap.add_argument("--repeats", type=int, default=50)
    ap.add_argument("--train", action="store_true",
                    help="also run a short checkerboard fit per m")
    ap.add_argument("--steps", type=int, default=1200)
    args = ap.parse_args()

    ms = tuple(int(s) for s in args.ms.split(","))
    args.out.mkdir(parents=True, exist_ok=True)

    rows = bench.m_ablation(n=args.n, ms=ms, repeats=args.repeats)
    bench.write_csv(args.out / "ablation.csv", rows)
    med = {(r["m"], r["op"]): r["median_ms"] for r in rows}
    for op in bench.OPS:
        line = "  ".join(f"m={m}: {med[(m, op)]:.4f}ms" for m in ms)
        print(f"{op:8s} {line}")
    series = {op: (list(ms), [med[(m, op)] for m in ms]) for op in bench.OPS}
    viz.line_chart_svg(args.out / "ablation.svg", series, xlabel="m",
                       ylabel="median ms",
                       title=f"chain op cost vs factor count (n={args.n})",
                       log_y=True)

    if args.train:
        fit_rows = []
        for m in ms:
            cfg = train.TrainConfig(dataset="checkerboard2d",
                                    dataset_size=8192, L=1, K=4, m=m,
                                    hidden=32, lr=3e-3, batch=256,
                                    steps=args.steps, seed=0,
                                    checkpoint_every=10 ** 9)
            data = train.make_dataset(cfg.dataset, seed=0, size=cfg.dataset_size)
            held = train.make_dataset(cfg.dataset, seed=10_000, size=2048)
            model = train.model_from_config(cfg, data)
            model, _ = train.train(model, data, cfg)
            nll = train.evaluate(model, held)
            mix = sum(l.effective_param_count for l in model.mixing_layers())
            fit_rows.append({"m": m, "mixing_params": mix,
                             "heldout_nll": nll})
            print(f"m={m}: mixing params {mix}, held-out nll {nll:.4f}")
        bench.write_csv(args.out / "training.csv", fit_rows)
        params = np.array([r["mixing_params"] for r in fit_rows])
        assert np.all(np.diff(params, 2) == 0), "param growth must be linear"

    print(f"wrote results under {args.out}")


if __name__ == "__main__":
    main()
