"""Train a flow on a 2D toy dataset and render the learned density.

Usage:
    python3 scripts/train_toy.py --dataset checkerboard2d --out results/toy
"""

import argparse
from pathlib import Path

from cdflow import train, viz


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--dataset", default="checkerboard2d",
                    choices=["checkerboard2d", "moons2d", "circles2d"])
    ap.add_argument("--out", type=Path, default=None)
    ap.add_argument("--steps", type=int, default=5000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    out = args.out or Path("results") / args.dataset
    cfg = train.TrainConfig(dataset=args.dataset, dataset_size=50000,
                            eval_size=4096, L=1, K=16, m=2, hidden=96,
                            lr=3e-3, lr_schedule="cosine", batch=512,
                            steps=args.steps, seed=args.seed,
                            checkpoint_every=max(1000, args.steps // 5))
    data = train.make_dataset(cfg.dataset, seed=cfg.seed, size=cfg.dataset_size)
    held = train.make_dataset(cfg.dataset, seed=cfg.seed + 10_000,
                              size=cfg.eval_size)

    model = train.model_from_config(cfg, data)
    before = train.evaluate(model, held)
    model, rows = train.train(model, data, cfg, out_dir=out)
    after = train.evaluate(model, held)
    print(f"held-out nll: {before:.4f} -> {after:.4f} "
          f"({(before - after) / before:.1%} reduction)")

    viz.line_chart_svg(out / "loss.svg",
                       {"train nll": ([r["step"] for r in rows],
                                      [r["nll"] for r in rows])},
                       xlabel="step", ylabel="nll", title=args.dataset)
    density = viz.density_grid(model, extent=3.0, resolution=256)
    viz.save_heatmap(out / "density.ppm", density)
    print(f"wrote {out}/loss.svg and {out}/density.ppm")


if __name__ == "__main__":
    main()
