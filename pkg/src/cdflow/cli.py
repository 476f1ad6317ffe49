"""Command-line entry point.

Subcommands: train, eval, sample, bench, fit-dense, plot. Every run that
produces an output directory writes a ``resolved_config.json`` sufficient
to reproduce it, and all randomness flows from the seed flags through
named substreams. Exit codes: 0 success, 1 usage or configuration error,
2 numerical failure during training.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np
import scipy.linalg
import scipy.stats

from . import baselines  # noqa: F401  (registers the dense/triangular/LU mixing kinds)
from . import bench, flow, structured, train, util, viz

__all__ = ["main", "entry", "build_parser"]


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def build_parser() -> _Parser:
    p = _Parser(prog="cdflow",
                description="Normalizing flows with diagonal-circulant "
                            "channel mixing: train, evaluate, sample, "
                            "benchmark, fit dense targets, plot.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model from a JSON config")
    t.add_argument("--config", required=True, help="JSON file of TrainConfig fields")
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--seed", type=int, default=None, help="override config seed")

    e = sub.add_parser("eval", help="evaluate a checkpoint on held-out data")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", default=None,
                   help="dataset name (default: the checkpoint's)")
    e.add_argument("--metric", choices=("nll", "bpd"), default="nll")
    e.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("sample", help="draw samples from a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--count", type=int, default=16)
    s.add_argument("--temperature", type=float, default=1.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)

    b = sub.add_parser("bench", help="time structured vs dense layer ops")
    b.add_argument("--n", default=None,
                   help="comma-separated sizes (default: the standard grid)")
    b.add_argument("--m", type=int, default=2)
    b.add_argument("--batch", type=int, default=64)
    b.add_argument("--repeats", type=int, default=30)
    b.add_argument("--warmup", type=int, default=3)
    b.add_argument("--include-reshape", type=int, choices=(0, 1), default=0)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", required=True)

    f = sub.add_parser("fit-dense", help="fit a chain to a dense target matrix")
    f.add_argument("--n", type=int, required=True)
    f.add_argument("--m", type=int, required=True)
    f.add_argument("--target", choices=("gaussian", "orthogonal", "circulant"),
                   default="gaussian")
    f.add_argument("--steps", type=int, default=4000)
    f.add_argument("--lr", type=float, default=0.02)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--out", required=True)

    pl = sub.add_parser("plot", help="render CSVs to SVG charts and "
                                     "checkpoints to density heatmaps")
    pl.add_argument("inputs", nargs="*", help="CSV files (bench, metrics, "
                                              "or m-ablation schema)")
    pl.add_argument("--checkpoint", default=None,
                    help="2D toy checkpoint for a density heatmap")
    pl.add_argument("--out", required=True)
    return p


def _write_resolved(out: Path, payload: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.json").write_text(json.dumps(payload, indent=2) + "\n")


_RESUME_FREE_FIELDS = {"steps", "checkpoint_every", "eval_size"}


def _check_resume(old: train.TrainConfig, new: train.TrainConfig) -> None:
    a, b = old.to_dict(), new.to_dict()
    for k in _RESUME_FREE_FIELDS:
        a.pop(k), b.pop(k)
    diff = [k for k in a if a[k] != b[k]]
    if diff:
        raise ValueError(f"config does not match the checkpoint in --out "
                         f"(differs on: {', '.join(sorted(diff))}); use a "
                         f"fresh output directory to change those fields")


def cmd_train(args) -> int:
    cfg_path = Path(args.config)
    raw = json.loads(cfg_path.read_text())
    if args.seed is not None:
        raw["seed"] = args.seed
    cfg = train.TrainConfig.from_dict(raw)
    out = Path(args.out)
    data = train.make_dataset(cfg.dataset, seed=cfg.seed, size=cfg.dataset_size,
                              image_size=cfg.image_size, path=cfg.data_path)
    ckpt = train.latest_checkpoint(out) if out.exists() else None
    if ckpt is not None:
        model, adam, manifest = train.load_train_checkpoint(ckpt)
        _check_resume(train.TrainConfig.from_dict(manifest["train_config"]), cfg)
        start = int(manifest["step"])
    else:
        model, adam, start = train.model_from_config(cfg, data), None, 0
    _write_resolved(out, {"command": "train", "train_config": cfg.to_dict()})
    model, rows = train.train(model, data, cfg, out_dir=out, adam=adam,
                              start_step=start)
    if rows:
        print(f"step {rows[-1]['step']}: nll {rows[-1]['nll']:.6g} "
              f"bpd {rows[-1]['bpd']:.6g}")
    else:
        print(f"nothing to do: checkpoint already at step {start}")
    return 0


def _eval_dataset(args, manifest, model):
    tc = (train.TrainConfig.from_dict(manifest["train_config"])
          if "train_config" in manifest else train.TrainConfig())
    name = args.dataset or tc.dataset
    ds = train.make_dataset(name, seed=args.seed + 10_000, size=tc.eval_size,
                            image_size=tc.image_size,
                            path=tc.data_path if name == tc.dataset else None)
    if ds.sample_shape != model.in_shape:
        raise ValueError(f"dataset {name!r} samples have shape "
                         f"{ds.sample_shape}, which does not match the "
                         f"model input {model.in_shape}")
    return ds


def cmd_eval(args) -> int:
    model, manifest = flow.load_checkpoint(args.checkpoint)
    ds = _eval_dataset(args, manifest, model)
    value = train.evaluate(model, ds, metric=args.metric, eval_seed=args.seed)
    print(repr(float(value)))
    return 0


def cmd_sample(args) -> int:
    model, manifest = flow.load_checkpoint(args.checkpoint)
    out = Path(args.out)
    _write_resolved(out, {"command": "sample", "checkpoint": str(args.checkpoint),
                          "count": args.count, "temperature": args.temperature,
                          "seed": args.seed})
    x = model.sample(args.count, temperature=args.temperature, seed=args.seed)
    C, H, W = model.in_shape
    if H == 1 and W == 1:
        header = ",".join(f"x{i}" for i in range(C))
        lines = [header] + [",".join(repr(float(v)) for v in row)
                            for row in x.reshape(args.count, C)]
        (out / "samples.csv").write_text("\n".join(lines) + "\n")
        print(f"wrote {out / 'samples.csv'}")
    else:
        img = np.clip(np.floor(x * 256.0), 0, 255).astype(np.uint8)
        viz.write_ppm(out / "samples.ppm", viz.tile_images(img))
        print(f"wrote {out / 'samples.ppm'}")
    return 0


def cmd_bench(args) -> int:
    ns = (tuple(int(s) for s in str(args.n).split(",")) if args.n
          else bench.DEFAULT_NS)
    cfg = bench.BenchConfig(ns=ns, batch=args.batch, m=args.m,
                            repeats=args.repeats, warmup=args.warmup,
                            seed=args.seed,
                            include_reshape=bool(args.include_reshape))
    out = Path(args.out)
    _write_resolved(out, {"command": "bench", **dataclasses.asdict(cfg)})
    records = bench.bench_suite(cfg)
    bench.write_records(out / "bench.csv", records)
    print(f"wrote {out / 'bench.csv'} ({len(records)} records)")
    return 0


def _make_target(kind: str, n: int, rng: np.random.Generator) -> np.ndarray:
    if kind == "gaussian":
        return rng.standard_normal((n, n)) / np.sqrt(n)
    if kind == "orthogonal":
        return scipy.stats.ortho_group.rvs(n, random_state=rng)
    # circulant: shift the DC eigenvalue away from zero so the target is
    # well conditioned; representability (D=I, C=target, D=I) is unaffected
    c = rng.standard_normal(n)
    c[0] += 3.0
    return scipy.linalg.circulant(c)


def cmd_fit_dense(args) -> int:
    rng = util.named_rng(args.seed, "fit-dense", args.target)
    M = _make_target(args.target, args.n, rng)
    chain, history = structured.fit_dense(M, m=args.m, steps=args.steps,
                                          lr=args.lr, seed=args.seed)
    out = Path(args.out)
    _write_resolved(out, {"command": "fit-dense", "n": args.n, "m": args.m,
                          "target": args.target, "steps": args.steps,
                          "lr": args.lr, "seed": args.seed})
    structured.save_chain(out / "fitted.chain", chain, seed=args.seed)
    (out / "loss.csv").write_text(
        "step,loss\n" + "\n".join(f"{i + 1},{float(v)!r}"
                                  for i, v in enumerate(history)) + "\n")
    print(f"final relative Frobenius error {float(history[-1])!r}")
    return 0


def _plot_one(csv_path: Path, out: Path) -> Path:
    header = csv_path.read_text().splitlines()[0].split(",")
    dest = out / f"{csv_path.stem}.svg"
    if header[:3] == ["kind", "op", "n"]:
        records = bench.read_records(csv_path)
        series: dict = {}
        for r in sorted(records, key=lambda r: r.n):
            xs, ys = series.setdefault(f"{r.kind} {r.op}", ([], []))
            xs.append(r.n)
            ys.append(r.median_ms)
        viz.line_chart_svg(dest, series, xlabel="n", ylabel="median ms",
                           title="runtime vs n", log_x=True, log_y=True)
    elif "step" in header and "nll" in header:
        with open(csv_path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        xs = [int(r["step"]) for r in rows]
        viz.line_chart_svg(dest, {"nll": (xs, [float(r["nll"]) for r in rows])},
                           xlabel="step", ylabel="nll", title="training loss")
    elif header[:3] == ["m", "n", "param_count"]:
        with open(csv_path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        series = {}
        for r in sorted(rows, key=lambda r: int(r["m"])):
            xs, ys = series.setdefault(r["op"], ([], []))
            xs.append(int(r["m"]))
            ys.append(float(r["median_ms"]))
        viz.line_chart_svg(dest, series, xlabel="m", ylabel="median ms",
                           title="runtime vs factor count", log_y=True)
    else:
        raise ValueError(f"unrecognized csv schema in {csv_path} "
                         f"(header: {','.join(header)})")
    return dest


def cmd_plot(args) -> int:
    if not args.inputs and not args.checkpoint:
        raise _UsageError("plot needs CSV inputs and/or --checkpoint")
    out = Path(args.out)
    _write_resolved(out, {"command": "plot",
                          "inputs": [str(i) for i in args.inputs],
                          "checkpoint": (str(args.checkpoint)
                                         if args.checkpoint else None)})
    for inp in args.inputs:
        print(f"wrote {_plot_one(Path(inp), out)}")
    if args.checkpoint:
        model, _ = flow.load_checkpoint(args.checkpoint)
        viz.save_heatmap(out / "density.ppm",
                         viz.density_grid(model, extent=3.0, resolution=256))
        print(f"wrote {out / 'density.ppm'}")
    return 0


_DISPATCH = {
    "train": cmd_train,
    "eval": cmd_eval,
    "sample": cmd_sample,
    "bench": cmd_bench,
    "fit-dense": cmd_fit_dense,
    "plot": cmd_plot,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    try:
        return _DISPATCH[args.command](args)
    except _UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except train.NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 2
    except (ValueError, KeyError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def entry() -> None:
    sys.exit(main())
