"""Micro-benchmarks for the structured layers against dense baselines.

Every measurement is a median over repeated runs on a monotonic clock with
warmup excluded and a checksum folded out of the results so the work cannot
be optimized away. BLAS thread pools are pinned to one thread by default so
the asymptotic comparison is not confounded by parallelism. ``slope_fit``
estimates log-log cost exponents from the upper half of the size grid,
where the asymptotic term dominates.

``m_ablation`` times chain ops as the number of diagonal factors grows, and
``layer_type_study`` trains otherwise-identical flows whose channel-mixing
layer is dense, triangular, permuted-LU, or a diagonal-circulant chain.
"""

from __future__ import annotations

import csv
import time
from contextlib import nullcontext
from dataclasses import dataclass, fields

import numpy as np
from threadpoolctl import threadpool_limits

from . import baselines, flow, structured, util
from . import train as train_mod

__all__ = [
    "TimingResult", "time_op", "BenchRecord", "BenchConfig", "bench_suite",
    "write_records", "read_records", "write_csv", "slope_fit", "m_ablation",
    "layer_type_study", "DEFAULT_NS", "KINDS", "OPS",
]

DEFAULT_NS = (16, 32, 64, 96, 128, 256, 512, 1024)
KINDS = ("dense", "dense_lu", "cdchain")
OPS = ("forward", "inverse", "logdet")

MIN_SUITE_REPEATS = 30


@dataclass(frozen=True)
class TimingResult:
    median_ms: float
    mad_ms: float
    repeats: int
    checksum: float


def time_op(thunk, repeats: int, warmup: int = 1) -> TimingResult:
    """Median / MAD wall time of ``thunk`` in milliseconds.

    The checksum is the summed output of the first timed run; callers fold
    it into their records so dead-code elimination can never fake a result.
    """
    if repeats < 2:
        raise ValueError("repeats must be at least 2")
    for _ in range(warmup):
        thunk()
    times = np.empty(repeats)
    checksum = 0.0
    for i in range(repeats):
        t0 = time.perf_counter()
        out = thunk()
        times[i] = (time.perf_counter() - t0) * 1e3
        if i == 0:
            checksum = float(np.sum(np.asarray(out, dtype=np.float64)))
    median = float(np.median(times))
    mad = float(np.median(np.abs(times - median)))
    return TimingResult(median, mad, repeats, checksum)


@dataclass(frozen=True)
class BenchRecord:
    kind: str
    op: str
    n: int
    spatial: int
    batch: int
    include_reshape: bool
    median_ms: float
    mad_ms: float
    repeats: int
    checksum: float

    def __post_init__(self):
        if self.repeats < MIN_SUITE_REPEATS:
            raise ValueError(f"suite records need repeats >= {MIN_SUITE_REPEATS}, "
                             f"got {self.repeats}")


_RECORD_FIELDS = tuple(f.name for f in fields(BenchRecord))


@dataclass(frozen=True)
class BenchConfig:
    ns: tuple = DEFAULT_NS
    batch: int = 64
    spatial: int = 1
    m: int = 2
    repeats: int = 30
    warmup: int = 3
    seed: int = 0
    include_reshape: bool = False
    single_thread: bool = True


def _thread_guard(single_thread: bool):
    return threadpool_limits(limits=1) if single_thread else nullcontext()


def _build_layer(kind: str, chain: structured.CDChain, W: np.ndarray):
    if kind == "cdchain":
        return baselines.ChainOps(chain)
    if kind == "dense":
        return baselines.DenseLayer(W)
    if kind == "dense_lu":
        return baselines.LULayer.from_dense(W)
    raise ValueError(f"unknown baseline kind {kind!r}")


def _op_thunk(layer, op: str, cols, ycols, x4, y4, include_reshape: bool):
    if op == "logdet":
        return layer.logdet
    fn = layer.forward if op == "forward" else layer.inverse
    if not include_reshape:
        src = cols if op == "forward" else ycols
        return lambda: fn(src)
    src4 = x4 if op == "forward" else y4
    B, n, sp, _ = src4.shape

    def thunk():
        flat = np.ascontiguousarray(src4.transpose(1, 0, 2, 3).reshape(n, -1))
        out = fn(flat)
        return np.ascontiguousarray(
            out.reshape(n, B, sp, sp).transpose(1, 0, 2, 3))

    return thunk


def bench_suite(cfg: BenchConfig) -> list[BenchRecord]:
    """Time forward/inverse/logdet for all three kinds over the n grid."""
    records = []
    with _thread_guard(cfg.single_thread):
        for n in cfg.ns:
            rng = util.named_rng(cfg.seed, "bench", n)
            chain = structured.random_chain(rng, n, cfg.m)
            W = structured.chain_materialize(chain)
            cols = rng.standard_normal((n, cfg.batch * cfg.spatial ** 2))
            ycols = W @ cols
            x4 = np.ascontiguousarray(
                cols.reshape(n, cfg.batch, cfg.spatial, cfg.spatial)
                .transpose(1, 0, 2, 3))
            y4 = np.ascontiguousarray(
                ycols.reshape(n, cfg.batch, cfg.spatial, cfg.spatial)
                .transpose(1, 0, 2, 3))
            for kind in KINDS:
                layer = _build_layer(kind, chain, W)
                for op in OPS:
                    thunk = _op_thunk(layer, op, cols, ycols, x4, y4,
                                      cfg.include_reshape)
                    res = time_op(thunk, cfg.repeats, cfg.warmup)
                    records.append(BenchRecord(
                        kind=kind, op=op, n=n, spatial=cfg.spatial,
                        batch=cfg.batch, include_reshape=cfg.include_reshape,
                        median_ms=res.median_ms, mad_ms=res.mad_ms,
                        repeats=res.repeats, checksum=res.checksum))
    return records


def write_records(path, records) -> None:
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(_RECORD_FIELDS)
        for r in records:
            wr.writerow([r.kind, r.op, r.n, r.spatial, r.batch,
                         int(r.include_reshape), repr(r.median_ms),
                         repr(r.mad_ms), r.repeats, repr(r.checksum)])


def read_records(path) -> list[BenchRecord]:
    out = []
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            out.append(BenchRecord(
                kind=row["kind"], op=row["op"], n=int(row["n"]),
                spatial=int(row["spatial"]), batch=int(row["batch"]),
                include_reshape=bool(int(row["include_reshape"])),
                median_ms=float(row["median_ms"]), mad_ms=float(row["mad_ms"]),
                repeats=int(row["repeats"]), checksum=float(row["checksum"])))
    return out


def write_csv(path, rows) -> None:
    """Write a list of uniform dicts (first row fixes the column order)."""
    rows = list(rows)
    if not rows:
        raise ValueError("no rows to write")
    with open(path, "w", newline="") as f:
        wr = csv.DictWriter(f, fieldnames=list(rows[0]))
        wr.writeheader()
        wr.writerows(rows)


def slope_fit(records, kind: str, op: str) -> float:
    """Least-squares log-log slope over the upper half of the n grid.

    Small n is dominated by fixed overhead (dispatch, allocation), so only
    the larger half of the distinct sizes enters the fit.
    """
    pts = sorted((r.n, r.median_ms) for r in records
                 if r.kind == kind and r.op == op)
    if not pts:
        raise ValueError(f"no records for kind={kind!r} op={op!r}")
    ns = sorted({n for n, _ in pts})
    upper = set(ns[len(ns) // 2:])
    xs = np.log([float(n) for n, _ in pts if n in upper])
    ys = np.log([ms for n, ms in pts if n in upper])
    if np.unique(xs).size < 2:
        raise ValueError("need at least two distinct sizes in the upper half")
    return float(np.polyfit(xs, ys, 1)[0])


def m_ablation(n: int = 96, ms: tuple = (2, 3, 4, 5), batch: int = 64,
               spatial: int = 1, repeats: int = 30, warmup: int = 3,
               seed: int = 0, single_thread: bool = True) -> list[dict]:
    """Chain op timings and parameter counts as the factor count grows."""
    rows = []
    with _thread_guard(single_thread):
        for m in ms:
            rng = util.named_rng(seed, "ablation", m)
            chain = structured.random_chain(rng, n, m)
            layer = baselines.ChainOps(chain)
            cols = rng.standard_normal((n, batch * spatial ** 2))
            ycols = structured.chain_matvec(chain, cols)
            for op in OPS:
                thunk = _op_thunk(layer, op, cols, ycols, None, None, False)
                res = time_op(thunk, repeats, warmup)
                rows.append({"m": m, "n": n, "param_count": chain.param_count,
                             "op": op, "median_ms": res.median_ms,
                             "mad_ms": res.mad_ms, "repeats": res.repeats,
                             "checksum": res.checksum})
    return rows


STUDY_TYPES = ("full", "lower", "upper", "lu", "cdchain")


def layer_type_study(dataset: str = "checkerboard2d",
                     types: tuple = STUDY_TYPES, seeds: tuple = (0, 1, 2),
                     steps: int = 2000, dataset_size: int = 20000,
                     heldout_size: int = 4096, batch: int = 256,
                     hidden: int = 64, K: int = 8, L: int = 1, m: int = 2,
                     lr: float = 3e-3, lr_schedule: str = "cosine") -> list[dict]:
    """Train matched flows that differ only in their channel-mixing layer.

    Every (type, seed) pair sees the same data, architecture, and step
    budget; rows carry the held-out NLL plus the exact mixing parameter
    count so expressiveness can be weighed against size. A run that
    diverges is recorded with infinite NLL rather than aborting the study.
    """
    rows = []
    for kind in types:
        for seed in seeds:
            cfg = train_mod.TrainConfig(
                dataset=dataset, dataset_size=dataset_size,
                eval_size=heldout_size, L=L, K=K, m=m, hidden=hidden,
                lr=lr, lr_schedule=lr_schedule, batch=batch, steps=steps,
                seed=seed, mixing=kind)
            data = train_mod.make_dataset(dataset, seed=seed, size=dataset_size)
            held = train_mod.make_dataset(dataset, seed=seed + 10_000,
                                          size=heldout_size)
            model = train_mod.model_from_config(cfg, data)
            final_nll = heldout_nll = float("inf")
            try:
                model, metrics = train_mod.train(model, data, cfg)
                final_nll = metrics[-1]["nll"] if metrics else float("inf")
                heldout_nll = train_mod.evaluate(model, held, "nll",
                                                 eval_seed=seed)
            except train_mod.NumericalError:
                pass
            rows.append({
                "layer_type": kind, "seed": seed,
                "param_count": model.param_count,
                "mixing_param_count": sum(
                    layer.effective_param_count
                    for layer in model.mixing_layers()),
                "final_nll": final_nll, "heldout_nll": heldout_nll})
    return rows
