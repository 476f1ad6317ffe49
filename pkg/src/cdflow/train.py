"""Datasets, training loop, and evaluation for desk-scale experiments.

All randomness flows from the config seed through named substreams
(``data``/``dequant`` keyed by step, ``dequant-eval`` keyed by shard), so a
run can be stopped at any checkpoint and resumed bit-identically, and any
single step can be reproduced in isolation.
"""

from __future__ import annotations

import dataclasses
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import fft, flow, optim, util

__all__ = [
    "Dataset", "TrainConfig", "NumericalError", "make_dataset",
    "save_file_dataset", "texture_wave_params", "texture_field",
    "channel_lr_scale", "lr_at", "model_from_config", "train", "evaluate",
    "latest_checkpoint", "load_train_checkpoint", "METRICS_HEADER",
]

METRICS_HEADER = "step,nll,bpd,grad_norm,max_sigma,wall_ms"

TOY_KINDS = ("checkerboard2d", "moons2d", "circles2d")


@dataclass
class Dataset:
    """A fixed array of samples: (N, C, H, W), float64 or uint8.

    ``quantized`` marks 8-bit data that must be dequantized to [0, 1) with
    uniform noise before entering the model.
    """

    kind: str
    data: np.ndarray
    quantized: bool

    def __len__(self) -> int:
        return self.data.shape[0]

    def __getitem__(self, idx):
        return self.data[idx]

    @property
    def sample_shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape[1:])

    def batch(self, idx, rng: np.random.Generator | None = None) -> np.ndarray:
        x = self.data[idx]
        if self.quantized:
            if rng is None:
                raise ValueError("quantized dataset needs an rng for dequantization noise")
            return (x.astype(np.float64) + rng.uniform(size=x.shape)) / 256.0
        return x


def _checkerboard2d(rng: np.random.Generator, n: int) -> np.ndarray:
    cells = np.array([(i, j) for i in range(4) for j in range(4) if (i + j) % 2 == 0],
                     dtype=np.float64)
    offs = cells[rng.integers(0, len(cells), size=n)]
    return offs + rng.uniform(0.0, 1.0, size=(n, 2)) - 2.0


def _moons2d(rng: np.random.Generator, n: int, noise: float = 0.05) -> np.ndarray:
    n_out = n // 2
    t_out = rng.uniform(0.0, np.pi, n_out)
    t_in = rng.uniform(0.0, np.pi, n - n_out)
    outer = np.stack([np.cos(t_out), np.sin(t_out)], axis=1)
    inner = np.stack([1.0 - np.cos(t_in), 0.5 - np.sin(t_in)], axis=1)
    pts = np.concatenate([outer, inner], axis=0)
    return pts + noise * rng.standard_normal(pts.shape)


def _circles2d(rng: np.random.Generator, n: int, noise: float = 0.05) -> np.ndarray:
    n_out = n // 2
    t = rng.uniform(0.0, 2 * np.pi, n)
    r = np.where(np.arange(n) < n_out, 1.0, 0.5)
    pts = np.stack([r * np.cos(t), r * np.sin(t)], axis=1)
    return pts + noise * rng.standard_normal(pts.shape)


def texture_wave_params(seed: int, index: int) -> np.ndarray:
    """Rows (fx, fy, amplitude, phase) for one texture image.

    Frequencies are integers (cycles per period), so the field is exactly
    periodic; (0, 0) is excluded to keep every wave non-constant.
    """
    rng = util.named_rng(seed, "texture", index)
    k = int(rng.integers(2, 6))
    rows = []
    for _ in range(k):
        fx, fy = 0, 0
        while fx == 0 and fy == 0:
            fx, fy = (int(v) for v in rng.integers(-3, 4, size=2))
        amp = rng.uniform(0.5, 1.5)
        phase = rng.uniform(0.0, 2 * np.pi)
        rows.append((fx, fy, amp, phase))
    return np.array(rows)


def texture_field(params: np.ndarray, ys: np.ndarray, xs: np.ndarray,
                  period: int) -> np.ndarray:
    """Evaluate the wave sum on the grid ys x xs (continuous coordinates)."""
    Y, X = np.meshgrid(np.asarray(ys, dtype=np.float64),
                       np.asarray(xs, dtype=np.float64), indexing="ij")
    out = np.zeros_like(Y)
    for fx, fy, amp, phase in params:
        out += amp * np.sin(2 * np.pi * (fx * X + fy * Y) / period + phase)
    return out


def _texture_images(seed: int, size: int, image_size: int) -> np.ndarray:
    coords = np.arange(image_size, dtype=np.float64)
    out = np.zeros((size, 1, image_size, image_size), dtype=np.uint8)
    for i in range(size):
        field = texture_field(texture_wave_params(seed, i), coords, coords, image_size)
        lo, hi = field.min(), field.max()
        if hi - lo < 1e-9:
            continue
        q = np.floor((field - lo) / (hi - lo) * 256.0)
        out[i, 0] = np.clip(q, 0, 255).astype(np.uint8)
    return out


def save_file_dataset(path, arr: np.ndarray) -> None:
    """Write uint8 images as a flat little-endian blob plus a JSON sidecar."""
    arr = np.ascontiguousarray(arr, dtype=np.uint8)
    if arr.ndim != 4:
        raise ValueError("expected (count, C, H, W) array")
    path = Path(path)
    path.write_bytes(arr.tobytes())
    n, c, h, w = arr.shape
    Path(str(path) + ".json").write_text(
        json.dumps({"count": n, "C": c, "H": h, "W": w}))


def _load_file_dataset(path) -> np.ndarray:
    path = Path(path)
    meta = json.loads(Path(str(path) + ".json").read_text())
    shape = (meta["count"], meta["C"], meta["H"], meta["W"])
    arr = np.frombuffer(path.read_bytes(), dtype=np.uint8)
    if arr.size != np.prod(shape):
        raise ValueError(f"file dataset size mismatch: {arr.size} bytes for shape {shape}")
    return arr.reshape(shape).copy()


def make_dataset(kind: str, seed: int, size: int, image_size: int = 16,
                 path=None) -> Dataset:
    """Deterministic dataset generation; see module docstring for seeding."""
    rng = util.named_rng(seed, "dataset", kind)
    if kind in TOY_KINDS:
        pts = {"checkerboard2d": _checkerboard2d,
               "moons2d": _moons2d,
               "circles2d": _circles2d}[kind](rng, size)
        return Dataset(kind, pts.reshape(size, 2, 1, 1), quantized=False)
    if kind == "periodic_texture":
        return Dataset(kind, _texture_images(seed, size, image_size), quantized=True)
    if kind == "file":
        if path is None:
            raise ValueError("file dataset needs a path")
        return Dataset(kind, _load_file_dataset(path), quantized=True)
    raise ValueError(f"unknown dataset kind {kind!r}; known: "
                     f"{TOY_KINDS + ('periodic_texture', 'file')}")


@dataclass
class TrainConfig:
    dataset: str = "checkerboard2d"
    dataset_size: int = 50000
    eval_size: int = 4096
    image_size: int = 16
    data_path: str | None = None
    L: int = 1
    K: int = 8
    m: int = 2
    hidden: int = 64
    lr: float = 1e-3
    lr_schedule: str = "cosine"
    batch: int = 256
    steps: int = 5000
    seed: int = 0
    spectral_norm: bool = True
    spectral_target: float = 1.05
    channel_aware_lr: bool = True
    checkpoint_every: int = 1000
    init_noise: float = 0.01
    mixing: str = "cdchain"
    chain_init: str = "shift"

    def __post_init__(self):
        for name in ("dataset_size", "image_size", "L", "K", "m", "hidden",
                     "batch", "checkpoint_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.steps < 0 or self.lr < 0:
            raise ValueError("steps and lr must be non-negative")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {unknown}")
        return cls(**d)


class NumericalError(RuntimeError):
    """Training hit a non-finite loss; carries per-layer mean log-dets."""

    def __init__(self, step: int, layer_logdets: list[tuple[str, float]]):
        self.step = step
        self.layer_logdets = layer_logdets
        lines = "\n".join(f"  {name}: {val:.6g}" for name, val in layer_logdets)
        super().__init__(f"non-finite loss at step {step}; per-layer mean log-dets:\n{lines}")


def channel_lr_scale(n: int) -> float:
    """Chain parameters train at lr * min(1, 16/n) when the flag is on."""
    return min(1.0, 16.0 / n)


def lr_at(cfg: TrainConfig, step: int) -> float:
    if cfg.lr_schedule == "constant":
        return cfg.lr
    if cfg.lr_schedule == "cosine":
        frac = step / max(1, cfg.steps)
        return cfg.lr * 0.5 * (1.0 + np.cos(np.pi * frac))
    raise ValueError(f"unknown lr schedule {cfg.lr_schedule!r}")


def model_from_config(cfg: TrainConfig, dataset: Dataset) -> flow.FlowModel:
    c, h, w = dataset.sample_shape
    fc = flow.FlowConfig(channels=c, height=h, width=w, blocks=cfg.L,
                         steps_per_block=cfg.K, m=cfg.m, hidden=cfg.hidden,
                         init_noise=cfg.init_noise, mixing=cfg.mixing,
                         chain_init=cfg.chain_init)
    return flow.build_model(fc, seed=cfg.seed)


def _save_train_checkpoint(out: Path, model: flow.FlowModel, adam: optim.Adam,
                           cfg: TrainConfig, step: int) -> Path:
    ckpt = out / f"ckpt-{step:07d}"
    arrays = {}
    for name, t, m, v in adam.state_arrays():
        arrays[f"{name}::t"] = np.array(t)
        arrays[f"{name}::m"] = m
        arrays[f"{name}::v"] = v
    ckpt.mkdir(parents=True, exist_ok=True)
    np.savez(ckpt / "optim.npz", **arrays)
    flow.save_checkpoint(ckpt, model, step=step, seed=cfg.seed,
                         extra={"train_config": cfg.to_dict()})
    return ckpt


def latest_checkpoint(out_dir) -> Path | None:
    candidates = sorted(Path(out_dir).glob("ckpt-*"))
    return candidates[-1] if candidates else None


def load_train_checkpoint(ckpt_dir) -> tuple[flow.FlowModel, optim.Adam, dict]:
    ckpt = Path(ckpt_dir)
    model, manifest = flow.load_checkpoint(ckpt)
    cfg = TrainConfig.from_dict(manifest["train_config"])
    adam = optim.Adam(lr=cfg.lr)
    with np.load(ckpt / "optim.npz") as npz:
        names = sorted({k.rsplit("::", 1)[0] for k in npz.files})
        adam.load_state_arrays([
            (name, int(npz[f"{name}::t"]), npz[f"{name}::m"], npz[f"{name}::v"])
            for name in names])
    return model, adam, manifest


def train(model: flow.FlowModel, dataset: Dataset, cfg: TrainConfig,
          out_dir=None, adam: optim.Adam | None = None,
          start_step: int = 0) -> tuple[flow.FlowModel, list[dict]]:
    """Maximum-likelihood training; returns the step-indexed metrics rows.

    With ``out_dir`` set, appends metrics.csv as it goes and checkpoints on
    the configured cadence (and at the final step). Pass the checkpoint's
    optimizer and ``start_step`` to resume; the remaining steps reproduce an
    uninterrupted run bit-exactly (wall_ms aside).
    """
    specs = model.param_specs()
    if adam is None:
        adam = optim.Adam(lr=cfg.lr)
    csv_path = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        csv_path = out / "metrics.csv"
        if not (start_step > 0 and csv_path.exists()):
            csv_path.write_text(METRICS_HEADER + "\n")
    ln2 = np.log(2.0)
    offset = 8.0 if dataset.quantized else 0.0
    rows: list[dict] = []
    for s in range(start_step, cfg.steps):
        t0 = time.perf_counter()
        idx = util.named_rng(cfg.seed, "data", s).integers(0, len(dataset), cfg.batch)
        if dataset.quantized:
            x = dataset.batch(idx, util.named_rng(cfg.seed, "dequant", s))
        else:
            x = dataset.batch(idx)
        model.zero_grads()
        try:
            nll, layer_logdets = model.nll_backward(x)
            if not np.isfinite(nll):
                raise NumericalError(s, layer_logdets)
            grad_norm = float(np.sqrt(sum(np.sum(sp.grad ** 2) for sp in specs)))
            adam.lr = lr_at(cfg, s)
            adam.step([
                (sp.name, sp.param, sp.grad,
                 channel_lr_scale(sp.chain_n)
                 if cfg.channel_aware_lr and sp.chain_n else 1.0)
                for sp in specs])
            if cfg.spectral_norm:
                for mix in model.mixing_layers():
                    mix.spectral_rescale(cfg.spectral_target)
            max_sigma = max((mx.sigma_max() for mx in model.mixing_layers()),
                            default=0.0)
        except fft.NonFiniteInputError:
            # diverged parameters surface as inf/nan inside a layer before
            # the loss itself can be formed
            raise NumericalError(s, []) from None
        row = {
            "step": s + 1,
            "nll": nll,
            "bpd": nll / (model.dims * ln2) + offset,
            "grad_norm": grad_norm,
            "max_sigma": max_sigma,
            "wall_ms": (time.perf_counter() - t0) * 1e3,
        }
        rows.append(row)
        if csv_path is not None:
            with open(csv_path, "a") as fh:
                fh.write(f"{row['step']},{row['nll']!r},{row['bpd']!r},"
                         f"{row['grad_norm']!r},{row['max_sigma']!r},"
                         f"{row['wall_ms']:.3f}\n")
            if (s + 1) % cfg.checkpoint_every == 0 or s + 1 == cfg.steps:
                _save_train_checkpoint(out, model, adam, cfg, s + 1)
    return model, rows


def evaluate(model: flow.FlowModel, dataset: Dataset, metric: str = "nll",
             eval_seed: int = 0, batch: int = 1024,
             threads: int | None = None) -> float:
    """Mean metric over the whole dataset in one pass.

    Per-sample values are concatenated in shard order before the single
    mean, so the result is independent of batch size and thread count;
    dequantization noise is a pure function of (eval_seed, shard), so
    repeated calls agree exactly. The model's ActNorm layers must already
    be initialized.
    """
    if metric not in ("nll", "bpd"):
        raise ValueError(f"unknown metric {metric!r}; expected nll or bpd")
    n = len(dataset)
    shards = [(si, np.arange(lo, min(lo + batch, n)))
              for si, lo in enumerate(range(0, n, batch))]

    def shard_nll(si, idx):
        if dataset.quantized:
            x = dataset.batch(idx, util.named_rng(eval_seed, "dequant-eval", si))
        else:
            x = dataset.batch(idx)
        return model.nll_per_sample(x)

    workers = threads if threads is not None else util.thread_count()
    if workers > 1 and len(shards) > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(lambda a: shard_nll(*a), shards))
    else:
        parts = [shard_nll(*a) for a in shards]
    nll = float(np.mean(np.concatenate(parts)))
    if metric == "nll":
        return nll
    offset = 8.0 if dataset.quantized else 0.0
    return nll / (model.dims * np.log(2.0)) + offset
