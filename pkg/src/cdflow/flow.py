"""Invertible flow layers and the model that composes them.

A model is a flat list of ops applied left to right. Every parametric op
implements:

    forward(x)   -> (y, logdet, cache)     logdet has shape (B,)
    inverse(y)   -> x
    backward(cache, gy, glogdet) -> gx     accumulates parameter grads

``Squeeze`` reshapes without touching values; ``Split`` factors half the
channels out of the main path (they are scored against the standard normal
base immediately). The forward pass therefore returns a *list* of latent
parts, the final one last.

Parameter gradients accumulate in per-layer arrays until ``zero_grads``;
``param_specs`` exposes (name, param, grad) triples for an optimizer, with
the mixing-layer channel count attached so training can scale those
learning rates.
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy.special import expit

from . import nets, structured

__all__ = [
    "ActNorm", "CDConv", "AffineCoupling", "Squeeze", "Split",
    "FlowConfig", "FlowModel", "ParamSpec", "build_model", "make_mixing",
    "register_mixing", "squeeze", "unsqueeze", "layer_param_specs",
    "save_checkpoint", "load_checkpoint",
]

LOG_2PI = float(np.log(2.0 * np.pi))

CHECKPOINT_FORMAT_VERSION = 1


class ParamSpec(NamedTuple):
    name: str
    param: np.ndarray
    grad: np.ndarray
    chain_n: int | None = None


def layer_param_specs(layer, prefix: str) -> list[ParamSpec]:
    chain_n = layer.chain.n if isinstance(layer, CDConv) else None
    return [ParamSpec(f"{prefix}.{name}", p, g, chain_n)
            for (name, p), (_, g) in zip(layer.param_items(), layer.grad_items())]


class ActNorm:
    """Per-channel affine y = scale * (x + bias).

    The first forward call adopts statistics from its batch so that the
    output has zero mean and unit variance per channel; afterwards the
    parameters train like any others.
    """

    def __init__(self, channels: int):
        self.channels = channels
        self.scale = np.ones(channels)
        self.bias = np.zeros(channels)
        self.gscale = np.zeros(channels)
        self.gbias = np.zeros(channels)
        self.initialized = False

    def _init_from(self, x):
        mu = x.mean(axis=(0, 2, 3))
        sd = x.std(axis=(0, 2, 3))
        if np.any(sd < 1e-12):
            bad = int(np.argmin(sd))
            raise ValueError(
                f"degenerate init batch: channel {bad} has std {sd[bad]:.3e}")
        self.bias[:] = -mu
        self.scale[:] = 1.0 / sd
        self.initialized = True

    def forward(self, x):
        if not self.initialized:
            self._init_from(x)
        y = self.scale[None, :, None, None] * (x + self.bias[None, :, None, None])
        area = x.shape[2] * x.shape[3]
        ld = np.full(x.shape[0], area * float(np.sum(np.log(np.abs(self.scale)))))
        return y, ld, x

    def inverse(self, y):
        if not self.initialized:
            raise ValueError("actnorm inverse before initialization")
        return y / self.scale[None, :, None, None] - self.bias[None, :, None, None]

    def backward(self, cache, gy, glogdet):
        x = cache
        area = x.shape[2] * x.shape[3]
        self.gscale += (np.sum(gy * (x + self.bias[None, :, None, None]), axis=(0, 2, 3))
                        + float(np.sum(glogdet)) * area / self.scale)
        self.gbias += np.sum(gy, axis=(0, 2, 3)) * self.scale
        return gy * self.scale[None, :, None, None]

    def param_items(self):
        return [("scale", self.scale), ("bias", self.bias)]

    def grad_items(self):
        return [("scale", self.gscale), ("bias", self.gbias)]

    def zero_grads(self):
        self.gscale[:] = 0.0
        self.gbias[:] = 0.0


class CDConv:
    """1x1 channel mixing by a diagonal-circulant chain.

    Every spatial position shares the same n x n map, so the log-det is
    H*W times the chain's and the whole layer costs O(m n log n) per
    position batch instead of the O(n^2) of a dense mix.
    """

    is_mixing = True

    def __init__(self, chain: structured.CDChain):
        self.chain = chain
        self.grads = {name: np.zeros_like(p) for name, p in chain.param_items()}

    def materialize(self) -> np.ndarray:
        return structured.chain_materialize(self.chain)

    @property
    def effective_param_count(self) -> int:
        return self.chain.param_count

    @staticmethod
    def _to_cols(x):
        B, C, H, W = x.shape
        return np.ascontiguousarray(x.transpose(1, 0, 2, 3).reshape(C, B * H * W))

    @staticmethod
    def _from_cols(cols, shape):
        B, C, H, W = shape
        return np.ascontiguousarray(cols.reshape(C, B, H, W).transpose(1, 0, 2, 3))

    def forward(self, x):
        cols = self._to_cols(x)
        y = structured.chain_matvec(self.chain, cols)
        area = x.shape[2] * x.shape[3]
        ld = np.full(x.shape[0], area * structured.chain_logdet(self.chain))
        return self._from_cols(y, x.shape), ld, (cols, x.shape)

    def inverse(self, y):
        cols = self._to_cols(y)
        return self._from_cols(structured.chain_inverse_apply(self.chain, cols), y.shape)

    def backward(self, cache, gy, glogdet):
        cols, shape = cache
        gx_cols, grads = structured.chain_vjp(self.chain, cols, self._to_cols(gy))
        coeff = shape[2] * shape[3] * float(np.sum(glogdet))
        for (name, g), (_, lg) in zip(grads.items(), structured.logdet_grad(self.chain).items()):
            self.grads[name] += g + coeff * lg
        return self._from_cols(gx_cols, shape)

    def param_items(self):
        return self.chain.param_items()

    def grad_items(self):
        return [(name, self.grads[name]) for name, _ in self.chain.param_items()]

    def zero_grads(self):
        for g in self.grads.values():
            g[:] = 0.0

    def sigma_max(self) -> float:
        return structured.factor_sigma_max(self.chain)

    def spectral_rescale(self, target: float) -> None:
        """Clamp per-factor spectral norms in place (optimizer refs survive)."""
        rescaled = structured.chain_spectral_rescale(self.chain, target)
        for (_, dst), (_, src) in zip(self.chain.param_items(), rescaled.param_items()):
            dst[:] = src


class AffineCoupling:
    """Half the channels gate the other half: y_b = s(x_a) * x_b + t(x_a).

    ``net`` maps the first ceil(C/2) channels to 2 * floor(C/2) channels;
    the first half of its output is squashed through sigmoid(. + 2) to give
    strictly positive scales that start near 0.88 for a zero-initialized
    conditioner.
    """

    def __init__(self, channels: int, net):
        if channels < 2:
            raise ValueError("coupling needs at least two channels")
        self.channels = channels
        self.ca = (channels + 1) // 2
        self.cb = channels - self.ca
        self.net = net

    def _gates(self, xa):
        out, ncache = self.net.forward(xa)
        t = out[:, :self.cb] + 2.0
        s = expit(t)
        return s, out[:, self.cb:], t, ncache

    def forward(self, x):
        xa, xb = x[:, :self.ca], x[:, self.ca:]
        s, bhat, t, ncache = self._gates(xa)
        y = np.concatenate([xa, s * xb + bhat], axis=1)
        log_s = -np.logaddexp(0.0, -t)
        ld = log_s.reshape(x.shape[0], -1).sum(axis=1)
        return y, ld, (xb, s, ncache)

    def inverse(self, y):
        ya, yb = y[:, :self.ca], y[:, self.ca:]
        s, bhat, _, _ = self._gates(ya)
        return np.concatenate([ya, (yb - bhat) / s], axis=1)

    def backward(self, cache, gy, glogdet):
        xb, s, ncache = cache
        gya, gyb = gy[:, :self.ca], gy[:, self.ca:]
        gt = gyb * xb * s * (1.0 - s) + glogdet[:, None, None, None] * (1.0 - s)
        gxa = self.net.backward(ncache, np.concatenate([gt, gyb], axis=1))
        return np.concatenate([gya + gxa, gyb * s], axis=1)

    def param_items(self):
        return [(f"net.{name}", p) for name, p in self.net.param_items()]

    def grad_items(self):
        return [(f"net.{name}", g) for name, g in self.net.grad_items()]

    def zero_grads(self):
        self.net.zero_grads()


def squeeze(x: np.ndarray) -> np.ndarray:
    """(B, C, H, W) -> (B, 4C, H/2, W/2), grouping each 2x2 cell into channels.

    Output channel c*4 + i*2 + j holds input channel c at cell offset
    (i, j), so the four positions of one original channel stay adjacent.
    """
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ValueError(f"odd spatial size ({H}, {W}) cannot be squeezed")
    y = x.reshape(B, C, H // 2, 2, W // 2, 2).transpose(0, 1, 3, 5, 2, 4)
    return np.ascontiguousarray(y.reshape(B, 4 * C, H // 2, W // 2))


def unsqueeze(y: np.ndarray) -> np.ndarray:
    B, C4, h, w = y.shape
    if C4 % 4:
        raise ValueError("channel count not divisible by four")
    x = y.reshape(B, C4 // 4, 2, 2, h, w).transpose(0, 1, 4, 2, 5, 3)
    return np.ascontiguousarray(x.reshape(B, C4 // 4, 2 * h, 2 * w))


class Squeeze:
    def forward(self, x):
        return squeeze(x), np.zeros(x.shape[0]), None

    def inverse(self, y):
        return unsqueeze(y)

    def backward(self, cache, gy, glogdet):
        return unsqueeze(gy)


class Split:
    """Factor out the trailing half of the channels.

    forward returns ((kept, out), logdet, cache); inside a model the out
    part joins the latent list and only ``kept`` continues.
    """

    @staticmethod
    def keep_channels(channels: int) -> int:
        if channels < 2:
            raise ValueError("cannot split fewer than two channels")
        return channels // 2

    def forward(self, x):
        keep = self.keep_channels(x.shape[1])
        return (x[:, :keep], x[:, keep:]), np.zeros(x.shape[0]), None


@dataclasses.dataclass
class FlowConfig:
    """Architecture description; see ``build_model``."""

    channels: int
    height: int
    width: int
    blocks: int = 1
    steps_per_block: int = 1
    m: int = 2
    hidden: int = 32
    init_noise: float = 0.01
    mixing: str = "cdchain"
    chain_init: str = "shift"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "FlowConfig":
        return cls(**d)


_MIXING_BUILDERS: dict = {}


def register_mixing(kind: str):
    def deco(fn):
        _MIXING_BUILDERS[kind] = fn
        return fn
    return deco


@register_mixing("cdchain")
def _build_cdchain_mixing(channels: int, rng: np.random.Generator, cfg: FlowConfig):
    if cfg.chain_init == "shift":
        chain = structured.shift_chain(rng, channels, cfg.m, cfg.init_noise)
    elif cfg.chain_init == "identity":
        chain = structured.near_identity_chain(rng, channels, cfg.m, cfg.init_noise)
    else:
        raise ValueError(f"unknown chain_init {cfg.chain_init!r}")
    return CDConv(chain)


def make_mixing(kind: str, channels: int, rng: np.random.Generator, cfg: FlowConfig):
    if kind not in _MIXING_BUILDERS:
        raise ValueError(f"unknown mixing kind {kind!r}; known: {sorted(_MIXING_BUILDERS)}")
    return _MIXING_BUILDERS[kind](channels, rng, cfg)


class FlowModel:
    """A sequence of ops plus the standard-normal base density."""

    def __init__(self, ops: list, in_shape: tuple[int, int, int],
                 config: FlowConfig | None = None):
        self.ops = list(ops)
        self.in_shape = tuple(in_shape)
        self.config = config

    @property
    def dims(self) -> int:
        return int(np.prod(self.in_shape))

    def _check_input(self, x):
        if x.ndim != 4 or x.shape[1:] != self.in_shape:
            raise ValueError(f"expected batch of shape (B, {self.in_shape[0]}, "
                             f"{self.in_shape[1]}, {self.in_shape[2]}), got {x.shape}")

    def forward(self, x):
        self._check_input(x)
        parts = []
        ld = np.zeros(x.shape[0])
        h = x
        for op in self.ops:
            if isinstance(op, Split):
                (h, out), _, _ = op.forward(h)
                parts.append(out)
            else:
                h, l, _ = op.forward(h)
                ld += l
        parts.append(h)
        return parts, ld

    def forward_train(self, x):
        """Like forward but keeps caches and per-layer mean log-dets."""
        self._check_input(x)
        parts = []
        caches = []
        layer_logdets = []
        ld = np.zeros(x.shape[0])
        h = x
        for i, op in enumerate(self.ops):
            if isinstance(op, Split):
                (h, out), _, _ = op.forward(h)
                parts.append(out)
                caches.append(("split", None))
            else:
                h, l, c = op.forward(h)
                ld += l
                caches.append(("op", c))
                layer_logdets.append((getattr(op, "name", f"op{i}"), float(np.mean(l))))
        parts.append(h)
        return parts, ld, caches, layer_logdets

    def backward(self, caches, part_grads, glogdet):
        split_grads = list(part_grads[:-1])
        g = part_grads[-1]
        for op, (kind, cache) in zip(reversed(self.ops), reversed(caches)):
            if kind == "split":
                g = np.concatenate([g, split_grads.pop()], axis=1)
            else:
                g = op.backward(cache, g, glogdet)
        return g

    def inverse(self, parts):
        h = parts[-1]
        idx = len(parts) - 2
        for op in reversed(self.ops):
            if isinstance(op, Split):
                h = np.concatenate([h, parts[idx]], axis=1)
                idx -= 1
            else:
                h = op.inverse(h)
        return h

    def part_shapes(self) -> list[tuple[int, int, int]]:
        shapes = []
        C, H, W = self.in_shape
        for op in self.ops:
            if isinstance(op, Split):
                keep = op.keep_channels(C)
                shapes.append((C - keep, H, W))
                C = keep
            elif isinstance(op, Squeeze):
                C, H, W = 4 * C, H // 2, W // 2
        shapes.append((C, H, W))
        return shapes

    def nll_per_sample(self, x) -> np.ndarray:
        parts, ld = self.forward(x)
        B = x.shape[0]
        sq = sum(np.sum(p.reshape(B, -1) ** 2, axis=1) for p in parts)
        return 0.5 * sq + 0.5 * self.dims * LOG_2PI - ld

    def nll(self, x) -> float:
        return float(np.mean(self.nll_per_sample(x)))

    def bpd(self, x, bits_per_value: float = 8.0) -> float:
        """Bits per dimension for data living on a [0, 1) lattice of
        2**bits_per_value levels (dequantized 8-bit images by default)."""
        return self.nll(x) / (self.dims * np.log(2.0)) + bits_per_value

    def nll_backward(self, x):
        """Mean NLL plus gradient accumulation into every layer.

        Returns (nll, layer_logdets); the latter names each op with its
        batch-mean log-det, which is the first thing to inspect when the
        loss goes non-finite.
        """
        parts, ld, caches, layer_logdets = self.forward_train(x)
        B = x.shape[0]
        # overflow here just means a non-finite loss we are about to report
        with np.errstate(over="ignore", invalid="ignore"):
            sq = sum(np.sum(p.reshape(B, -1) ** 2, axis=1) for p in parts)
            nll = float(np.mean(0.5 * sq + 0.5 * self.dims * LOG_2PI - ld))
        if np.isfinite(nll):
            self.backward(caches, [p / B for p in parts], np.full(B, -1.0 / B))
        return nll, layer_logdets

    def sample(self, count: int, temperature: float = 1.0, seed: int = 0) -> np.ndarray:
        if count == 0:
            return np.zeros((0,) + self.in_shape)
        rng = np.random.default_rng(seed)
        parts = [temperature * rng.standard_normal((count,) + s)
                 for s in self.part_shapes()]
        return self.inverse(parts)

    def param_specs(self) -> list[ParamSpec]:
        specs = []
        for i, op in enumerate(self.ops):
            if hasattr(op, "param_items"):
                specs += layer_param_specs(op, getattr(op, "name", f"op{i}"))
        return specs

    @property
    def param_count(self) -> int:
        return sum(s.param.size for s in self.param_specs())

    def zero_grads(self):
        for op in self.ops:
            if hasattr(op, "zero_grads"):
                op.zero_grads()

    def mixing_layers(self) -> list:
        return [op for op in self.ops if getattr(op, "is_mixing", False)]


def build_model(cfg: FlowConfig, seed: int = 0) -> FlowModel:
    """Assemble squeeze/step/split blocks per the config.

    Each block squeezes (when the spatial size allows), runs
    ``steps_per_block`` ActNorm -> mixing -> coupling steps, and splits
    half the channels off except after the last block. 1x1 inputs skip
    squeezing and use MLP conditioners.
    """
    rng = np.random.default_rng(seed)
    ops: list = []
    C, H, W = cfg.channels, cfg.height, cfg.width
    for b in range(cfg.blocks):
        if H > 1 and W > 1:
            if H % 2 or W % 2:
                raise ValueError(f"block {b}: odd spatial size ({H}, {W})")
            op = Squeeze()
            op.name = f"b{b}.squeeze"
            ops.append(op)
            C, H, W = 4 * C, H // 2, W // 2
        elif H != 1 or W != 1:
            raise ValueError(f"block {b}: spatial size ({H}, {W}) is not squeezable")
        for k in range(cfg.steps_per_block):
            an = ActNorm(C)
            an.name = f"b{b}.k{k}.an"
            mix = make_mixing(cfg.mixing, C, rng, cfg)
            mix.name = f"b{b}.k{k}.mix"
            ca = (C + 1) // 2
            cb = C - ca
            if H * W == 1:
                net = nets.MLPConditioner(ca, cfg.hidden, 2 * cb, rng)
            else:
                net = nets.ConvConditioner(ca, cfg.hidden, 2 * cb, rng)
            cpl = AffineCoupling(C, net)
            cpl.name = f"b{b}.k{k}.cpl"
            ops += [an, mix, cpl]
        if b < cfg.blocks - 1:
            sp = Split()
            sp.name = f"b{b}.split"
            ops.append(sp)
            C = Split.keep_channels(C)
    return FlowModel(ops, (cfg.channels, cfg.height, cfg.width), cfg)


def save_checkpoint(dirpath, model: FlowModel, step: int, seed: int | None = None,
                    extra: dict | None = None) -> None:
    """Write a restartable snapshot: manifest.json + params.npz + one
    .chain file per mixing layer (same format ``structured.save_chain``
    uses everywhere else)."""
    if model.config is None:
        raise ValueError("checkpointing requires a model built from a FlowConfig")
    path = Path(dirpath)
    path.mkdir(parents=True, exist_ok=True)
    dense = {}
    actnorm_init = {}
    for i, op in enumerate(model.ops):
        name = getattr(op, "name", f"op{i}")
        if isinstance(op, CDConv):
            structured.save_chain(path / f"{name}.chain", op.chain, seed=seed)
        elif hasattr(op, "param_items"):
            for pname, p in op.param_items():
                dense[f"{name}.{pname}"] = p
        if isinstance(op, ActNorm):
            actnorm_init[name] = bool(op.initialized)
    np.savez(path / "params.npz", **dense)
    manifest = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "step": int(step),
        "seed": seed,
        "arch": model.config.to_dict(),
        "actnorm_initialized": actnorm_init,
    }
    if extra:
        manifest.update(extra)
    # manifest last: its presence marks the checkpoint complete
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2))


def load_checkpoint(dirpath) -> tuple[FlowModel, dict]:
    path = Path(dirpath)
    manifest = json.loads((path / "manifest.json").read_text())
    if manifest["format_version"] != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {manifest['format_version']}")
    cfg = FlowConfig.from_dict(manifest["arch"])
    model = build_model(cfg, seed=manifest.get("seed") or 0)
    with np.load(path / "params.npz") as dense:
        for i, op in enumerate(model.ops):
            name = getattr(op, "name", f"op{i}")
            if isinstance(op, CDConv):
                chain, _ = structured.load_chain(path / f"{name}.chain")
                for (_, dst), (_, src) in zip(op.chain.param_items(), chain.param_items()):
                    dst[:] = src
            elif hasattr(op, "param_items"):
                for pname, p in op.param_items():
                    p[:] = dense[f"{name}.{pname}"]
            if isinstance(op, ActNorm):
                op.initialized = manifest["actnorm_initialized"].get(name, False)
    return model, manifest
