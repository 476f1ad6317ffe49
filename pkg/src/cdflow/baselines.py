"""Dense and triangular reference layers.

Two uses: timing baselines for the benchmark harness (``DenseLayer``,
``LULayer``) with the classic cost profile — dense log-det pays a fresh
O(n^3) factorization, LU log-det reads the U diagonal in O(n) — and
trainable mixing layers (full / lower / upper / lu) registered with the
flow so otherwise-identical models can swap their channel-mixing type.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg
from scipy.linalg import blas

from . import flow, structured

__all__ = ["DenseLayer", "LULayer", "ChainOps",
           "FullMixing", "LowerMixing", "UpperMixing", "LUMixing"]


class DenseLayer:
    """Unstructured n x n weight; every op pays the dense price."""

    def __init__(self, W: np.ndarray):
        self.W = np.ascontiguousarray(W, dtype=np.float64)

    @property
    def n(self) -> int:
        return self.W.shape[0]

    def forward(self, x: np.ndarray) -> np.ndarray:
        return self.W @ x

    def inverse(self, y: np.ndarray) -> np.ndarray:
        return scipy.linalg.solve(self.W, y)

    def logdet(self) -> float:
        lu, _ = scipy.linalg.lu_factor(self.W)
        return float(np.sum(np.log(np.abs(np.diag(lu)))))


class LULayer:
    """W = P L U with unit-lower L: O(n^2) apply/inverse, O(n) log-det."""

    def __init__(self, prow: np.ndarray, L: np.ndarray, U: np.ndarray):
        self.prow = np.asarray(prow, dtype=np.intp)
        self.pinv = np.argsort(self.prow)
        self.L = np.ascontiguousarray(L, dtype=np.float64)
        self.U = np.ascontiguousarray(U, dtype=np.float64)

    @classmethod
    def from_dense(cls, W: np.ndarray) -> "LULayer":
        P, L, U = scipy.linalg.lu(np.asarray(W, dtype=np.float64))
        return cls(P.argmax(axis=1), L, U)

    @property
    def n(self) -> int:
        return self.L.shape[0]

    def forward(self, x: np.ndarray) -> np.ndarray:
        z = blas.dtrmm(1.0, self.U, x, lower=0)
        z = blas.dtrmm(1.0, self.L, z, lower=1, diag=1)
        return z[self.prow]

    def inverse(self, y: np.ndarray) -> np.ndarray:
        z = y[self.pinv]
        z = scipy.linalg.solve_triangular(self.L, z, lower=True, unit_diagonal=True)
        return scipy.linalg.solve_triangular(self.U, z, lower=False)

    def logdet(self) -> float:
        return float(np.sum(np.log(np.abs(np.diag(self.U)))))


class ChainOps:
    """Adapter giving a CDChain the same timing interface as the baselines."""

    def __init__(self, chain: structured.CDChain):
        self.chain = chain

    @property
    def n(self) -> int:
        return self.chain.n

    def forward(self, x: np.ndarray) -> np.ndarray:
        return structured.chain_matvec(self.chain, x)

    def inverse(self, y: np.ndarray) -> np.ndarray:
        return structured.chain_inverse_apply(self.chain, y)

    def logdet(self) -> float:
        return structured.chain_logdet(self.chain)


def _to_cols(x: np.ndarray) -> np.ndarray:
    B, C, H, W = x.shape
    return np.ascontiguousarray(x.transpose(1, 0, 2, 3).reshape(C, B * H * W))


def _from_cols(cols: np.ndarray, shape) -> np.ndarray:
    B, C, H, W = shape
    return np.ascontiguousarray(cols.reshape(C, B, H, W).transpose(1, 0, 2, 3))


def _shift_perm(n: int) -> np.ndarray:
    return (np.arange(n) - 1) % n


class _MixingBase:
    """Shared plumbing for the trainable matrix mixing layers."""

    is_mixing = True

    def forward(self, x):
        cols = _to_cols(x)
        y = self._apply(cols)
        area = x.shape[2] * x.shape[3]
        ld = np.full(x.shape[0], area * self._logdet())
        return _from_cols(y, x.shape), ld, (cols, x.shape)

    def inverse(self, y):
        return _from_cols(self._solve(_to_cols(y)), y.shape)

    def backward(self, cache, gy, glogdet):
        cols, shape = cache
        coeff = shape[2] * shape[3] * float(np.sum(glogdet))
        gx_cols = self._backward_cols(cols, _to_cols(gy), coeff)
        return _from_cols(gx_cols, shape)


class FullMixing(_MixingBase):
    """Dense learnable channel mix (the F-type layer)."""

    def __init__(self, W: np.ndarray):
        self.W = np.ascontiguousarray(W, dtype=np.float64)
        self.gW = np.zeros_like(self.W)

    @classmethod
    def build(cls, channels, rng, cfg):
        noise = cfg.init_noise * rng.standard_normal((channels, channels))
        if cfg.chain_init == "shift":
            base = np.zeros((channels, channels))
            base[np.arange(channels), _shift_perm(channels)] = 1.0
        else:
            base = np.eye(channels)
        return cls(base + noise)

    def _apply(self, cols):
        return self.W @ cols

    def _solve(self, cols):
        return np.linalg.solve(self.W, cols)

    def _logdet(self):
        return float(np.linalg.slogdet(self.W)[1])

    def _backward_cols(self, cols, gy, coeff):
        self.gW += gy @ cols.T + coeff * np.linalg.inv(self.W).T
        return self.W.T @ gy

    def materialize(self):
        return self.W.copy()

    @property
    def effective_param_count(self) -> int:
        return self.W.size

    def param_items(self):
        return [("W", self.W)]

    def grad_items(self):
        return [("W", self.gW)]

    def zero_grads(self):
        self.gW[:] = 0.0

    def sigma_max(self) -> float:
        return float(np.linalg.norm(self.W, 2))

    def spectral_rescale(self, target: float) -> None:
        sigma = self.sigma_max()
        if sigma > target:
            self.W *= target / sigma


class _TriangularMixing(_MixingBase):
    lower: bool

    def __init__(self, W: np.ndarray):
        self.W = np.ascontiguousarray(W, dtype=np.float64)
        self.gW = np.zeros_like(self.W)

    @classmethod
    def build(cls, channels, rng, cfg):
        noise = cfg.init_noise * rng.standard_normal((channels, channels))
        W = np.eye(channels) + (np.tril(noise) if cls.lower else np.triu(noise))
        return cls(W)

    def _mask(self, M):
        return np.tril(M) if self.lower else np.triu(M)

    def _apply(self, cols):
        return blas.dtrmm(1.0, self.W, cols, lower=int(self.lower))

    def _solve(self, cols):
        return scipy.linalg.solve_triangular(self.W, cols, lower=self.lower)

    def _logdet(self):
        return float(np.sum(np.log(np.abs(np.diag(self.W)))))

    def _backward_cols(self, cols, gy, coeff):
        g = self._mask(gy @ cols.T)
        g[np.diag_indices_from(g)] += coeff / np.diag(self.W)
        self.gW += g
        return self.W.T @ gy

    def materialize(self):
        return self.W.copy()

    @property
    def effective_param_count(self) -> int:
        n = self.W.shape[0]
        return n * (n + 1) // 2

    def param_items(self):
        return [("W", self.W)]

    def grad_items(self):
        return [("W", self.gW)]

    def zero_grads(self):
        self.gW[:] = 0.0

    def sigma_max(self) -> float:
        return float(np.linalg.norm(self.W, 2))

    def spectral_rescale(self, target: float) -> None:
        sigma = self.sigma_max()
        if sigma > target:
            self.W *= target / sigma


class LowerMixing(_TriangularMixing):
    lower = True


class UpperMixing(_TriangularMixing):
    lower = False


class LUMixing(_MixingBase):
    """W = P L U with a fixed permutation, unit-lower L, learnable U.

    The permutation is frozen at init (shift by default) as in standard
    LU-decomposed invertible 1x1 convolutions; L's strict lower triangle
    and U's full upper triangle train, giving n^2 learnable entries.
    """

    def __init__(self, prow: np.ndarray, Lp: np.ndarray, Up: np.ndarray):
        self.prow = np.asarray(prow, dtype=np.intp)
        self.pinv = np.argsort(self.prow)
        self.Lp = np.ascontiguousarray(Lp, dtype=np.float64)
        self.Up = np.ascontiguousarray(Up, dtype=np.float64)
        self.gLp = np.zeros_like(self.Lp)
        self.gUp = np.zeros_like(self.Up)

    @classmethod
    def build(cls, channels, rng, cfg):
        noise = cfg.init_noise * rng.standard_normal((2, channels, channels))
        prow = _shift_perm(channels) if cfg.chain_init == "shift" else np.arange(channels)
        Lp = np.tril(noise[0], -1)
        Up = np.eye(channels) + np.triu(noise[1])
        return cls(prow, Lp, Up)

    def _L(self):
        return np.eye(self.Lp.shape[0]) + np.tril(self.Lp, -1)

    def _apply(self, cols):
        u = blas.dtrmm(1.0, np.triu(self.Up), cols, lower=0)
        z = u + np.tril(self.Lp, -1) @ u
        return z[self.prow]

    def _solve(self, cols):
        z = cols[self.pinv]
        z = scipy.linalg.solve_triangular(self._L(), z, lower=True, unit_diagonal=True)
        return scipy.linalg.solve_triangular(np.triu(self.Up), z, lower=False)

    def _logdet(self):
        return float(np.sum(np.log(np.abs(np.diag(self.Up)))))

    def _backward_cols(self, cols, gy, coeff):
        u = blas.dtrmm(1.0, np.triu(self.Up), cols, lower=0)
        gz = np.empty_like(gy)
        gz[self.prow] = gy
        self.gLp += np.tril(gz @ u.T, -1)
        gu = gz + np.tril(self.Lp, -1).T @ gz
        gU = np.triu(gu @ cols.T)
        gU[np.diag_indices_from(gU)] += coeff / np.diag(self.Up)
        self.gUp += gU
        return np.triu(self.Up).T @ gu

    def materialize(self):
        return (self._L() @ np.triu(self.Up))[self.prow]

    @property
    def effective_param_count(self) -> int:
        n = self.Up.shape[0]
        return n * n

    def param_items(self):
        return [("Lp", self.Lp), ("Up", self.Up)]

    def grad_items(self):
        return [("Lp", self.gLp), ("Up", self.gUp)]

    def zero_grads(self):
        self.gLp[:] = 0.0
        self.gUp[:] = 0.0

    def sigma_max(self) -> float:
        return max(float(np.linalg.norm(self._L(), 2)),
                   float(np.linalg.norm(np.triu(self.Up), 2)))

    def spectral_rescale(self, target: float) -> None:
        sig_u = float(np.linalg.norm(np.triu(self.Up), 2))
        if sig_u > target:
            self.Up *= target / sig_u
        strict = np.tril(self.Lp, -1)
        sig_s = float(np.linalg.norm(strict, 2))
        if sig_s > 0.0 and 1.0 + sig_s > target:
            self.Lp *= max(0.0, (target - 1.0)) / sig_s


flow.register_mixing("full")(FullMixing.build)
flow.register_mixing("lower")(LowerMixing.build)
flow.register_mixing("upper")(UpperMixing.build)
flow.register_mixing("lu")(LUMixing.build)
