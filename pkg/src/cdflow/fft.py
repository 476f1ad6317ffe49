"""Discrete Fourier transforms and real spectrum packing.

Provides:
    dft_forward / dft_inverse   unnormalized forward DFT and 1/n inverse,
                                applied along axis 0, radix-2 for powers of
                                two and a chirp-z (Bluestein) path otherwise
    spectrum_encode / decode    n real storage values <-> conjugate-symmetric
                                length-n spectrum of a real circulant
    spectrum_pack_grad          chain rule from a full complex spectrum
                                gradient into the packed real storage
    spectrum_abs                per-eigenvalue magnitudes straight from
                                packed storage
    packed_layout               index layout of the packed storage

All transforms run in double precision. Transform plans (bit-reversal
tables, per-stage twiddles, chirp sequences) are cached per length; the
cache may be read concurrently, insertions are serialized.
"""

from __future__ import annotations

import threading
from typing import NamedTuple

import numpy as np

_plan_cache: dict[int, object] = {}
_plan_lock = threading.Lock()


class NonFiniteInputError(ValueError):
    """Inf or NaN where finite numbers are required.

    A distinct type so training loops can tell numerical divergence apart
    from genuine usage errors; it is still a ValueError to callers.
    """


class _Radix2Plan(NamedTuple):
    n: int
    rev: np.ndarray
    stage_twiddles: list[np.ndarray]


class _BluesteinPlan(NamedTuple):
    n: int
    m: int
    chirp: np.ndarray
    bhat: np.ndarray


def _build_radix2_plan(n: int) -> _Radix2Plan:
    rev = np.zeros(1, dtype=np.intp)
    while rev.shape[0] < n:
        rev = np.concatenate((2 * rev, 2 * rev + 1))
    twiddles = []
    h = 1
    while h < n:
        twiddles.append(np.exp(-1j * np.pi * np.arange(h) / h))
        h *= 2
    return _Radix2Plan(n, rev, twiddles)


def _radix2(a: np.ndarray, plan: _Radix2Plan) -> np.ndarray:
    # a: (n, cols) complex128, n a power of two
    n = plan.n
    if n == 1:
        return a.copy()
    cols = a.shape[1]
    a = a[plan.rev]
    for tw in plan.stage_twiddles:
        h = tw.shape[0]
        a = a.reshape(-1, 2 * h, cols)
        u = a[:, :h, :]
        t = a[:, h:, :] * tw[None, :, None]
        a = np.concatenate((u + t, u - t), axis=1)
    return a.reshape(n, cols)


def _build_bluestein_plan(n: int) -> _BluesteinPlan:
    # j^2 is reduced mod 2n before the chirp exponent to avoid precision
    # loss at large n
    j = np.arange(n, dtype=np.int64)
    chirp = np.exp(-1j * np.pi * ((j * j) % (2 * n)) / n)
    m = 1
    while m < 2 * n - 1:
        m *= 2
    b = np.zeros(m, dtype=np.complex128)
    b[:n] = np.conj(chirp)
    b[m - n + 1:] = np.conj(chirp[1:][::-1])
    bhat = _radix2(b[:, None], _get_plan(m))[:, 0]
    return _BluesteinPlan(n, m, chirp, bhat)


def _bluestein(a: np.ndarray, plan: _BluesteinPlan) -> np.ndarray:
    n, m = plan.n, plan.m
    pow2 = _get_plan(m)
    buf = np.zeros((m, a.shape[1]), dtype=np.complex128)
    buf[:n] = a * plan.chirp[:, None]
    spec = _radix2(buf, pow2)
    spec *= plan.bhat[:, None]
    conv = np.conj(_radix2(np.conj(spec), pow2)) / m
    return conv[:n] * plan.chirp[:, None]


def _get_plan(n: int):
    plan = _plan_cache.get(n)
    if plan is not None:
        return plan
    if n & (n - 1) == 0:
        plan = _build_radix2_plan(n)
    else:
        plan = _build_bluestein_plan(n)
    with _plan_lock:
        return _plan_cache.setdefault(n, plan)


def clear_plan_cache() -> None:
    with _plan_lock:
        _plan_cache.clear()


def plan_cache_size() -> int:
    return len(_plan_cache)


def _transform(x: np.ndarray) -> np.ndarray:
    squeeze = x.ndim == 1
    a = np.ascontiguousarray(x, dtype=np.complex128)
    if squeeze:
        a = a[:, None]
    plan = _get_plan(a.shape[0])
    out = _radix2(a, plan) if isinstance(plan, _Radix2Plan) else _bluestein(a, plan)
    return out[:, 0] if squeeze else out


def _check_finite(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    if x.shape[0] == 0:
        raise ValueError("empty input")
    if not np.all(np.isfinite(x)):
        raise NonFiniteInputError("non-finite input")
    return x


def dft_forward(x: np.ndarray) -> np.ndarray:
    """Unnormalized DFT along axis 0: X_k = sum_j x_j exp(-2i pi jk/n)."""
    return _transform(_check_finite(x))


def dft_inverse(X: np.ndarray) -> np.ndarray:
    """Inverse of dft_forward, carrying the 1/n factor."""
    X = _check_finite(X)
    return np.conj(_transform(np.conj(X))) / X.shape[0]


class PackedLayout(NamedTuple):
    real_idx: np.ndarray  # storage slots holding self-conjugate eigenvalues
    re: slice             # storage slots holding Re of paired eigenvalues
    im: slice             # storage slots holding Im of paired eigenvalues
    pair_count: int


def packed_layout(n: int) -> PackedLayout:
    """Slot layout of the packed storage for length n.

    Slot 0 is the DC eigenvalue; slots (2k-1, 2k) hold (Re, Im) of
    eigenvalue k for 1 <= k < ceil(n/2); for even n the last slot holds
    the Nyquist eigenvalue. Both self-conjugate eigenvalues are real, so
    n real values parameterize exactly the spectra of real circulants.
    """
    nh = (n + 1) // 2
    real_idx = [0]
    if n % 2 == 0 and n > 1:
        real_idx.append(n - 1)
    return PackedLayout(np.asarray(real_idx), slice(1, 2 * nh - 1, 2), slice(2, 2 * nh - 1, 2), nh - 1)


def spectrum_encode(c: np.ndarray) -> np.ndarray:
    """Packed spectrum of the real circulant whose first column is c."""
    c = np.asarray(c)
    if np.iscomplexobj(c):
        raise ValueError("expected real input")
    lam = dft_forward(c.astype(np.float64))
    n = lam.shape[0]
    lay = packed_layout(n)
    packed = np.empty(n, dtype=np.float64)
    packed[0] = lam[0].real
    if n % 2 == 0 and n > 1:
        packed[n - 1] = lam[n // 2].real
    nh = (n + 1) // 2
    packed[lay.re] = lam[1:nh].real
    packed[lay.im] = lam[1:nh].imag
    return packed


def spectrum_decode(packed: np.ndarray) -> np.ndarray:
    """Full conjugate-symmetric spectrum from packed storage."""
    packed = np.asarray(packed, dtype=np.float64)
    n = packed.shape[0]
    lay = packed_layout(n)
    nh = (n + 1) // 2
    lam = np.zeros(n, dtype=np.complex128)
    lam[0] = packed[0]
    if n % 2 == 0 and n > 1:
        lam[n // 2] = packed[n - 1]
    if nh > 1:
        head = packed[lay.re] + 1j * packed[lay.im]
        lam[1:nh] = head
        lam[n - 1:n - nh:-1] = np.conj(head)
    return lam


def spectrum_pack_grad(dlam: np.ndarray) -> np.ndarray:
    """Packed gradient from a full spectrum gradient.

    dlam[k] carries d/dRe(lam_k) + i d/dIm(lam_k) with all n eigenvalues
    treated as independent; each packed slot sums the contributions of the
    conjugate pair it controls.
    """
    dlam = np.asarray(dlam, dtype=np.complex128)
    n = dlam.shape[0]
    lay = packed_layout(n)
    nh = (n + 1) // 2
    g = np.zeros(n, dtype=np.float64)
    g[0] = dlam[0].real
    if n % 2 == 0 and n > 1:
        g[n - 1] = dlam[n // 2].real
    if nh > 1:
        main = dlam[1:nh]
        mirror = dlam[n - 1:n - nh:-1]
        g[lay.re] = main.real + mirror.real
        g[lay.im] = main.imag - mirror.imag
    return g


def spectrum_abs(packed: np.ndarray) -> np.ndarray:
    """|lam_k| for the full spectrum, computed from packed storage."""
    packed = np.asarray(packed, dtype=np.float64)
    n = packed.shape[0]
    lay = packed_layout(n)
    nh = (n + 1) // 2
    out = np.empty(n, dtype=np.float64)
    out[0] = abs(packed[0])
    if n % 2 == 0 and n > 1:
        out[n // 2] = abs(packed[n - 1])
    if nh > 1:
        r = np.hypot(packed[lay.re], packed[lay.im])
        out[1:nh] = r
        out[n - 1:n - nh:-1] = r
    return out
