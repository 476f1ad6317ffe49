"""Seed plumbing and small shared helpers."""

from __future__ import annotations

import hashlib
import os

import numpy as np

__all__ = ["named_rng", "thread_count"]


def named_rng(seed: int, *names) -> np.random.Generator:
    """Independent generator for the substream identified by ``names``.

    Streams are stateless: named_rng(seed, "data", step) depends only on
    its arguments, so any step of a run can be reproduced in isolation
    (resume, sharded evaluation, per-sample generation).
    """
    key = tuple(
        int.from_bytes(hashlib.blake2b(str(n).encode(), digest_size=4).digest(), "little")
        for n in names)
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


def thread_count(default: int = 1) -> int:
    """Worker cap from CDFLOW_THREADS, defaulting when unset or invalid."""
    raw = os.environ.get("CDFLOW_THREADS", "")
    try:
        return max(1, int(raw))
    except ValueError:
        return default
