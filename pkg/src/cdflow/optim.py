"""Adam optimizer operating in place on named numpy parameter arrays."""

from __future__ import annotations

import numpy as np


class Adam:
    """Standard Adam (beta1=0.9, beta2=0.999, eps=1e-8).

    Parameters are updated in place so callers can keep long-lived array
    references. Per-parameter learning-rate scales support channel-aware
    schedules. snapshot/restore exist so callers can reject a step.
    """

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state: dict[str, tuple[int, np.ndarray, np.ndarray]] = {}

    def step(self, items: list[tuple[str, np.ndarray, np.ndarray, float]]) -> None:
        """items: (name, param, grad, lr_scale); param is modified in place."""
        for name, param, grad, scale in items:
            t, m, v = self.state.get(name) or (0, np.zeros_like(param), np.zeros_like(param))
            t += 1
            m = self.beta1 * m + (1.0 - self.beta1) * grad
            v = self.beta2 * v + (1.0 - self.beta2) * grad * grad
            mhat = m / (1.0 - self.beta1 ** t)
            vhat = v / (1.0 - self.beta2 ** t)
            param -= self.lr * scale * mhat / (np.sqrt(vhat) + self.eps)
            self.state[name] = (t, m, v)

    def snapshot(self) -> dict:
        return {"lr": self.lr,
                "state": {k: (t, m.copy(), v.copy()) for k, (t, m, v) in self.state.items()}}

    def restore(self, snap: dict) -> None:
        self.lr = snap["lr"]
        self.state = {k: (t, m.copy(), v.copy()) for k, (t, m, v) in snap["state"].items()}

    def state_arrays(self) -> list[tuple[str, int, np.ndarray, np.ndarray]]:
        return [(k, t, m, v) for k, (t, m, v) in sorted(self.state.items())]

    def load_state_arrays(self, rows: list[tuple[str, int, np.ndarray, np.ndarray]]) -> None:
        self.state = {k: (t, m, v) for k, t, m, v in rows}
