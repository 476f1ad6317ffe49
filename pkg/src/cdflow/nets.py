"""Small conditioner networks with hand-written forward/backward passes.

Everything here is plain float64 numpy. Each module follows the same
protocol the flow layers use:

    forward(x)  -> (y, cache)
    backward(cache, gy) -> gx        # accumulates into .grads
    param_items() -> [(name, param_array), ...]
    zero_grads()

Gradients accumulate across backward calls until ``zero_grads``; arrays in
``params``/``grads`` are updated in place so an optimizer can hold
references to them.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = ["Linear", "Conv3x3", "MLPConditioner", "ConvConditioner"]


class Linear:
    """Affine map (B, cin) -> (B, cout)."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator | None = None,
                 zero_init: bool = False):
        if zero_init or rng is None:
            self.W = np.zeros((cout, cin))
        else:
            self.W = rng.standard_normal((cout, cin)) / np.sqrt(cin)
        self.b = np.zeros(cout)
        self.gW = np.zeros_like(self.W)
        self.gb = np.zeros_like(self.b)

    def forward(self, x):
        return x @ self.W.T + self.b, x

    def backward(self, cache, gy):
        x = cache
        self.gW += gy.T @ x
        self.gb += gy.sum(axis=0)
        return gy @ self.W

    def param_items(self):
        return [("W", self.W), ("b", self.b)]

    def grad_items(self):
        return [("W", self.gW), ("b", self.gb)]

    def zero_grads(self):
        self.gW[:] = 0.0
        self.gb[:] = 0.0


class Conv3x3:
    """3x3 same-padding convolution (B, cin, H, W) -> (B, cout, H, W).

    Implemented as an im2col matmul; the backward pass scatters column
    gradients back through the nine kernel offsets.
    """

    def __init__(self, cin: int, cout: int, rng: np.random.Generator | None = None,
                 zero_init: bool = False):
        if zero_init or rng is None:
            self.W = np.zeros((cout, cin, 3, 3))
        else:
            self.W = rng.standard_normal((cout, cin, 3, 3)) / np.sqrt(9 * cin)
        self.b = np.zeros(cout)
        self.gW = np.zeros_like(self.W)
        self.gb = np.zeros_like(self.b)

    def _im2col(self, x):
        B, cin, H, W = x.shape
        xp = np.zeros((B, cin, H + 2, W + 2))
        xp[:, :, 1:H + 1, 1:W + 1] = x
        # (B, cin, H, W, 3, 3) windows over the padded map
        win = sliding_window_view(xp, (3, 3), axis=(2, 3))
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * H * W, cin * 9)
        return np.ascontiguousarray(cols)

    def forward(self, x):
        B, cin, H, W = x.shape
        cols = self._im2col(x)
        y = cols @ self.W.reshape(self.W.shape[0], -1).T + self.b
        y = y.reshape(B, H, W, -1).transpose(0, 3, 1, 2)
        return np.ascontiguousarray(y), (cols, x.shape)

    def backward(self, cache, gy):
        cols, (B, cin, H, W) = cache
        cout = self.W.shape[0]
        g2 = gy.transpose(0, 2, 3, 1).reshape(B * H * W, cout)
        self.gW += (g2.T @ cols).reshape(self.W.shape)
        self.gb += g2.sum(axis=0)
        gcols = g2 @ self.W.reshape(cout, -1)
        g6 = gcols.reshape(B, H, W, cin, 3, 3).transpose(0, 3, 1, 2, 4, 5)
        gxp = np.zeros((B, cin, H + 2, W + 2))
        for di in range(3):
            for dj in range(3):
                gxp[:, :, di:di + H, dj:dj + W] += g6[..., di, dj]
        return gxp[:, :, 1:H + 1, 1:W + 1]

    def param_items(self):
        return [("W", self.W), ("b", self.b)]

    def grad_items(self):
        return [("W", self.gW), ("b", self.gb)]

    def zero_grads(self):
        self.gW[:] = 0.0
        self.gb[:] = 0.0


class _Stack:
    """Shared plumbing for the two conditioner shapes below."""

    layers: list

    def param_items(self):
        items = []
        for i, layer in enumerate(self.layers):
            for name, p in layer.param_items():
                items.append((f"l{i}.{name}", p))
        return items

    def grad_items(self):
        items = []
        for i, layer in enumerate(self.layers):
            for name, g in layer.grad_items():
                items.append((f"l{i}.{name}", g))
        return items

    def zero_grads(self):
        for layer in self.layers:
            layer.zero_grads()


def _relu_forward(x):
    mask = x > 0.0
    return x * mask, mask


class MLPConditioner(_Stack):
    """Two-hidden-layer ReLU MLP for 1x1 spatial maps.

    Takes (B, cin, 1, 1), returns (B, cout, 1, 1). The final layer is
    zero-initialized so a fresh conditioner outputs zeros.
    """

    def __init__(self, cin: int, hidden: int, cout: int, rng: np.random.Generator):
        self.layers = [Linear(cin, hidden, rng),
                       Linear(hidden, hidden, rng),
                       Linear(hidden, cout, zero_init=True)]

    def forward(self, x):
        B = x.shape[0]
        h0 = x.reshape(B, -1)
        a1, c1 = self.layers[0].forward(h0)
        h1, m1 = _relu_forward(a1)
        a2, c2 = self.layers[1].forward(h1)
        h2, m2 = _relu_forward(a2)
        out, c3 = self.layers[2].forward(h2)
        y = out.reshape(B, -1, 1, 1)
        return y, (c1, m1, c2, m2, c3)

    def backward(self, cache, gy):
        c1, m1, c2, m2, c3 = cache
        B = gy.shape[0]
        g = gy.reshape(B, -1)
        g = self.layers[2].backward(c3, g)
        g = self.layers[1].backward(c2, g * m2)
        g = self.layers[0].backward(c1, g * m1)
        return g.reshape(gy.shape[0], -1, 1, 1)


class ConvConditioner(_Stack):
    """Three-layer 3x3 conv net with ReLUs, zero-initialized final layer."""

    def __init__(self, cin: int, hidden: int, cout: int, rng: np.random.Generator):
        self.layers = [Conv3x3(cin, hidden, rng),
                       Conv3x3(hidden, hidden, rng),
                       Conv3x3(hidden, cout, zero_init=True)]

    def forward(self, x):
        a1, c1 = self.layers[0].forward(x)
        h1, m1 = _relu_forward(a1)
        a2, c2 = self.layers[1].forward(h1)
        h2, m2 = _relu_forward(a2)
        y, c3 = self.layers[2].forward(h2)
        return y, (c1, m1, c2, m2, c3)

    def backward(self, cache, gy):
        c1, m1, c2, m2, c3 = cache
        g = self.layers[2].backward(c3, gy)
        g = self.layers[1].backward(c2, g * m2)
        g = self.layers[0].backward(c1, g * m1)
        return g
