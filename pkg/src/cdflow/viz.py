"""File-based plotting: binary PPM images and hand-emitted SVG charts.

Both formats are written byte-by-byte so the artifact needs no imaging or
plotting dependency: PPM (P6) for sample grids and density heatmaps, SVG
with one ``<polyline>`` per series for line charts.
"""

from __future__ import annotations

import numpy as np

__all__ = ["write_ppm", "tile_images", "line_chart_svg", "density_grid",
           "save_heatmap"]

_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e",
            "#8c564b", "#17becf", "#7f7f7f")


def write_ppm(path, img: np.ndarray) -> None:
    """Write a (H, W) grayscale or (H, W, 3) color uint8 image as binary PPM."""
    img = np.asarray(img)
    if img.dtype != np.uint8:
        raise ValueError(f"expected uint8 image, got {img.dtype}")
    if img.ndim == 2:
        img = np.repeat(img[:, :, None], 3, axis=2)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected (H, W) or (H, W, 3), got {img.shape}")
    h, w = img.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(img).tobytes())


def tile_images(images: np.ndarray, pad: int = 1, pad_value: int = 0) -> np.ndarray:
    """Arrange (N, C, H, W) uint8 images into a near-square padded grid."""
    images = np.asarray(images)
    if images.dtype != np.uint8:
        raise ValueError(f"expected uint8 images, got {images.dtype}")
    n, c, h, w = images.shape
    if c == 1:
        images = np.repeat(images, 3, axis=1)
    elif c != 3:
        raise ValueError(f"expected 1 or 3 channels, got {c}")
    cols = int(np.ceil(np.sqrt(n)))
    rows = int(np.ceil(n / cols)) if cols else 0
    grid = np.full((rows * h + (rows + 1) * pad, cols * w + (cols + 1) * pad, 3),
                   pad_value, dtype=np.uint8)
    for i in range(n):
        r, col = divmod(i, cols)
        top = pad + r * (h + pad)
        left = pad + col * (w + pad)
        grid[top:top + h, left:left + w] = images[i].transpose(1, 2, 0)
    return grid


def _axis_transform(values, log: bool):
    v = np.asarray(values, dtype=np.float64)
    if log:
        if np.any(v <= 0):
            raise ValueError("log axis requires positive values")
        v = np.log10(v)
    return v


def _ticks(lo: float, hi: float, log: bool, count: int = 5):
    """(position, label) pairs in transformed coordinates."""
    pos = np.linspace(lo, hi, count)
    if log:
        return [(p, f"{10.0 ** p:.3g}") for p in pos]
    return [(p, f"{p:.3g}") for p in pos]


def line_chart_svg(path, series: dict, *, xlabel: str = "", ylabel: str = "",
                   title: str = "", log_x: bool = False, log_y: bool = False,
                   width: int = 640, height: int = 440) -> None:
    """Render ``{label: (xs, ys)}`` as an SVG with one polyline per series."""
    if not series:
        raise ValueError("no series to plot")
    ml, mr, mt, mb = 70, 170, 40, 55
    pw, ph = width - ml - mr, height - mt - mb
    txs = {k: _axis_transform(xs, log_x) for k, (xs, _) in series.items()}
    tys = {k: _axis_transform(ys, log_y) for k, (_, ys) in series.items()}
    x_lo = min(v.min() for v in txs.values())
    x_hi = max(v.max() for v in txs.values())
    y_lo = min(v.min() for v in tys.values())
    y_hi = max(v.max() for v in tys.values())
    x_span = (x_hi - x_lo) or 1.0
    y_span = (y_hi - y_lo) or 1.0

    def px(v):
        return ml + (v - x_lo) / x_span * pw

    def py(v):
        return mt + ph - (v - y_lo) / y_span * ph

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
             f'height="{height}" viewBox="0 0 {width} {height}">',
             f'<rect width="{width}" height="{height}" fill="white"/>']
    if title:
        parts.append(f'<text x="{ml + pw / 2:.1f}" y="24" text-anchor="middle" '
                     f'font-size="15">{title}</text>')
    # axes
    parts.append(f'<line x1="{ml}" y1="{mt + ph}" x2="{ml + pw}" y2="{mt + ph}" '
                 f'stroke="black"/>')
    parts.append(f'<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{mt + ph}" '
                 f'stroke="black"/>')
    for p, label in _ticks(x_lo, x_hi, log_x):
        x = px(p)
        parts.append(f'<line x1="{x:.1f}" y1="{mt + ph}" x2="{x:.1f}" '
                     f'y2="{mt + ph + 4}" stroke="black"/>')
        parts.append(f'<text x="{x:.1f}" y="{mt + ph + 18}" text-anchor="middle" '
                     f'font-size="11">{label}</text>')
    for p, label in _ticks(y_lo, y_hi, log_y):
        y = py(p)
        parts.append(f'<line x1="{ml - 4}" y1="{y:.1f}" x2="{ml}" y2="{y:.1f}" '
                     f'stroke="black"/>')
        parts.append(f'<text x="{ml - 8}" y="{y + 4:.1f}" text-anchor="end" '
                     f'font-size="11">{label}</text>')
    if xlabel:
        parts.append(f'<text x="{ml + pw / 2:.1f}" y="{height - 12}" '
                     f'text-anchor="middle" font-size="12">{xlabel}</text>')
    if ylabel:
        parts.append(f'<text x="18" y="{mt + ph / 2:.1f}" text-anchor="middle" '
                     f'font-size="12" transform="rotate(-90 18 {mt + ph / 2:.1f})">'
                     f'{ylabel}</text>')
    for i, (label, _) in enumerate(series.items()):
        color = _PALETTE[i % len(_PALETTE)]
        pts = " ".join(f"{px(a):.2f},{py(b):.2f}"
                       for a, b in zip(txs[label], tys[label]))
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" '
                     f'stroke-width="1.5"/>')
        ly = mt + 14 + 18 * i
        parts.append(f'<line x1="{ml + pw + 10}" y1="{ly - 4}" '
                     f'x2="{ml + pw + 34}" y2="{ly - 4}" stroke="{color}" '
                     f'stroke-width="1.5"/>')
        parts.append(f'<text x="{ml + pw + 40}" y="{ly}" font-size="11">'
                     f'{label}</text>')
    parts.append("</svg>")
    with open(path, "w") as f:
        f.write("\n".join(parts) + "\n")


def density_grid(model, extent: float = 3.0, resolution: int = 256,
                 batch: int = 8192) -> np.ndarray:
    """Model density exp(-nll) at pixel centers of a square grid.

    Entry [i, j] is the density at x = xs[j], y = xs[i] where xs spans
    [-extent, extent]; only 2-channel 1x1 models (2D toys) are supported.
    """
    if model.in_shape != (2, 1, 1):
        raise ValueError(f"density grid needs a 2-channel 1x1 model, "
                         f"got input shape {model.in_shape}")
    step = 2.0 * extent / resolution
    xs = -extent + step * (np.arange(resolution) + 0.5)
    X, Y = np.meshgrid(xs, xs, indexing="xy")
    pts = np.stack([X.ravel(), Y.ravel()], axis=1).reshape(-1, 2, 1, 1)
    nll = np.concatenate([model.nll_per_sample(pts[i:i + batch])
                          for i in range(0, pts.shape[0], batch)])
    return np.exp(-nll).reshape(resolution, resolution)


def save_heatmap(path, density: np.ndarray) -> None:
    """Grayscale PPM of a density grid, brightest at the peak; the y axis
    points up (row 0 of the grid is the bottom of the image)."""
    d = np.asarray(density, dtype=np.float64)
    peak = d.max()
    img = np.zeros(d.shape, dtype=np.uint8)
    if peak > 0:
        img = np.round(d / peak * 255.0).astype(np.uint8)
    write_ppm(path, img[::-1])
