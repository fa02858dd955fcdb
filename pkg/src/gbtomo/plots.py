"""Dependency-free SVG writers for sweeps, heatmaps and curves."""

from __future__ import annotations

from typing import Sequence

import numpy as np

WIDTH, HEIGHT, MARGIN = 480, 360, 50
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e")


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _frame(title: str) -> list:
    return [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">',
        '<rect width="100%" height="100%" fill="white"/>',
        f'<text x="{WIDTH / 2}" y="20" text-anchor="middle" font-family="sans-serif" font-size="14">{title}</text>',
    ]


def _scaler(lo: float, hi: float, a: float, b: float):
    span = hi - lo if hi > lo else 1.0
    return lambda v: a + (np.asarray(v) - lo) / span * (b - a)


def _write(path, parts: list) -> None:
    parts.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(parts) + "\n")


def write_line_svg(path, x: Sequence[float], ys: Sequence[Sequence[float]], labels: Sequence[str], title: str = "", logx: bool = False, logy: bool = False) -> None:
    """Curves ``ys`` against ``x`` with optional logarithmic axes."""
    x = np.asarray(x, dtype=float)
    ys = [np.asarray(y, dtype=float) for y in ys]
    tx = np.log10(x) if logx else x
    tys = [np.log10(np.abs(y) + 1e-300) if logy else y for y in ys]
    allv = np.concatenate(tys)
    sx = _scaler(tx.min(), tx.max(), MARGIN, WIDTH - MARGIN)
    sy = _scaler(allv.min(), allv.max(), HEIGHT - MARGIN, MARGIN)
    parts = _frame(title)
    parts.append(f'<rect x="{MARGIN}" y="{MARGIN}" width="{WIDTH - 2 * MARGIN}" height="{HEIGHT - 2 * MARGIN}" fill="none" stroke="black"/>')
    for k, (ty, lab) in enumerate(zip(tys, labels)):
        color = PALETTE[k % len(PALETTE)]
        pts = " ".join(f"{_fmt(a)},{_fmt(b)}" for a, b in zip(sx(tx), sy(ty)))
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        for a, b in zip(sx(tx), sy(ty)):
            parts.append(f'<circle cx="{_fmt(a)}" cy="{_fmt(b)}" r="2.5" fill="{color}"/>')
        parts.append(f'<text x="{WIDTH - MARGIN - 5}" y="{MARGIN + 15 + 15 * k}" text-anchor="end" font-family="sans-serif" font-size="11" fill="{color}">{lab}</text>')
    axis_x = "log10 h" if logx else "x"
    parts.append(f'<text x="{WIDTH / 2}" y="{HEIGHT - 12}" text-anchor="middle" font-family="sans-serif" font-size="11">{axis_x} [{tx.min():.3g}, {tx.max():.3g}]</text>')
    parts.append(f'<text x="12" y="{HEIGHT / 2}" font-family="sans-serif" font-size="11" transform="rotate(-90 12 {HEIGHT / 2})">[{allv.min():.3g}, {allv.max():.3g}]</text>')
    _write(path, parts)


def write_loglog_svg(path, h: Sequence[float], ys, labels, title: str = "") -> None:
    """Log-log sweep plot."""
    write_line_svg(path, h, ys, labels, title, logx=True, logy=True)


def write_heatmap_svg(path, image: np.ndarray, title: str = "") -> None:
    """Diverging-colour heatmap of a 2-D array (first index left to right); NaN cells stay blank."""
    img = np.asarray(image, dtype=float)
    nx, ny = img.shape
    finite = np.isfinite(img)
    peak = float(np.max(np.abs(img[finite]))) if finite.any() else 0.0
    peak = peak or 1.0
    cw = (WIDTH - 2 * MARGIN) / nx
    ch = (HEIGHT - 2 * MARGIN) / ny
    parts = _frame(title)
    for i in range(nx):
        for j in range(ny):
            if not finite[i, j]:
                continue
            v = img[i, j] / peak
            if v >= 0:
                r, g, b = 255, int(255 * (1 - v)), int(255 * (1 - v))
            else:
                r, g, b = int(255 * (1 + v)), int(255 * (1 + v)), 255
            parts.append(
                f'<rect x="{_fmt(MARGIN + i * cw)}" y="{_fmt(HEIGHT - MARGIN - (j + 1) * ch)}" width="{_fmt(cw + 0.05)}" height="{_fmt(ch + 0.05)}" fill="rgb({r},{g},{b})"/>'
            )
    parts.append(f'<text x="{WIDTH / 2}" y="{HEIGHT - 12}" text-anchor="middle" font-family="sans-serif" font-size="11">max |value| = {peak:.3g}</text>')
    _write(path, parts)


def write_polyline_svg(path, points: np.ndarray, title: str = "") -> None:
    """A curve in the plane with the unit circle for reference."""
    pts = np.asarray(points, dtype=float)
    lim = max(1.05, float(np.max(np.abs(pts))) * 1.05)
    s = min(WIDTH, HEIGHT) / 2 - MARGIN
    cx, cy = WIDTH / 2, HEIGHT / 2
    parts = _frame(title)
    parts.append(f'<circle cx="{cx}" cy="{cy}" r="{_fmt(s / lim)}" fill="none" stroke="gray"/>')
    poly = " ".join(f"{_fmt(cx + s * p[0] / lim)},{_fmt(cy - s * p[1] / lim)}" for p in pts)
    parts.append(f'<polyline points="{poly}" fill="none" stroke="{PALETTE[0]}" stroke-width="1.5"/>')
    _write(path, parts)

