"""Minimal line-chart renderer emitting standalone SVG 1.1 documents."""

from __future__ import annotations

import math
from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf")
MARKERS = ("circle", "square", "triangle", "diamond")


def nice_ticks(lo: float, hi: float, target: int = 6) -> np.ndarray:
    """Round-numbered ticks covering ``[lo, hi]``."""
    if not (math.isfinite(lo) and math.isfinite(hi)):
        raise ValueError("tick range must be finite")
    if hi <= lo:
        lo, hi = lo - 0.5, lo + 0.5
    raw = (hi - lo) / max(target - 1, 1)
    mag = 10.0 ** math.floor(math.log10(raw))
    step = min((m * mag for m in (1, 2, 2.5, 5, 10) if m * mag >= raw), default=10 * mag)
    start = math.floor(lo / step) * step
    stop = math.ceil(hi / step) * step
    n = int(round((stop - start) / step)) + 1
    return start + step * np.arange(n)


def _fmt(v: float) -> str:
    return f"{v:.6g}"


def _marker(kind: str, x: float, y: float, color: str) -> str:
    r = 3.5
    if kind == "square":
        return f'<rect x="{x - r:.2f}" y="{y - r:.2f}" width="{2 * r}" height="{2 * r}" fill="{color}"/>'
    if kind == "triangle":
        pts = f"{x:.2f},{y - r:.2f} {x - r:.2f},{y + r:.2f} {x + r:.2f},{y + r:.2f}"
        return f'<polygon points="{pts}" fill="{color}"/>'
    if kind == "diamond":
        pts = f"{x:.2f},{y - r:.2f} {x + r:.2f},{y:.2f} {x:.2f},{y + r:.2f} {x - r:.2f},{y:.2f}"
        return f'<polygon points="{pts}" fill="{color}"/>'
    return f'<circle cx="{x:.2f}" cy="{y:.2f}" r="{r}" fill="{color}"/>'


def line_chart(
    series: Sequence[tuple[str, Sequence[float], Sequence[float]]],
    title: str,
    xlabel: str,
    ylabel: str,
    width: int = 640,
    height: int = 420,
) -> str:
    """Render ``(label, xs, ys)`` series as an SVG string.

    Non-finite points are dropped; a series with no finite points is listed
    in the legend only.
    """
    if not series:
        raise ValueError("nothing to plot")
    left, right, top, bottom = 70, 170, 40, 55
    pw, ph = width - left - right, height - top - bottom
    xs_all, ys_all = [], []
    for _, xs, ys in series:
        for x, y in zip(xs, ys):
            if math.isfinite(x) and math.isfinite(y):
                xs_all.append(x)
                ys_all.append(y)
    if not xs_all:
        xs_all, ys_all = [0.0, 1.0], [0.0, 1.0]
    xt = nice_ticks(min(xs_all), max(xs_all))
    yt = nice_ticks(min(ys_all), max(ys_all))
    x0, x1, y0, y1 = xt[0], xt[-1], yt[0], yt[-1]

    def sx(x):
        return left + (x - x0) / (x1 - x0) * pw

    def sy(y):
        return top + ph - (y - y0) / (y1 - y0) * ph

    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<text x="{left + pw / 2:.1f}" y="22" text-anchor="middle" font-family="sans-serif" '
        f'font-size="15">{escape(title)}</text>',
    ]
    for t in xt:
        X = sx(t)
        out.append(f'<line x1="{X:.2f}" y1="{top}" x2="{X:.2f}" y2="{top + ph}" stroke="#e5e5e5"/>')
        out.append(
            f'<text x="{X:.2f}" y="{top + ph + 18}" text-anchor="middle" font-family="sans-serif" '
            f'font-size="11">{_fmt(t)}</text>'
        )
    for t in yt:
        Y = sy(t)
        out.append(f'<line x1="{left}" y1="{Y:.2f}" x2="{left + pw}" y2="{Y:.2f}" stroke="#e5e5e5"/>')
        out.append(
            f'<text x="{left - 8}" y="{Y + 4:.2f}" text-anchor="end" font-family="sans-serif" '
            f'font-size="11">{_fmt(t)}</text>'
        )
    out.append(f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>')
    out.append(
        f'<text x="{left + pw / 2:.1f}" y="{height - 12}" text-anchor="middle" font-family="sans-serif" '
        f'font-size="13">{escape(xlabel)}</text>'
    )
    cy = top + ph / 2
    out.append(
        f'<text x="18" y="{cy:.1f}" text-anchor="middle" font-family="sans-serif" font-size="13" '
        f'transform="rotate(-90 18 {cy:.1f})">{escape(ylabel)}</text>'
    )
    for i, (label, xs, ys) in enumerate(series):
        color = PALETTE[i % len(PALETTE)]
        marker = MARKERS[i % len(MARKERS)]
        pts = [(sx(x), sy(y)) for x, y in zip(xs, ys) if math.isfinite(x) and math.isfinite(y)]
        if len(pts) > 1:
            path = " ".join(f"{x:.2f},{y:.2f}" for x, y in pts)
            out.append(f'<polyline points="{path}" fill="none" stroke="{color}" stroke-width="2"/>')
        out.extend(_marker(marker, x, y, color) for x, y in pts)
        ly = top + 14 + 20 * i
        lx = left + pw + 14
        out.append(f'<line x1="{lx}" y1="{ly}" x2="{lx + 24}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        out.append(_marker(marker, lx + 12, ly, color))
        out.append(
            f'<text x="{lx + 30}" y="{ly + 4}" font-family="sans-serif" font-size="12">{escape(label)}</text>'
        )
    out.append("</svg>")
    return "\n".join(out) + "\n"
