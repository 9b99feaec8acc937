"""Minimal standalone SVG line plots with the plotted data embedded as comments."""
from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np

COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf")


def _ticks(lo: float, hi: float, n: int = 5) -> np.ndarray:
    if hi <= lo:
        return np.array([lo])
    step = 10 ** np.floor(np.log10((hi - lo) / n))
    for m in (1, 2, 5, 10):
        if (hi - lo) / (m * step) <= n:
            step *= m
            break
    return np.arange(np.ceil(lo / step) * step, hi + 0.5 * step, step)


def line_plot(series: dict, title: str = "", xlabel: str = "", ylabel: str = "",
              header: str = "", width: int = 560, height: int = 380, step: bool = False) -> str:
    """SVG text for ``{label: (x, y)}``; ``header`` (e.g. a config echo) goes in a leading comment.

    With ``step`` the series are drawn as left-continuous staircases.
    """
    ml, mr, mt, mb = 64, 16, 32, 48
    xs = np.concatenate([np.asarray(x, float) for x, _ in series.values()])
    ys = np.concatenate([np.asarray(y, float) for _, y in series.values()])
    fin = np.isfinite(ys)
    x0, x1 = float(xs.min()), float(xs.max())
    y0, y1 = (float(ys[fin].min()), float(ys[fin].max())) if fin.any() else (0.0, 1.0)
    if x1 == x0:
        x0, x1 = x0 - 0.5, x1 + 0.5
    pad = 0.05 * (y1 - y0) if y1 > y0 else 0.5
    y0, y1 = y0 - pad, y1 + pad

    def px(x):
        return ml + (x - x0) / (x1 - x0) * (width - ml - mr)

    def py(y):
        return height - mb - (y - y0) / (y1 - y0) * (height - mt - mb)

    out = ['<?xml version="1.0" encoding="UTF-8"?>']
    if header:
        out.append("<!--\n" + header.replace("--", "- -") + "\n-->")
    out.append(f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
               f'font-family="sans-serif" font-size="11">')
    out.append(f'<rect width="{width}" height="{height}" fill="white"/>')
    out.append(f'<rect x="{ml}" y="{mt}" width="{width - ml - mr}" height="{height - mt - mb}" '
               'fill="none" stroke="black"/>')
    for t in _ticks(x0, x1):
        out.append(f'<line x1="{px(t):.1f}" y1="{height - mb}" x2="{px(t):.1f}" y2="{height - mb + 4}" stroke="black"/>')
        out.append(f'<text x="{px(t):.1f}" y="{height - mb + 16}" text-anchor="middle">{t:.3g}</text>')
    for t in _ticks(y0, y1):
        out.append(f'<line x1="{ml - 4}" y1="{py(t):.1f}" x2="{ml}" y2="{py(t):.1f}" stroke="black"/>')
        out.append(f'<text x="{ml - 6}" y="{py(t) + 4:.1f}" text-anchor="end">{t:.3g}</text>')
    out.append(f'<text x="{width / 2}" y="{mt - 12}" text-anchor="middle" font-size="13">{escape(title)}</text>')
    out.append(f'<text x="{width / 2}" y="{height - 10}" text-anchor="middle">{escape(xlabel)}</text>')
    out.append(f'<text x="14" y="{height / 2}" text-anchor="middle" '
               f'transform="rotate(-90 14 {height / 2})">{escape(ylabel)}</text>')
    for i, (label, (x, y)) in enumerate(series.items()):
        x, y = np.asarray(x, float), np.asarray(y, float)
        col = COLORS[i % len(COLORS)]
        out.append(f"<!-- data {escape(label)}: x y")
        out.extend(f"{a!r} {b!r}" for a, b in zip(x.tolist(), y.tolist()))
        out.append("-->")
        pts = []
        for a, b in zip(x, y):
            if not np.isfinite(b):
                continue
            if step and pts:
                pts.append(f"{px(a):.2f},{float(pts[-1].split(',')[1]):.2f}")
            pts.append(f"{px(a):.2f},{py(b):.2f}")
        out.append(f'<polyline fill="none" stroke="{col}" stroke-width="1.5" points="{" ".join(pts)}"/>')
        ly = mt + 14 + 14 * i
        out.append(f'<line x1="{width - mr - 110}" y1="{ly - 4}" x2="{width - mr - 90}" y2="{ly - 4}" '
                   f'stroke="{col}" stroke-width="2"/>')
        out.append(f'<text x="{width - mr - 86}" y="{ly}">{escape(label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
