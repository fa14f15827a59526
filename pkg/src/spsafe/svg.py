"""Minimal deterministic SVG line plots."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

DASH = {"solid": None, "dashdot": "8,3,2,3", "dashed": "6,4"}


@dataclass
class Series:
    label: str
    x: Sequence[float]
    y: Sequence[float]
    style: str = "solid"
    color: str = "#1f77b4"

    def __post_init__(self):
        if self.style not in DASH:
            raise ValueError(f"unknown line style {self.style!r}")
        if len(self.x) != len(self.y) or len(self.x) == 0:
            raise ValueError(f"series {self.label!r} needs equal, nonempty x and y")


def ramp(i: int, n: int) -> str:
    """Green for the first of ``n`` series, red for the last."""
    s = i / (n - 1) if n > 1 else 0.0
    r, g = int(round(40 + 200 * s)), int(round(160 - 130 * s))
    return f"#{r:02x}{g:02x}30"


def _ticks(lo, hi, n=5):
    return [lo + (hi - lo) * k / (n - 1) for k in range(n)]


def _fmt(v):
    return f"{v:.4g}"


def render_svg(series: Sequence[Series], path: Optional[str] = None, title: str = "",
               xlabel: str = "", ylabel: str = "", width: int = 640, height: int = 400,
               hline: Optional[float] = 0.0) -> str:
    """Render line series; the same input always yields the same bytes."""
    if not series:
        raise ValueError("nothing to plot")
    xs = np.concatenate([np.asarray(s.x, dtype=float) for s in series])
    ys = np.concatenate([np.asarray(s.y, dtype=float) for s in series])
    ok = np.isfinite(xs) & np.isfinite(ys)
    if not np.any(ok):
        raise ValueError("series hold no finite points")
    x0, x1 = float(xs[ok].min()), float(xs[ok].max())
    y0, y1 = float(ys[ok].min()), float(ys[ok].max())
    if x1 == x0:
        x0, x1 = x0 - 0.5, x1 + 0.5
    if y1 == y0:
        y0, y1 = y0 - 0.5, y1 + 0.5
    ml, mr, mt, mb = 70, 150, 30, 45
    pw, ph = width - ml - mr, height - mt - mb

    def px(v):
        return ml + (v - x0) / (x1 - x0) * pw

    def py(v):
        return mt + (y1 - v) / (y1 - y0) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
           f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
           f'<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="black"/>']
    for v in _ticks(x0, x1):
        out.append(f'<text x="{px(v):.2f}" y="{mt + ph + 15}" text-anchor="middle">{_fmt(v)}</text>')
    for v in _ticks(y0, y1):
        out.append(f'<text x="{ml - 5}" y="{py(v) + 4:.2f}" text-anchor="end">{_fmt(v)}</text>')
    if hline is not None and y0 <= hline <= y1:
        out.append(f'<line x1="{ml}" y1="{py(hline):.2f}" x2="{ml + pw}" y2="{py(hline):.2f}" '
                   'stroke="#888888" stroke-width="0.8"/>')
    for k, s in enumerate(series):
        x = np.asarray(s.x, dtype=float)
        y = np.asarray(s.y, dtype=float)
        m = np.isfinite(x) & np.isfinite(y)
        pts = " ".join(f"{px(a):.2f},{py(b):.2f}" for a, b in zip(x[m], y[m]))
        dash = DASH[s.style]
        extra = f' stroke-dasharray="{dash}"' if dash else ""
        out.append(f'<polyline class="{s.style}" fill="none" stroke="{s.color}" '
                   f'stroke-width="1.5"{extra} points="{pts}"/>')
        ly = mt + 12 + 14 * k
        out.append(f'<line x1="{ml + pw + 10}" y1="{ly - 4}" x2="{ml + pw + 30}" y2="{ly - 4}" '
                   f'stroke="{s.color}" stroke-width="1.5"{extra}/>')
        out.append(f'<text x="{ml + pw + 35}" y="{ly}">{_escape(s.label)}</text>')
    if title:
        out.append(f'<text x="{ml + pw / 2:.2f}" y="18" text-anchor="middle">{_escape(title)}</text>')
    if xlabel:
        out.append(f'<text x="{ml + pw / 2:.2f}" y="{height - 8}" text-anchor="middle">'
                   f'{_escape(xlabel)}</text>')
    if ylabel:
        out.append(f'<text x="15" y="{mt + ph / 2:.2f}" text-anchor="middle" '
                   f'transform="rotate(-90 15 {mt + ph / 2:.2f})">{_escape(ylabel)}</text>')
    out.append("</svg>\n")
    text = "\n".join(out)
    if path is not None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    return text


def _escape(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")
