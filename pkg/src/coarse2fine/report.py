"""Deterministic SVG chart of per-bin estimates.

Written by hand rather than through a plotting library so that identical
inputs always give identical bytes.
"""

from __future__ import annotations

import math
from typing import Optional
from xml.sax.saxutils import escape

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")
WIDTH, HEIGHT = 720, 440
LEFT, RIGHT, TOP, BOTTOM = 60, 170, 30, 50


def _n(x: float) -> str:
    return f"{x:.2f}"


def render_svg(series: dict, truth: Optional[tuple] = None, title: str = "Posterior by bin") -> str:
    """``series`` maps method -> {"bin", "rho", "se"}; ``truth`` is ``(bins, rho)``.

    The y axis is fixed to [0, 1]; estimates outside it are left off the
    plot and counted in a footnote.
    """
    bins = sorted({b for s in series.values() for b in s["bin"]} | set(truth[0] if truth else ()))
    if not bins:
        raise ValueError("nothing to plot")
    lo, hi = bins[0], bins[-1]
    pw = WIDTH - LEFT - RIGHT
    ph = HEIGHT - TOP - BOTTOM

    def px(b):
        if hi == lo:
            return LEFT + pw / 2
        return LEFT + (b - lo) / (hi - lo) * pw

    def py(v):
        return TOP + (1.0 - v) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{LEFT}" y="18" font-size="14">{escape(title)}</text>',
    ]
    for t in (0.0, 0.25, 0.5, 0.75, 1.0):
        y = py(t)
        out.append(f'<line x1="{LEFT}" y1="{_n(y)}" x2="{LEFT + pw}" y2="{_n(y)}" stroke="#dddddd"/>')
        out.append(f'<text x="{LEFT - 8}" y="{_n(y + 4)}" text-anchor="end">{t:.2f}</text>')
    for b in bins:
        out.append(f'<text x="{_n(px(b))}" y="{HEIGHT - BOTTOM + 18}" text-anchor="middle">{b}</text>')
    out.append(
        f'<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>'
    )
    out.append(
        f'<text x="{LEFT + pw / 2:.2f}" y="{HEIGHT - 12}" text-anchor="middle">behavior bin</text>'
    )

    legend = []
    if truth:
        pts = " ".join(f"{_n(px(b))},{_n(py(min(max(v, 0.0), 1.0)))}" for b, v in zip(*truth))
        out.append(
            f'<polyline class="truth" points="{pts}" fill="none" stroke="black" stroke-width="4"/>'
        )
        legend.append(("truth", "black", 4))

    offscale = 0
    for n, (method, s) in enumerate(series.items()):
        color = PALETTE[n % len(PALETTE)]
        out.append(f'<g class="series" data-method="{escape(method)}" stroke="{color}" fill="{color}">')
        inside = []
        for b, v, se in zip(s["bin"], s["rho"], s["se"]):
            if not 0.0 <= v <= 1.0 or math.isnan(v):
                offscale += 1
                continue
            x = px(b)
            inside.append(f"{_n(x)},{_n(py(v))}")
            if se and not math.isnan(se) and se > 0:
                y0, y1 = py(min(v + se, 1.0)), py(max(v - se, 0.0))
                out.append(f'<line x1="{_n(x)}" y1="{_n(y0)}" x2="{_n(x)}" y2="{_n(y1)}" stroke-width="1"/>')
            out.append(f'<circle cx="{_n(x)}" cy="{_n(py(v))}" r="3"/>')
        if len(inside) > 1:
            out.append(f'<polyline points="{" ".join(inside)}" fill="none" stroke-width="1.5"/>')
        out.append("</g>")
        legend.append((method, color, 2))

    lx = WIDTH - RIGHT + 20
    for n, (name, color, width) in enumerate(legend):
        y = TOP + 10 + 20 * n
        out.append(f'<line x1="{lx}" y1="{y}" x2="{lx + 24}" y2="{y}" stroke="{color}" stroke-width="{width}"/>')
        out.append(f'<text x="{lx + 30}" y="{y + 4}">{escape(name)}</text>')
    if offscale:
        out.append(
            f'<text x="{lx}" y="{HEIGHT - BOTTOM}" font-size="10">{offscale} estimate(s) outside [0, 1] not shown</text>'
        )
    out.append("</svg>")
    return "\n".join(out) + "\n"
