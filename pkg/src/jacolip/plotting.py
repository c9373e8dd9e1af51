"""Dependency-free SVG line charts for training dynamics."""

from __future__ import annotations

import math
from xml.sax.saxutils import escape

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf")

WIDTH, HEIGHT = 640, 400
MARGIN_L, MARGIN_R, MARGIN_T, MARGIN_B = 70, 20, 40, 50


def _fmt(v: float) -> str:
    return f"{v:.4g}"


def _span(lo: float, hi: float) -> tuple[float, float]:
    if hi > lo:
        return lo, hi
    pad = abs(lo) * 0.05 or 1.0
    return lo - pad, hi + pad


def line_chart(title: str, x_label: str, y_label: str, series: list[tuple[str, list, list]]) -> str:
    """Render ``series`` of ``(name, xs, ys)`` as one SVG document string."""
    if not series:
        raise ValueError("line_chart needs at least one series")
    xs_all = [x for _, xs, _ in series for x in xs]
    ys_all = [y for _, _, ys in series for y in ys]
    if not xs_all:
        raise ValueError("line_chart needs at least one point")
    if not all(math.isfinite(v) for v in xs_all + ys_all):
        raise ValueError(f"{title}: non-finite value in chart data")
    x0, x1 = _span(min(xs_all), max(xs_all))
    y0, y1 = _span(min(ys_all), max(ys_all))
    pw = WIDTH - MARGIN_L - MARGIN_R
    ph = HEIGHT - MARGIN_T - MARGIN_B

    def px(x):
        return MARGIN_L + (x - x0) / (x1 - x0) * pw

    def py(y):
        return MARGIN_T + ph - (y - y0) / (y1 - y0) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2:.1f}" y="24" text-anchor="middle" font-family="sans-serif" '
        f'font-size="16">{escape(title)}</text>',
        f'<g stroke="black" stroke-width="1">'
        f'<line x1="{MARGIN_L}" y1="{MARGIN_T + ph}" x2="{MARGIN_L + pw}" y2="{MARGIN_T + ph}"/>'
        f'<line x1="{MARGIN_L}" y1="{MARGIN_T}" x2="{MARGIN_L}" y2="{MARGIN_T + ph}"/></g>',
    ]
    ticks = []
    for i in range(5):
        fx = x0 + (x1 - x0) * i / 4
        fy = y0 + (y1 - y0) * i / 4
        ticks.append(f'<text x="{px(fx):.1f}" y="{MARGIN_T + ph + 16}" text-anchor="middle">{_fmt(fx)}</text>')
        ticks.append(f'<text x="{MARGIN_L - 6}" y="{py(fy) + 4:.1f}" text-anchor="end">{_fmt(fy)}</text>')
    out.append('<g font-family="sans-serif" font-size="11">' + "".join(ticks) + "</g>")
    out.append(
        f'<text x="{MARGIN_L + pw / 2:.1f}" y="{HEIGHT - 10}" text-anchor="middle" '
        f'font-family="sans-serif" font-size="12">{escape(x_label)}</text>'
    )
    out.append(
        f'<text x="16" y="{MARGIN_T + ph / 2:.1f}" text-anchor="middle" font-family="sans-serif" '
        f'font-size="12" transform="rotate(-90 16 {MARGIN_T + ph / 2:.1f})">{escape(y_label)}</text>'
    )
    legend = []
    for k, (name, xs, ys) in enumerate(series):
        color = PALETTE[k % len(PALETTE)]
        pts = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in zip(xs, ys))
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        ly = MARGIN_T + 8 + 16 * k
        legend.append(
            f'<line x1="{MARGIN_L + pw - 150}" y1="{ly}" x2="{MARGIN_L + pw - 130}" y2="{ly}" '
            f'stroke="{color}" stroke-width="2"/>'
            f'<text x="{MARGIN_L + pw - 124}" y="{ly + 4}">{escape(name)}</text>'
        )
    out.append('<g class="legend" font-family="sans-serif" font-size="11">' + "".join(legend) + "</g>")
    out.append("</svg>")
    return "\n".join(out) + "\n"
