"""Renderer-free SVG line and bar charts built from metrics CSV rows.

Every plotted point carries ``data-series``, ``data-x`` and ``data-y`` attributes
holding the CSV strings verbatim, so a chart can be parsed back and checked.
"""
from __future__ import annotations

import math
from xml.sax.saxutils import quoteattr, escape

WIDTH, HEIGHT = 640, 400
MARGIN = 60
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
           "#bcbd22", "#17becf")


def _finite(values):
    return [v for v in values if math.isfinite(v)]


def _range(values, pad=0.05):
    vals = _finite(values)
    if not vals:
        return 0.0, 1.0
    lo, hi = min(vals), max(vals)
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5
    span = hi - lo
    return lo - pad * span, hi + pad * span


class _Canvas:
    def __init__(self, title: str, xlabel: str, ylabel: str, xr, yr, xticks: bool = True):
        self.parts = []
        self.xr, self.yr = xr, yr
        self.parts.append(
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
            f'viewBox="0 0 {WIDTH} {HEIGHT}">')
        self.parts.append(f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>')
        self.parts.append(f'<text x="{WIDTH / 2}" y="24" text-anchor="middle" font-size="16">{escape(title)}</text>')
        x0, y0, x1, y1 = MARGIN, HEIGHT - MARGIN, WIDTH - MARGIN, MARGIN
        self.parts.append(f'<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>')
        self.parts.append(f'<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>')
        self.parts.append(f'<text x="{WIDTH / 2}" y="{HEIGHT - 15}" text-anchor="middle" font-size="12">'
                          f'{escape(xlabel)}</text>')
        self.parts.append(f'<text x="15" y="{HEIGHT / 2}" font-size="12" text-anchor="middle" '
                          f'transform="rotate(-90 15 {HEIGHT / 2})">{escape(ylabel)}</text>')
        for i in range(5):
            fx = xr[0] + (xr[1] - xr[0]) * i / 4
            fy = yr[0] + (yr[1] - yr[0]) * i / 4
            if xticks:
                self.parts.append(f'<text x="{self.px(fx):.1f}" y="{y0 + 16}" font-size="10" '
                                  f'text-anchor="middle">{fx:.3g}</text>')
            self.parts.append(f'<text x="{x0 - 6}" y="{self.py(fy):.1f}" font-size="10" '
                              f'text-anchor="end">{fy:.3g}</text>')

    def px(self, x):
        return MARGIN + (x - self.xr[0]) / (self.xr[1] - self.xr[0]) * (WIDTH - 2 * MARGIN)

    def py(self, y):
        return HEIGHT - MARGIN - (y - self.yr[0]) / (self.yr[1] - self.yr[0]) * (HEIGHT - 2 * MARGIN)

    def legend(self, names):
        for i, name in enumerate(names):
            color = PALETTE[i % len(PALETTE)]
            y = MARGIN + 14 * i
            self.parts.append(f'<rect x="{WIDTH - MARGIN + 4}" y="{y - 8}" width="8" height="8" fill="{color}"/>')
            self.parts.append(f'<text x="{WIDTH - MARGIN + 14}" y="{y}" font-size="8">{escape(name)}</text>')

    def done(self) -> str:
        return "\n".join(self.parts + ["</svg>"]) + "\n"


def _point_attrs(series, xs, ys):
    return f'data-series={quoteattr(series)} data-x={quoteattr(xs)} data-y={quoteattr(ys)}'


def line_chart(title: str, xlabel: str, ylabel: str, series: dict[str, list[tuple[str, str]]]) -> str:
    """``series`` maps a name to (x, y) string pairs; non-finite values are kept as attributes but not drawn."""
    xs = [float(x) for pts in series.values() for x, _ in pts]
    ys = [float(y) for pts in series.values() for _, y in pts]
    c = _Canvas(title, xlabel, ylabel, _range(xs), _range(ys))
    for i, (name, pts) in enumerate(series.items()):
        color = PALETTE[i % len(PALETTE)]
        drawable = [(float(x), float(y)) for x, y in pts if math.isfinite(float(x)) and math.isfinite(float(y))]
        if len(drawable) > 1:
            path = " ".join(f"{c.px(x):.2f},{c.py(y):.2f}" for x, y in drawable)
            c.parts.append(f'<polyline points="{path}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        for x, y in pts:
            fx, fy = float(x), float(y)
            cx = c.px(fx) if math.isfinite(fx) else MARGIN
            cy = c.py(fy) if math.isfinite(fy) else MARGIN
            c.parts.append(f'<circle cx="{cx:.2f}" cy="{cy:.2f}" r="2.5" fill="{color}" '
                           f'{_point_attrs(name, x, y)}/>')
    c.legend(list(series))
    return c.done()


def bar_chart(title: str, xlabel: str, ylabel: str, series: dict[str, list[tuple[str, str]]]) -> str:
    """Grouped bars: x values are categories shared across series."""
    cats = sorted({x for pts in series.values() for x, _ in pts}, key=float)
    ys = [float(y) for pts in series.values() for _, y in pts] + [0.0]
    c = _Canvas(title, xlabel, ylabel, (-0.5, max(len(cats), 1) - 0.5), _range(ys), xticks=False)
    slot = (WIDTH - 2 * MARGIN) / max(len(cats), 1)
    bw = slot * 0.8 / max(len(series), 1)
    base = c.py(max(c.yr[0], 0.0))
    for i, (name, pts) in enumerate(series.items()):
        color = PALETTE[i % len(PALETTE)]
        for x, y in pts:
            fy = float(y)
            left = MARGIN + cats.index(x) * slot + slot * 0.1 + i * bw
            top = c.py(fy) if math.isfinite(fy) else MARGIN
            c.parts.append(f'<rect x="{left:.2f}" y="{min(top, base):.2f}" width="{bw:.2f}" '
                           f'height="{abs(base - top):.2f}" fill="{color}" {_point_attrs(name, x, y)}/>')
    for j, cat in enumerate(cats):
        c.parts.append(f'<text x="{MARGIN + (j + 0.5) * slot:.1f}" y="{HEIGHT - MARGIN + 28}" font-size="9" '
                       f'text-anchor="middle">{escape(cat)}</text>')
    c.legend(list(series))
    return c.done()
