"""Hand-rolled SVG charts for run reports: fixed 800x500 canvas, no
plotting dependency, diffable output."""
from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np

WIDTH, HEIGHT = 800, 500
MARGIN_L, MARGIN_R, MARGIN_T, MARGIN_B = 80, 24, 48, 56
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def _fmt(x: float) -> str:
    return f"{x:.6g}"


def _axis_ticks(lo: float, hi: float, n: int = 5):
    if hi <= lo:
        hi = lo + 1.0
    return np.linspace(lo, hi, n)


class _Canvas:
    def __init__(self, title: str, xlabel: str, ylabel: str):
        self.parts = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" '
            f'height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">',
            f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
            f'<text x="{WIDTH / 2}" y="28" text-anchor="middle" '
            f'font-family="sans-serif" font-size="17" font-weight="bold">'
            f'{escape(title)}</text>',
            f'<text x="{WIDTH / 2}" y="{HEIGHT - 12}" text-anchor="middle" '
            f'font-family="sans-serif" font-size="13">{escape(xlabel)}</text>',
            f'<text x="18" y="{HEIGHT / 2}" text-anchor="middle" '
            f'font-family="sans-serif" font-size="13" '
            f'transform="rotate(-90 18 {HEIGHT / 2})">{escape(ylabel)}</text>',
        ]

    def add(self, fragment: str):
        self.parts.append(fragment)

    def render(self) -> str:
        return "\n".join(self.parts + ["</svg>"]) + "\n"


def line_chart(series: dict, title: str, xlabel: str, ylabel: str) -> str:
    """Render one polyline per series; axes span the min/max of the data."""
    xs_all = [x for pts in series.values() for x in pts[0]]
    ys_all = [y for pts in series.values() for y in pts[1]]
    if not xs_all:
        raise ValueError("no data points to plot")
    x_lo, x_hi = min(xs_all), max(xs_all)
    y_lo, y_hi = min(ys_all), max(ys_all)
    if x_hi <= x_lo:
        x_hi = x_lo + 1.0
    if y_hi <= y_lo:
        y_hi = y_lo + 1.0
    plot_w = WIDTH - MARGIN_L - MARGIN_R
    plot_h = HEIGHT - MARGIN_T - MARGIN_B

    def px(x):
        return MARGIN_L + (x - x_lo) / (x_hi - x_lo) * plot_w

    def py(y):
        return HEIGHT - MARGIN_B - (y - y_lo) / (y_hi - y_lo) * plot_h

    c = _Canvas(title, xlabel, ylabel)
    c.add(f'<rect x="{MARGIN_L}" y="{MARGIN_T}" width="{plot_w}" '
          f'height="{plot_h}" fill="none" stroke="#333"/>')
    for t in _axis_ticks(x_lo, x_hi):
        c.add(f'<line x1="{px(t):.1f}" y1="{HEIGHT - MARGIN_B}" '
              f'x2="{px(t):.1f}" y2="{HEIGHT - MARGIN_B + 5}" stroke="#333"/>')
        c.add(f'<text x="{px(t):.1f}" y="{HEIGHT - MARGIN_B + 20}" '
              f'text-anchor="middle" font-family="sans-serif" font-size="11">'
              f'{_fmt(t)}</text>')
    for t in _axis_ticks(y_lo, y_hi):
        c.add(f'<line x1="{MARGIN_L - 5}" y1="{py(t):.1f}" x2="{MARGIN_L}" '
              f'y2="{py(t):.1f}" stroke="#333"/>')
        c.add(f'<text x="{MARGIN_L - 9}" y="{py(t):.1f}" text-anchor="end" '
              f'dominant-baseline="middle" font-family="sans-serif" '
              f'font-size="11">{_fmt(t)}</text>')
    for i, (label, (xs, ys)) in enumerate(series.items()):
        color = PALETTE[i % len(PALETTE)]
        pts = " ".join(f"{px(x):.1f},{py(y):.1f}" for x, y in zip(xs, ys))
        c.add(f'<polyline points="{pts}" fill="none" stroke="{color}" '
              f'stroke-width="2" data-series="{escape(str(label))}"/>')
        ly = MARGIN_T + 16 + 18 * i
        lx = WIDTH - MARGIN_R - 150
        c.add(f'<line x1="{lx}" y1="{ly - 4}" x2="{lx + 26}" y2="{ly - 4}" '
              f'stroke="{color}" stroke-width="2"/>')
        c.add(f'<text x="{lx + 32}" y="{ly}" font-family="sans-serif" '
              f'font-size="12">{escape(str(label))}</text>')
    return c.render()


def _heat_color(frac: float) -> str:
    # white -> deep blue ramp; frac clamped to [0, 1]
    f = min(max(frac, 0.0), 1.0)
    r = int(round(255 - 205 * f))
    g = int(round(255 - 165 * f))
    b = int(round(255 - 75 * f))
    return f"#{r:02x}{g:02x}{b:02x}"


def heatmap(values: dict, x_values, y_values, title: str,
            xlabel: str, ylabel: str, scale_max: float = 100.0) -> str:
    """Cells keyed by (x, y); numeric cell annotations; missing cells gray."""
    x_values, y_values = list(x_values), list(y_values)
    plot_w = WIDTH - MARGIN_L - MARGIN_R
    plot_h = HEIGHT - MARGIN_T - MARGIN_B
    cw = plot_w / max(len(x_values), 1)
    ch = plot_h / max(len(y_values), 1)
    c = _Canvas(title, xlabel, ylabel)
    for ix, xv in enumerate(x_values):
        for iy, yv in enumerate(y_values):
            x0 = MARGIN_L + ix * cw
            y0 = HEIGHT - MARGIN_B - (iy + 1) * ch
            v = values.get((xv, yv))
            fill = "#dddddd" if v is None else _heat_color(v / scale_max)
            c.add(f'<rect x="{x0:.1f}" y="{y0:.1f}" width="{cw:.1f}" '
                  f'height="{ch:.1f}" fill="{fill}" stroke="#666" '
                  f'data-cell="{xv},{yv}"/>')
            if v is not None:
                dark = v / scale_max > 0.55
                c.add(f'<text x="{x0 + cw / 2:.1f}" y="{y0 + ch / 2 + 4:.1f}" '
                      f'text-anchor="middle" font-family="sans-serif" '
                      f'font-size="12" fill="{"white" if dark else "#222"}">'
                      f'{v:.1f}</text>')
    for ix, xv in enumerate(x_values):
        c.add(f'<text x="{MARGIN_L + (ix + 0.5) * cw:.1f}" '
              f'y="{HEIGHT - MARGIN_B + 18}" text-anchor="middle" '
              f'font-family="sans-serif" font-size="12">{escape(str(xv))}</text>')
    for iy, yv in enumerate(y_values):
        c.add(f'<text x="{MARGIN_L - 9}" '
              f'y="{HEIGHT - MARGIN_B - (iy + 0.5) * ch + 4:.1f}" '
              f'text-anchor="end" font-family="sans-serif" font-size="12">'
              f'{escape(str(yv))}</text>')
    return c.render()
