"""A minimal SVG line-chart writer (axes, optional log-x, one polyline per series)."""

from __future__ import annotations

import math
from xml.sax.saxutils import escape

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")
MARKERS = ("circle", "square", "triangle", "diamond", "circle", "square")


def _nice_ticks(lo: float, hi: float, count: int = 5) -> list:
    if hi <= lo:
        hi = lo + 1.0
    raw = (hi - lo) / count
    mag = 10 ** math.floor(math.log10(raw))
    step = min((m * mag for m in (1, 2, 2.5, 5, 10) if m * mag >= raw), default=raw)
    start = math.floor(lo / step) * step
    ticks = []
    t = start
    while t <= hi + 1e-9 * step:
        ticks.append(round(t, 12))
        t += step
    return ticks


def _fmt(v: float) -> str:
    return f"{v:.4g}"


def _marker(shape: str, x: float, y: float, color: str) -> str:
    r = 3.5
    if shape == "square":
        return f'<rect x="{x - r:.2f}" y="{y - r:.2f}" width="{2 * r}" height="{2 * r}" fill="{color}"/>'
    if shape == "triangle":
        pts = f"{x:.2f},{y - r:.2f} {x - r:.2f},{y + r:.2f} {x + r:.2f},{y + r:.2f}"
        return f'<polygon points="{pts}" fill="{color}"/>'
    if shape == "diamond":
        pts = f"{x:.2f},{y - r:.2f} {x + r:.2f},{y:.2f} {x:.2f},{y + r:.2f} {x - r:.2f},{y:.2f}"
        return f'<polygon points="{pts}" fill="{color}"/>'
    return f'<circle cx="{x:.2f}" cy="{y:.2f}" r="{r}" fill="{color}"/>'


def line_chart(series: dict, title: str, xlabel: str, ylabel: str, logx: bool = True, width: int = 520, height: int = 380) -> str:
    """Render ``{name: [(x, y), ...]}`` as an SVG document string."""
    left, right, top, bottom = 70, 130, 40, 55
    pts = [(x, y) for s in series.values() for x, y in s if y is not None and math.isfinite(y)]
    if not pts:
        pts = [(1.0, 0.0), (10.0, 1.0)]
    tx = (lambda v: math.log10(v)) if logx else (lambda v: v)
    xs = [tx(x) for x, _ in pts]
    ys = [y for _, y in pts]
    x_lo, x_hi = min(xs), max(xs)
    if x_hi == x_lo:
        x_lo, x_hi = x_lo - 0.5, x_hi + 0.5
    y_ticks = _nice_ticks(min(ys + [0.0]), max(ys))
    y_lo, y_hi = y_ticks[0], y_ticks[-1]
    pw, ph = width - left - right, height - top - bottom

    def px(x):
        return left + (tx(x) - x_lo) / (x_hi - x_lo) * pw

    def py(y):
        return top + (1.0 - (y - y_lo) / (y_hi - y_lo)) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        '<rect width="100%" height="100%" fill="white"/>',
        f'<text x="{left + pw / 2:.1f}" y="22" text-anchor="middle" font-family="sans-serif" font-size="14">{escape(title)}</text>',
        f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>',
    ]
    for t in y_ticks:
        y = py(t)
        out.append(f'<line x1="{left - 4}" y1="{y:.2f}" x2="{left}" y2="{y:.2f}" stroke="black"/>')
        out.append(f'<line x1="{left}" y1="{y:.2f}" x2="{left + pw}" y2="{y:.2f}" stroke="#dddddd"/>')
        out.append(
            f'<text x="{left - 7}" y="{y + 4:.2f}" text-anchor="end" font-family="sans-serif" font-size="10">{_fmt(t)}</text>'
        )
    x_ticks = sorted({x for x, _ in pts})
    for t in x_ticks:
        x = px(t)
        out.append(f'<line x1="{x:.2f}" y1="{top + ph}" x2="{x:.2f}" y2="{top + ph + 4}" stroke="black"/>')
        out.append(
            f'<text x="{x:.2f}" y="{top + ph + 17}" text-anchor="middle" font-family="sans-serif" font-size="10">{_fmt(t)}</text>'
        )
    out.append(
        f'<text x="{left + pw / 2:.1f}" y="{height - 12}" text-anchor="middle" font-family="sans-serif" font-size="12">{escape(xlabel)}</text>'
    )
    out.append(
        f'<text x="16" y="{top + ph / 2:.1f}" text-anchor="middle" font-family="sans-serif" font-size="12" '
        f'transform="rotate(-90 16 {top + ph / 2:.1f})">{escape(ylabel)}</text>'
    )
    for i, (name, data) in enumerate(series.items()):
        color, shape = PALETTE[i % len(PALETTE)], MARKERS[i % len(MARKERS)]
        data = [(x, y) for x, y in sorted(data) if y is not None and math.isfinite(y)]
        if data:
            poly = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in data)
            out.append(f'<polyline points="{poly}" fill="none" stroke="{color}" stroke-width="1.5"/>')
            out.extend(_marker(shape, px(x), py(y), color) for x, y in data)
        ly = top + 12 + 18 * i
        lx = left + pw + 15
        out.append(f'<line x1="{lx}" y1="{ly}" x2="{lx + 20}" y2="{ly}" stroke="{color}" stroke-width="1.5"/>')
        out.append(_marker(shape, lx + 10, ly, color))
        out.append(f'<text x="{lx + 26}" y="{ly + 4}" font-family="sans-serif" font-size="11">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
