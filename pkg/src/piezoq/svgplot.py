"""Minimal deterministic SVG charts: lines, scatter points, axes and labels."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from xml.sax.saxutils import escape

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f")
WIDTH, HEIGHT = 640, 420
MARGIN_L, MARGIN_R, MARGIN_T, MARGIN_B = 80, 170, 40, 60


@dataclass
class Series:
    label: str
    x: list
    y: list
    style: str = "line"        # "line" or "points"


@dataclass
class Chart:
    title: str
    xlabel: str
    ylabel: str
    xlog: bool = False
    ylog: bool = False
    series: list = field(default_factory=list)

    def add(self, label, x, y, style="line"):
        pts = [(float(a), float(b)) for a, b in zip(x, y)
               if math.isfinite(a) and math.isfinite(b)]
        self.series.append(Series(label, [p[0] for p in pts], [p[1] for p in pts], style))
        return self

    def to_svg(self) -> str:
        return render(self)

    def save(self, path) -> None:
        with open(path, "w", newline="\n") as fh:
            fh.write(render(self))


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _tick_label(v: float) -> str:
    if v == 0:
        return "0"
    if abs(v) >= 1e4 or abs(v) < 1e-2:
        return f"{v:.3g}"
    return f"{v:.4g}"


def _nice_ticks(lo: float, hi: float, n: int = 5):
    span = hi - lo
    raw = span / max(n, 1)
    mag = 10 ** math.floor(math.log10(raw))
    step = min((m * mag for m in (1, 2, 5, 10) if m * mag >= raw), default=10 * mag)
    start = math.ceil(lo / step - 1e-9) * step
    ticks = []
    t = start
    while t <= hi + 1e-9 * step:
        ticks.append(round(t / step) * step)
        t += step
    return ticks


def _axis(values, log: bool):
    vals = [v for v in values if (v > 0 if log else True)]
    if not vals:
        return (0.0, 1.0) if not log else (1.0, 10.0)
    lo, hi = min(vals), max(vals)
    if log:
        lo, hi = math.log10(lo), math.log10(hi)
        if hi - lo < 1e-12:
            lo, hi = lo - 0.5, hi + 0.5
        return math.floor(lo * 4) / 4, math.ceil(hi * 4) / 4
    if hi - lo < 1e-12 * max(abs(hi), 1.0):
        pad = 0.5 * abs(hi) if hi != 0 else 0.5
        return lo - pad, hi + pad
    pad = 0.05 * (hi - lo)
    return lo - pad, hi + pad


def render(chart: Chart) -> str:
    xs = [v for s in chart.series for v in s.x]
    ys = [v for s in chart.series for v in s.y]
    x0, x1 = _axis(xs, chart.xlog)
    y0, y1 = _axis(ys, chart.ylog)
    pw = WIDTH - MARGIN_L - MARGIN_R
    ph = HEIGHT - MARGIN_T - MARGIN_B

    def tx(v):
        u = math.log10(v) if chart.xlog else v
        return MARGIN_L + (u - x0) / (x1 - x0) * pw

    def ty(v):
        u = math.log10(v) if chart.ylog else v
        return MARGIN_T + ph - (u - y0) / (y1 - y0) * ph

    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2:.1f}" y="22" text-anchor="middle" font-size="15">{escape(chart.title)}</text>',
        f'<rect x="{MARGIN_L}" y="{MARGIN_T}" width="{pw}" height="{ph}" fill="none" stroke="black"/>',
    ]

    def ticks(lo, hi, log):
        if log:
            return [10.0 ** k for k in range(math.ceil(lo - 1e-9), math.floor(hi + 1e-9) + 1)] or \
                   [10.0 ** lo, 10.0 ** hi]
        return _nice_ticks(lo, hi)

    for t in ticks(x0, x1, chart.xlog):
        px = tx(t)
        out.append(f'<line x1="{_fmt(px)}" y1="{MARGIN_T + ph}" x2="{_fmt(px)}" y2="{MARGIN_T + ph + 5}" stroke="black"/>')
        out.append(f'<text x="{_fmt(px)}" y="{MARGIN_T + ph + 18}" text-anchor="middle">{escape(_tick_label(t))}</text>')
    for t in ticks(y0, y1, chart.ylog):
        py = ty(t)
        out.append(f'<line x1="{MARGIN_L - 5}" y1="{_fmt(py)}" x2="{MARGIN_L}" y2="{_fmt(py)}" stroke="black"/>')
        out.append(f'<text x="{MARGIN_L - 8}" y="{_fmt(py + 4)}" text-anchor="end">{escape(_tick_label(t))}</text>')

    out.append(f'<text x="{MARGIN_L + pw / 2:.1f}" y="{HEIGHT - 15}" text-anchor="middle">{escape(chart.xlabel)}</text>')
    cy = MARGIN_T + ph / 2
    out.append(f'<text x="20" y="{cy:.1f}" text-anchor="middle" transform="rotate(-90 20 {cy:.1f})">'
               f'{escape(chart.ylabel)}</text>')

    out.append(f'<clipPath id="plot"><rect x="{MARGIN_L}" y="{MARGIN_T}" width="{pw}" height="{ph}"/></clipPath>')
    for k, s in enumerate(chart.series):
        color = PALETTE[k % len(PALETTE)]
        pts = [(tx(a), ty(b)) for a, b in zip(s.x, s.y)
               if (a > 0 or not chart.xlog) and (b > 0 or not chart.ylog)]
        if s.style == "points":
            for px, py in pts:
                out.append(f'<circle cx="{_fmt(px)}" cy="{_fmt(py)}" r="3" fill="{color}" clip-path="url(#plot)"/>')
        elif pts:
            d = " ".join(f"{_fmt(px)},{_fmt(py)}" for px, py in pts)
            out.append(f'<polyline points="{d}" fill="none" stroke="{color}" stroke-width="1.5" clip-path="url(#plot)"/>')
        ly = MARGIN_T + 12 + 18 * k
        lx = MARGIN_L + pw + 12
        if s.style == "points":
            out.append(f'<circle cx="{lx + 10}" cy="{ly - 4}" r="3" fill="{color}"/>')
        else:
            out.append(f'<line x1="{lx}" y1="{ly - 4}" x2="{lx + 20}" y2="{ly - 4}" stroke="{color}" stroke-width="1.5"/>')
        out.append(f'<text x="{lx + 26}" y="{ly}">{escape(s.label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
