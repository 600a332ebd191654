"""Tiny hand-rolled SVG emitters for scatter plots and reward curves."""

from __future__ import annotations

import math

PALETTE = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
    "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
]

_W, _H = 640, 480
_MARGIN = 56


def _ticks(lo: float, hi: float, n: int = 5):
    if hi <= lo:
        hi = lo + 1.0
    span = hi - lo
    raw = span / max(n - 1, 1)
    mag = 10 ** math.floor(math.log10(raw))
    step = min(s * mag for s in (1, 2, 5, 10) if s * mag >= raw)
    start = math.ceil(lo / step) * step
    out = []
    v = start
    while v <= hi + 1e-12 * span:
        out.append(round(v, 12))
        v += step
    return out


class _Canvas:
    def __init__(self, xlim, ylim, title=""):
        self.parts = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
            f'viewBox="0 0 {_W} {_H}">',
            f'<rect width="{_W}" height="{_H}" fill="white"/>',
        ]
        self.xlim, self.ylim = xlim, ylim
        if title:
            self.parts.append(
                f'<text x="{_W / 2}" y="20" text-anchor="middle" font-size="14" '
                f'font-family="sans-serif">{title}</text>'
            )

    def x(self, v):
        lo, hi = self.xlim
        return _MARGIN + (v - lo) / (hi - lo or 1.0) * (_W - 2 * _MARGIN)

    def y(self, v):
        lo, hi = self.ylim
        return _H - _MARGIN - (v - lo) / (hi - lo or 1.0) * (_H - 2 * _MARGIN)

    def axes(self, xlabel="", ylabel=""):
        x0, y0 = _MARGIN, _H - _MARGIN
        x1, y1 = _W - _MARGIN, _MARGIN
        self.parts.append(
            f'<path d="M {x0} {y1} L {x0} {y0} L {x1} {y0}" stroke="black" fill="none"/>'
        )
        for v in _ticks(*self.xlim):
            px = self.x(v)
            self.parts.append(f'<line x1="{px:.1f}" y1="{y0}" x2="{px:.1f}" y2="{y0 + 4}" stroke="black"/>')
            self.parts.append(
                f'<text x="{px:.1f}" y="{y0 + 16}" text-anchor="middle" font-size="10" '
                f'font-family="sans-serif">{v:g}</text>'
            )
        for v in _ticks(*self.ylim):
            py = self.y(v)
            self.parts.append(f'<line x1="{x0 - 4}" y1="{py:.1f}" x2="{x0}" y2="{py:.1f}" stroke="black"/>')
            self.parts.append(
                f'<text x="{x0 - 6}" y="{py + 3:.1f}" text-anchor="end" font-size="10" '
                f'font-family="sans-serif">{v:g}</text>'
            )
        if xlabel:
            self.parts.append(
                f'<text x="{_W / 2}" y="{_H - 12}" text-anchor="middle" font-size="12" '
                f'font-family="sans-serif">{xlabel}</text>'
            )
        if ylabel:
            self.parts.append(
                f'<text x="14" y="{_H / 2}" text-anchor="middle" font-size="12" '
                f'font-family="sans-serif" transform="rotate(-90 14 {_H / 2})">{ylabel}</text>'
            )

    def legend(self, entries):
        for i, (label, color) in enumerate(entries):
            y = _MARGIN + 8 + 16 * i
            x = _W - _MARGIN - 150
            self.parts.append(f'<rect x="{x}" y="{y - 8}" width="10" height="10" fill="{color}"/>')
            self.parts.append(
                f'<text x="{x + 14}" y="{y + 1}" font-size="11" font-family="sans-serif">{label}</text>'
            )

    def render(self) -> str:
        return "\n".join(self.parts + ["</svg>"])


def _limits(values, pad=0.06):
    lo, hi = min(values), max(values)
    if hi == lo:
        lo, hi = lo - 1.0, hi + 1.0
    span = hi - lo
    return lo - pad * span, hi + pad * span


def scatter_svg(points, labels, title="") -> str:
    """2-D scatter colored by label. ``points`` is an (n, 2) iterable,
    ``labels`` a matching list of strings."""
    pts = [(float(p[0]), float(p[1])) for p in points]
    if not pts:
        raise ValueError("no points to plot")
    order = sorted(dict.fromkeys(labels))
    color = {lab: PALETTE[i % len(PALETTE)] for i, lab in enumerate(order)}
    canvas = _Canvas(_limits([p[0] for p in pts]), _limits([p[1] for p in pts]), title)
    canvas.axes()
    for (px, py), lab in zip(pts, labels):
        canvas.parts.append(
            f'<circle cx="{canvas.x(px):.2f}" cy="{canvas.y(py):.2f}" r="3.5" '
            f'fill="{color[lab]}" fill-opacity="0.75"/>'
        )
    canvas.legend([(lab, color[lab]) for lab in order])
    return canvas.render()


def curves_svg(series, title="", xlabel="step", ylabel="reward") -> str:
    """Mean curves with shaded +/- one std bands.

    ``series`` maps name -> (xs, mean, std) arrays of equal length.
    """
    all_x, all_y = [], []
    for xs, mean, std in series.values():
        all_x.extend(xs)
        all_y.extend(m - s for m, s in zip(mean, std))
        all_y.extend(m + s for m, s in zip(mean, std))
    if not all_x:
        raise ValueError("no series to plot")
    canvas = _Canvas(_limits(all_x, 0.0), _limits(all_y), title)
    canvas.axes(xlabel, ylabel)
    entries = []
    for i, (name, (xs, mean, std)) in enumerate(series.items()):
        color = PALETTE[i % len(PALETTE)]
        entries.append((name, color))
        upper = [(canvas.x(x), canvas.y(m + s)) for x, m, s in zip(xs, mean, std)]
        lower = [(canvas.x(x), canvas.y(m - s)) for x, m, s in zip(xs, mean, std)]
        band = " ".join(f"{px:.1f},{py:.1f}" for px, py in upper + lower[::-1])
        canvas.parts.append(f'<polygon points="{band}" fill="{color}" fill-opacity="0.15"/>')
        line = " ".join(f"{canvas.x(x):.1f},{canvas.y(m):.1f}" for x, m in zip(xs, mean))
        canvas.parts.append(f'<polyline points="{line}" fill="none" stroke="{color}" stroke-width="1.6"/>')
    canvas.legend(entries)
    return canvas.render()
