"""Minimal deterministic SVG writer: scatter, line, and histogram plots.

Plots are a convenience; CSV is the contract. Output bytes are a pure
function of the data (no timestamps, ids, or library version strings), so
fixed seeds give byte-identical plot files.
"""

import math

_W, _H = 640, 480
_ML, _MR, _MT, _MB = 70, 20, 40, 55
_PW, _PH = _W - _ML - _MR, _H - _MT - _MB


def _fmt(x: float) -> str:
    return format(float(x), ".6g")


def _nice_ticks(lo: float, hi: float, n: int = 6) -> list:
    if not math.isfinite(lo) or not math.isfinite(hi):
        return [0.0, 1.0]
    if hi <= lo:
        hi = lo + 1.0
    raw = (hi - lo) / max(n - 1, 1)
    mag = 10.0 ** math.floor(math.log10(raw))
    for m in (1.0, 2.0, 2.5, 5.0, 10.0):
        if raw <= m * mag:
            step = m * mag
            break
    start = math.ceil(lo / step) * step
    ticks = []
    t = start
    while t <= hi + 1e-9 * step:
        ticks.append(0.0 if abs(t) < 1e-12 * step else t)
        t += step
    return ticks or [lo, hi]


class _Frame:
    """Data-to-pixel mapping plus the axes/tick/label boilerplate."""

    def __init__(self, xlim, ylim, xlabel, ylabel, title):
        self.x0, self.x1 = xlim
        self.y0, self.y1 = ylim
        if self.x1 <= self.x0:
            self.x1 = self.x0 + 1.0
        if self.y1 <= self.y0:
            self.y1 = self.y0 + 1.0
        self.xlabel, self.ylabel, self.title = xlabel, ylabel, title

    def px(self, x):
        return _ML + (x - self.x0) / (self.x1 - self.x0) * _PW

    def py(self, y):
        return _MT + _PH - (y - self.y0) / (self.y1 - self.y0) * _PH

    def header(self) -> list:
        parts = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
            f'viewBox="0 0 {_W} {_H}">',
            f'<rect x="0" y="0" width="{_W}" height="{_H}" fill="white"/>',
            f'<rect x="{_ML}" y="{_MT}" width="{_PW}" height="{_PH}" fill="none" '
            'stroke="black" stroke-width="1"/>',
        ]
        for t in _nice_ticks(self.x0, self.x1):
            if self.x0 <= t <= self.x1:
                x = self.px(t)
                parts.append(f'<line x1="{_fmt(x)}" y1="{_MT + _PH}" x2="{_fmt(x)}" '
                             f'y2="{_MT + _PH + 5}" stroke="black"/>')
                parts.append(f'<text x="{_fmt(x)}" y="{_MT + _PH + 18}" font-size="11" '
                             f'text-anchor="middle" font-family="sans-serif">{_fmt(t)}</text>')
        for t in _nice_ticks(self.y0, self.y1):
            if self.y0 <= t <= self.y1:
                y = self.py(t)
                parts.append(f'<line x1="{_ML - 5}" y1="{_fmt(y)}" x2="{_ML}" '
                             f'y2="{_fmt(y)}" stroke="black"/>')
                parts.append(f'<text x="{_ML - 8}" y="{_fmt(y + 3.5)}" font-size="11" '
                             f'text-anchor="end" font-family="sans-serif">{_fmt(t)}</text>')
        parts.append(f'<text x="{_ML + _PW / 2}" y="{_H - 12}" font-size="13" '
                     f'text-anchor="middle" font-family="sans-serif">{self.xlabel}</text>')
        parts.append(f'<text x="18" y="{_MT + _PH / 2}" font-size="13" text-anchor="middle" '
                     f'font-family="sans-serif" transform="rotate(-90 18 {_MT + _PH / 2})">'
                     f'{self.ylabel}</text>')
        parts.append(f'<text x="{_W / 2}" y="22" font-size="14" text-anchor="middle" '
                     f'font-family="sans-serif">{self.title}</text>')
        return parts


def _limits(values, pad=0.06):
    finite = [v for v in values if math.isfinite(v)]
    if not finite:
        return (0.0, 1.0)
    lo, hi = min(finite), max(finite)
    if hi == lo:
        lo, hi = lo - 0.5, hi + 0.5
    span = hi - lo
    return lo - pad * span, hi + pad * span


def scatter_svg(series: dict, xlabel: str, ylabel: str, title: str,
                cross: tuple | None = None, circle: tuple | None = None) -> str:
    """Scatter of {label: (xs, ys, color)}; optional truth cross and mean circle."""
    xs_all, ys_all = [], []
    for xs, ys, _ in series.values():
        xs_all.extend(xs)
        ys_all.extend(ys)
    if cross:
        xs_all.append(cross[0])
        ys_all.append(cross[1])
    frame = _Frame(_limits(xs_all), _limits(ys_all), xlabel, ylabel, title)
    parts = frame.header()
    for xs, ys, color in series.values():
        for x, y in zip(xs, ys):
            parts.append(f'<circle cx="{_fmt(frame.px(x))}" cy="{_fmt(frame.py(y))}" '
                         f'r="2.4" fill="{color}" fill-opacity="0.6"/>')
    if cross:
        cx, cy = frame.px(cross[0]), frame.py(cross[1])
        parts.append(f'<path d="M {_fmt(cx - 6)} {_fmt(cy)} H {_fmt(cx + 6)} '
                     f'M {_fmt(cx)} {_fmt(cy - 6)} V {_fmt(cy + 6)}" '
                     'stroke="black" stroke-width="2" fill="none"/>')
    if circle:
        parts.append(f'<circle cx="{_fmt(frame.px(circle[0]))}" cy="{_fmt(frame.py(circle[1]))}" '
                     'r="5" fill="none" stroke="red" stroke-width="2"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def line_svg(series: dict, xlabel: str, ylabel: str, title: str,
             hline: float | None = None) -> str:
    """Polylines {label: (xs, ys, color)} with an optional dashed reference level."""
    xs_all, ys_all = [], []
    for xs, ys, _ in series.values():
        xs_all.extend(xs)
        ys_all.extend(ys)
    if hline is not None:
        ys_all.append(hline)
    frame = _Frame(_limits(xs_all), _limits(ys_all), xlabel, ylabel, title)
    parts = frame.header()
    if hline is not None:
        y = frame.py(hline)
        parts.append(f'<line x1="{_ML}" y1="{_fmt(y)}" x2="{_ML + _PW}" y2="{_fmt(y)}" '
                     'stroke="black" stroke-dasharray="6 4"/>')
    legend_y = _MT + 14
    for label, (xs, ys, color) in series.items():
        pts = " ".join(f"{_fmt(frame.px(x))},{_fmt(frame.py(y))}" for x, y in zip(xs, ys))
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.8"/>')
        for x, y in zip(xs, ys):
            parts.append(f'<circle cx="{_fmt(frame.px(x))}" cy="{_fmt(frame.py(y))}" '
                         f'r="2.6" fill="{color}"/>')
        parts.append(f'<rect x="{_ML + 10}" y="{legend_y - 8}" width="14" height="4" '
                     f'fill="{color}"/>')
        parts.append(f'<text x="{_ML + 30}" y="{legend_y - 2}" font-size="11" '
                     f'font-family="sans-serif">{label}</text>')
        legend_y += 16
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def histogram_svg(values, bins: int, xlabel: str, title: str,
                  curve=None, vline: float | None = None) -> str:
    """Density-normalized histogram with an optional overlay curve (xs, ys)."""
    values = sorted(float(v) for v in values)
    lo, hi = _limits(values, pad=0.02)
    width = (hi - lo) / bins
    counts = [0] * bins
    for v in values:
        idx = min(int((v - lo) / width), bins - 1)
        counts[idx] += 1
    n = max(len(values), 1)
    dens = [c / (n * width) for c in counts]
    ymax = max(dens + ([max(curve[1])] if curve else [0.0]))
    frame = _Frame((lo, hi), (0.0, ymax * 1.08), xlabel, "density", title)
    parts = frame.header()
    for i, d in enumerate(dens):
        if d <= 0:
            continue
        x0 = frame.px(lo + i * width)
        x1 = frame.px(lo + (i + 1) * width)
        y = frame.py(d)
        parts.append(f'<rect x="{_fmt(x0)}" y="{_fmt(y)}" width="{_fmt(x1 - x0)}" '
                     f'height="{_fmt(frame.py(0.0) - y)}" fill="steelblue" '
                     'fill-opacity="0.7" stroke="white" stroke-width="0.5"/>')
    if curve:
        pts = " ".join(f"{_fmt(frame.px(x))},{_fmt(frame.py(y))}"
                       for x, y in zip(curve[0], curve[1]))
        parts.append(f'<polyline points="{pts}" fill="none" stroke="blue" stroke-width="1.8"/>')
    if vline is not None:
        x = frame.px(vline)
        parts.append(f'<line x1="{_fmt(x)}" y1="{_MT}" x2="{_fmt(x)}" y2="{_MT + _PH}" '
                     'stroke="black" stroke-dasharray="5 4"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def step_path_svg(times, path_states, horizon: float, title: str) -> str:
    """Piecewise-constant sample path; path_states = [x0, state after each event]."""
    path = [float(s) for s in path_states]
    frame = _Frame((0.0, horizon), _limits(path), "time", "state", title)
    parts = frame.header()
    d = [f"M {_fmt(frame.px(0.0))} {_fmt(frame.py(path[0]))}"]
    for j, t in enumerate(times):
        d.append(f"H {_fmt(frame.px(float(t)))}")
        d.append(f"V {_fmt(frame.py(path[j + 1]))}")
    d.append(f"H {_fmt(frame.px(horizon))}")
    parts.append(f'<path d="{" ".join(d)}" fill="none" stroke="darkred" stroke-width="1.2"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
