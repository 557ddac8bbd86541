"""Byte-stable SVG emission for experiment reports.

Every plot renders onto a fixed 800x600 canvas with a fixed palette and no
timestamps, so the same report content always produces the same bytes.
Numbers are printed through one formatter (six significant digits) to keep
coordinate text independent of locale and numpy scalar types.

Only the handful of chart shapes the experiments need live here: scatter
with optional reference circles, multi-series line chart, and a bar
histogram.  Axis ticks come from a plain linspace of the data bounds; no
fancy tick-picking, which keeps layout deterministic.
"""

from __future__ import annotations

import math

CANVAS_W = 800
CANVAS_H = 600
MARGIN_L = 70
MARGIN_R = 25
MARGIN_T = 50
MARGIN_B = 55

PALETTE = ("#2a6f97", "#c44536", "#5a9367", "#e0a458", "#474973", "#8d6a9f")
AXIS_COLOR = "#333333"
GRID_COLOR = "#dddddd"
FONT = "font-family=\"Helvetica, Arial, sans-serif\""


def _fmt(x) -> str:
    v = float(x)
    if v == 0.0:
        v = 0.0  # normalize -0
    return "%.6g" % v


def _esc(text: str) -> str:
    return (str(text).replace("&", "&amp;").replace("<", "&lt;")
            .replace(">", "&gt;").replace('"', "&quot;"))


class Frame:
    """Affine map from data coordinates to the plotting rectangle."""

    def __init__(self, xlim, ylim):
        self.x0, self.x1 = float(xlim[0]), float(xlim[1])
        self.y0, self.y1 = float(ylim[0]), float(ylim[1])
        if self.x1 <= self.x0:
            self.x1 = self.x0 + 1.0
        if self.y1 <= self.y0:
            self.y1 = self.y0 + 1.0

    def px(self, x):
        w = CANVAS_W - MARGIN_L - MARGIN_R
        return MARGIN_L + (float(x) - self.x0) / (self.x1 - self.x0) * w

    def py(self, y):
        h = CANVAS_H - MARGIN_T - MARGIN_B
        return CANVAS_H - MARGIN_B - (float(y) - self.y0) / (self.y1 - self.y0) * h


def data_bounds(values, pad: float = 0.05):
    """(lo, hi) spanning the values with a small symmetric pad."""
    vals = [float(v) for v in values if math.isfinite(float(v))]
    if not vals:
        return (0.0, 1.0)
    lo, hi = min(vals), max(vals)
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5
    span = hi - lo
    return (lo - pad * span, hi + pad * span)


def _open_svg(parts, title):
    parts.append(f'<svg xmlns="http://www.w3.org/2000/svg" width="{CANVAS_W}" '
                 f'height="{CANVAS_H}" viewBox="0 0 {CANVAS_W} {CANVAS_H}">')
    parts.append(f'<rect x="0" y="0" width="{CANVAS_W}" height="{CANVAS_H}" fill="#ffffff"/>')
    parts.append(f'<text x="{CANVAS_W // 2}" y="28" text-anchor="middle" '
                 f'{FONT} font-size="17" fill="{AXIS_COLOR}">{_esc(title)}</text>')


def _axes(parts, frame: Frame, xlabel: str, ylabel: str, ticks: int = 6):
    left, right = MARGIN_L, CANVAS_W - MARGIN_R
    top, bottom = MARGIN_T, CANVAS_H - MARGIN_B
    for i in range(ticks):
        fx = frame.x0 + (frame.x1 - frame.x0) * i / (ticks - 1)
        fy = frame.y0 + (frame.y1 - frame.y0) * i / (ticks - 1)
        px, py = frame.px(fx), frame.py(fy)
        parts.append(f'<line x1="{_fmt(px)}" y1="{top}" x2="{_fmt(px)}" '
                     f'y2="{bottom}" stroke="{GRID_COLOR}" stroke-width="1"/>')
        parts.append(f'<line x1="{left}" y1="{_fmt(py)}" x2="{right}" '
                     f'y2="{_fmt(py)}" stroke="{GRID_COLOR}" stroke-width="1"/>')
        parts.append(f'<text x="{_fmt(px)}" y="{bottom + 18}" text-anchor="middle" '
                     f'{FONT} font-size="11" fill="{AXIS_COLOR}">{_fmt(fx)}</text>')
        parts.append(f'<text x="{left - 8}" y="{_fmt(py + 4)}" text-anchor="end" '
                     f'{FONT} font-size="11" fill="{AXIS_COLOR}">{_fmt(fy)}</text>')
    parts.append(f'<rect x="{left}" y="{top}" width="{right - left}" '
                 f'height="{bottom - top}" fill="none" stroke="{AXIS_COLOR}" '
                 f'stroke-width="1.5"/>')
    parts.append(f'<text x="{(left + right) // 2}" y="{CANVAS_H - 14}" '
                 f'text-anchor="middle" {FONT} font-size="13" '
                 f'fill="{AXIS_COLOR}">{_esc(xlabel)}</text>')
    parts.append(f'<text x="20" y="{(top + bottom) // 2}" text-anchor="middle" '
                 f'{FONT} font-size="13" fill="{AXIS_COLOR}" '
                 f'transform="rotate(-90 20 {(top + bottom) // 2})">{_esc(ylabel)}</text>')


def _legend(parts, names):
    x = MARGIN_L + 12
    y = MARGIN_T + 16
    for i, name in enumerate(names):
        color = PALETTE[i % len(PALETTE)]
        parts.append(f'<rect x="{x}" y="{y + 18 * i - 9}" width="12" height="12" '
                     f'fill="{color}"/>')
        parts.append(f'<text x="{x + 18}" y="{y + 18 * i + 2}" {FONT} '
                     f'font-size="12" fill="{AXIS_COLOR}">{_esc(name)}</text>')


def scatter_svg(series, title: str, xlabel: str = "x", ylabel: str = "y",
                xlim=None, ylim=None, circles=None) -> str:
    """Scatter chart; series is an ordered dict name -> (N, 2) point array.

    `circles` draws reference outlines as (cx, cy, r) triples, used for ring
    mode centers.
    """
    allx = [p[0] for pts in series.values() for p in pts]
    ally = [p[1] for pts in series.values() for p in pts]
    if circles:
        allx += [c[0] - c[2] for c in circles] + [c[0] + c[2] for c in circles]
        ally += [c[1] - c[2] for c in circles] + [c[1] + c[2] for c in circles]
    frame = Frame(xlim or data_bounds(allx), ylim or data_bounds(ally))
    parts: list[str] = []
    _open_svg(parts, title)
    _axes(parts, frame, xlabel, ylabel)
    for cx, cy, r in circles or ():
        rx = abs(frame.px(cx + r) - frame.px(cx))
        ry = abs(frame.py(cy + r) - frame.py(cy))
        parts.append(f'<ellipse cx="{_fmt(frame.px(cx))}" cy="{_fmt(frame.py(cy))}" '
                     f'rx="{_fmt(rx)}" ry="{_fmt(ry)}" fill="none" '
                     f'stroke="#aaaaaa" stroke-width="1" stroke-dasharray="4 3"/>')
    for i, (name, pts) in enumerate(series.items()):
        color = PALETTE[i % len(PALETTE)]
        for p in pts:
            parts.append(f'<circle cx="{_fmt(frame.px(p[0]))}" '
                         f'cy="{_fmt(frame.py(p[1]))}" r="3" fill="{color}" '
                         f'fill-opacity="0.75"/>')
    _legend(parts, list(series))
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def line_svg(xs, series, title: str, xlabel: str = "x", ylabel: str = "y",
             baseline=None) -> str:
    """Multi-series line chart over shared x values.

    `baseline` draws one dashed horizontal reference line as (label, y).
    """
    ally = [v for ys in series.values() for v in ys]
    if baseline is not None:
        ally.append(baseline[1])
    frame = Frame(data_bounds(xs), data_bounds(ally, pad=0.1))
    parts: list[str] = []
    _open_svg(parts, title)
    _axes(parts, frame, xlabel, ylabel)
    if baseline is not None:
        y = _fmt(frame.py(baseline[1]))
        parts.append(f'<line x1="{MARGIN_L}" y1="{y}" x2="{CANVAS_W - MARGIN_R}" '
                     f'y2="{y}" stroke="#888888" stroke-width="1.5" '
                     f'stroke-dasharray="6 4"/>')
        parts.append(f'<text x="{CANVAS_W - MARGIN_R - 4}" y="{_fmt(frame.py(baseline[1]) - 5)}" '
                     f'text-anchor="end" {FONT} font-size="11" '
                     f'fill="#666666">{_esc(baseline[0])}</text>')
    for i, (name, ys) in enumerate(series.items()):
        color = PALETTE[i % len(PALETTE)]
        coords = " ".join(f"{_fmt(frame.px(x))},{_fmt(frame.py(y))}"
                          for x, y in zip(xs, ys))
        parts.append(f'<polyline points="{coords}" fill="none" stroke="{color}" '
                     f'stroke-width="2"/>')
        for x, y in zip(xs, ys):
            parts.append(f'<circle cx="{_fmt(frame.px(x))}" cy="{_fmt(frame.py(y))}" '
                         f'r="3.5" fill="{color}"/>')
    _legend(parts, list(series))
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def hist_svg(edges, counts_by_series, title: str, xlabel: str = "value",
             ylabel: str = "count") -> str:
    """Grouped bar histogram over shared bin edges."""
    names = list(counts_by_series)
    peak = max((max(c) if len(c) else 0) for c in counts_by_series.values())
    frame = Frame((float(edges[0]), float(edges[-1])), (0.0, peak * 1.08 or 1.0))
    parts: list[str] = []
    _open_svg(parts, title)
    _axes(parts, frame, xlabel, ylabel)
    groups = len(names)
    for i, name in enumerate(names):
        color = PALETTE[i % len(PALETTE)]
        counts = counts_by_series[name]
        for b, c in enumerate(counts):
            x_lo = frame.px(edges[b])
            x_hi = frame.px(edges[b + 1])
            slot = (x_hi - x_lo) / groups
            top = frame.py(c)
            base = frame.py(0.0)
            parts.append(f'<rect x="{_fmt(x_lo + i * slot)}" y="{_fmt(top)}" '
                         f'width="{_fmt(max(slot - 1.0, 0.5))}" '
                         f'height="{_fmt(base - top)}" fill="{color}" '
                         f'fill-opacity="0.85"/>')
    _legend(parts, names)
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def parity_svg(reference, estimate, title: str, xlabel: str = "reference",
               ylabel: str = "estimate") -> str:
    """Estimate-vs-reference scatter with the identity diagonal."""
    lo = min(data_bounds(reference)[0], data_bounds(estimate)[0])
    hi = max(data_bounds(reference)[1], data_bounds(estimate)[1])
    frame = Frame((lo, hi), (lo, hi))
    parts: list[str] = []
    _open_svg(parts, title)
    _axes(parts, frame, xlabel, ylabel)
    parts.append(f'<line x1="{_fmt(frame.px(lo))}" y1="{_fmt(frame.py(lo))}" '
                 f'x2="{_fmt(frame.px(hi))}" y2="{_fmt(frame.py(hi))}" '
                 f'stroke="#888888" stroke-width="1.5" stroke-dasharray="6 4"/>')
    for r, e in zip(reference, estimate):
        parts.append(f'<circle cx="{_fmt(frame.px(r))}" cy="{_fmt(frame.py(e))}" '
                     f'r="2.5" fill="{PALETTE[0]}" fill-opacity="0.6"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
