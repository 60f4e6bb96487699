"""Minimal SVG line charts of per-epoch metrics."""
from __future__ import annotations

import math
from pathlib import Path
from xml.sax.saxutils import escape, quoteattr

import numpy as np

from .metrics import MetricRecord, read_jsonl

PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf"]
WIDTH, HEIGHT = 760, 440
MARGIN = {"left": 78, "right": 78, "top": 30, "bottom": 58}

PLOTTABLE = [n for n in MetricRecord.field_names() if n not in ("epoch", "n_tasks_per_metric")]


class PlotError(ValueError):
    pass


def nice_ticks(lo: float, hi: float, count: int = 5) -> list[float]:
    if not (math.isfinite(lo) and math.isfinite(hi)):
        return []
    if hi == lo:
        lo, hi = lo - 0.5, hi + 0.5
    raw = (hi - lo) / max(count - 1, 1)
    mag = 10 ** math.floor(math.log10(raw))
    step = min((m * mag for m in (1, 2, 2.5, 5, 10) if m * mag >= raw), default=10 * mag)
    start = math.floor(lo / step) * step
    ticks = []
    t = start
    while t <= hi + step * 1e-9:
        if t >= lo - step * 1e-9:
            ticks.append(round(t, 12))
        t += step
    return ticks


def _fmt(v: float) -> str:
    return f"{v:.4g}"


def _series(records: list[MetricRecord], name: str):
    pts = [(r.epoch, getattr(r, name)) for r in records]
    return [(float(e), float(v)) for e, v in pts if v is not None and math.isfinite(float(v))]


def _mean_series(all_series):
    by_epoch: dict[float, list[float]] = {}
    for s in all_series:
        for e, v in s:
            by_epoch.setdefault(e, []).append(v)
    n = len(all_series)
    return [(e, float(np.mean(vs))) for e, vs in sorted(by_epoch.items()) if len(vs) == n]


class _Axis:
    def __init__(self, values, y0, y1):
        lo, hi = (min(values), max(values)) if values else (0.0, 1.0)
        ticks = nice_ticks(lo, hi)
        self.lo = min([lo] + ticks)
        self.hi = max([hi] + ticks)
        if self.hi == self.lo:
            self.hi = self.lo + 1.0
        self.ticks = ticks
        self.y0, self.y1 = y0, y1

    def __call__(self, v):
        return self.y0 - (v - self.lo) / (self.hi - self.lo) * (self.y0 - self.y1)


def render_svg(runs: list[tuple[str, list[MetricRecord]]], fields: list[str], dual: bool = False,
               title: str | None = None) -> str:
    """SVG text for ``fields`` against epoch; one polyline per run, plus the mean of several runs."""
    if not runs:
        raise PlotError("at least one metrics file is required")
    if not fields:
        raise PlotError("at least one field is required")
    bad = [f for f in fields if f not in PLOTTABLE]
    if bad:
        raise PlotError(f"unknown field(s) {bad}; valid fields: {', '.join(PLOTTABLE)}")
    if dual and len(fields) != 2:
        raise PlotError("dual-axis mode needs exactly two fields")

    left, right = MARGIN["left"], WIDTH - MARGIN["right"]
    top, bottom = MARGIN["top"], HEIGHT - MARGIN["bottom"]

    groups = []  # (field, axis index, [(label, points, is_mean)])
    for f in fields:
        per_run = [(label, _series(recs, f)) for label, recs in runs]
        entries = [(label, pts, False) for label, pts in per_run]
        if len(runs) > 1:
            entries.append(("mean", _mean_series([p for _, p in per_run]), True))
        groups.append((f, 1 if dual and f == fields[1] else 0, entries))

    epochs = [e for _, _, ent in groups for _, pts, _ in ent for e, _ in pts]
    xlo, xhi = (min(epochs), max(epochs)) if epochs else (0.0, 1.0)
    if xhi == xlo:
        xhi = xlo + 1.0

    def sx(e):
        return left + (e - xlo) / (xhi - xlo) * (right - left)

    axes = []
    for ax in (0, 1) if dual else (0,):
        vals = [v for _, a, ent in groups if a == ax for _, pts, _ in ent for _, v in pts]
        axes.append(_Axis(vals, bottom, top))

    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<line class="axis" x1="{left}" y1="{bottom}" x2="{right}" y2="{bottom}" stroke="black"/>',
        f'<line class="axis" x1="{left}" y1="{top}" x2="{left}" y2="{bottom}" stroke="black"/>',
    ]
    if title:
        out.append(f'<text x="{WIDTH / 2:.1f}" y="18" text-anchor="middle">{escape(title)}</text>')
    for t in nice_ticks(xlo, xhi, 6):
        x = sx(t)
        out.append(f'<line x1="{x:.2f}" y1="{bottom}" x2="{x:.2f}" y2="{bottom + 5}" stroke="black"/>')
        out.append(f'<text x="{x:.2f}" y="{bottom + 18}" text-anchor="middle">{_fmt(t)}</text>')
    out.append(f'<text class="xlabel" x="{(left + right) / 2:.1f}" y="{HEIGHT - 14}" '
               f'text-anchor="middle">epoch</text>')

    for i, axis in enumerate(axes):
        xa = left if i == 0 else right
        if i == 1:
            out.append(f'<line class="axis" x1="{right}" y1="{top}" x2="{right}" y2="{bottom}" stroke="black"/>')
        sign, anchor = (-1, "end") if i == 0 else (1, "start")
        for t in axis.ticks:
            y = axis(t)
            out.append(f'<line x1="{xa}" y1="{y:.2f}" x2="{xa + 5 * sign}" y2="{y:.2f}" stroke="black"/>')
            out.append(f'<text x="{xa + 8 * sign}" y="{y + 4:.2f}" text-anchor="{anchor}">{_fmt(t)}</text>')
        label = ", ".join(f for f, a, _ in groups if a == i)
        lx = 16 if i == 0 else WIDTH - 10
        ly = (top + bottom) / 2
        out.append(f'<text class="ylabel" x="{lx}" y="{ly:.1f}" text-anchor="middle" '
                   f'transform="rotate(-90 {lx} {ly:.1f})">{escape(label)}</text>')

    color = 0
    legend_y = top + 4
    for f, ax, entries in groups:
        axis = axes[ax]
        for label, pts, is_mean in entries:
            stroke = "black" if is_mean else PALETTE[color % len(PALETTE)]
            if not is_mean:
                color += 1
            width = 2.5 if is_mean else 1.4
            dash = ' stroke-dasharray="6 3"' if ax == 1 else ""
            coords = " ".join(f"{sx(e):.2f},{axis(v):.2f}" for e, v in pts)
            out.append(
                f'<polyline class="series" data-field={quoteattr(f)} data-run={quoteattr(label)} '
                f'fill="none" stroke="{stroke}" stroke-width="{width}"{dash} points="{coords}"/>'
            )
            out.append(f'<text class="legend" x="{left + 10}" y="{legend_y + 10}" fill="{stroke}">'
                       f'{escape(f)} ({escape(label)})</text>')
            legend_y += 14
    out.append("</svg>")
    return "\n".join(out) + "\n"


def run_plot(metrics_files, fields, out, dual: bool = False, title: str | None = None) -> Path:
    runs = []
    for p in metrics_files:
        recs = read_jsonl(p)
        runs.append((Path(p).parent.name or Path(p).stem, recs))
    svg = render_svg(runs, list(fields), dual=dual, title=title)
    out = Path(out)
    out.write_text(svg, encoding="utf-8")
    return out
