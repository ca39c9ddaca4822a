"""CSV and minimal SVG output.  Every SVG is written next to a CSV holding the
same numbers."""

from __future__ import annotations

import csv
import io
import math
from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

from .utils import atomic_write_text


def csv_text(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def write_csv(path, header, rows) -> None:
    atomic_write_text(path, csv_text(header, rows))


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        return [lo]
    return [lo + (hi - lo) * i / (n - 1) for i in range(n)]


def _fmt(v: float) -> str:
    if v == 0:
        return "0"
    if abs(v) >= 1e4 or abs(v) < 1e-2:
        return f"{v:.2e}"
    return f"{v:.3g}"


def svg_plot(points: Sequence[tuple[float, float]], *, line: Sequence[tuple[float, float]] = (),
             title: str = "", xlabel: str = "", ylabel: str = "", width: int = 480, height: int = 340) -> str:
    """Scatter of ``points`` plus an optional polyline ``line`` in the same axes."""
    left, right, top, bottom = 70, 20, 30, 50
    pw, ph = width - left - right, height - top - bottom
    allpts = [p for p in list(points) + list(line) if all(math.isfinite(c) for c in p)]
    xs = [p[0] for p in allpts] or [0.0, 1.0]
    ys = [p[1] for p in allpts] or [0.0, 1.0]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    if x1 == x0:
        x0, x1 = x0 - 0.5, x1 + 0.5
    if y1 == y0:
        y0, y1 = y0 - 0.5, y1 + 0.5

    def sx(x):
        return left + (x - x0) / (x1 - x0) * pw

    def sy(y):
        return top + ph - (y - y0) / (y1 - y0) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>',
    ]
    for t in _ticks(x0, x1):
        out.append(f'<text x="{sx(t):.1f}" y="{top + ph + 16}" text-anchor="middle">{_fmt(t)}</text>')
    for t in _ticks(y0, y1):
        out.append(f'<text x="{left - 6}" y="{sy(t) + 4:.1f}" text-anchor="end">{_fmt(t)}</text>')
    if title:
        out.append(f'<text x="{width / 2}" y="18" text-anchor="middle" font-size="13">{escape(title)}</text>')
    if xlabel:
        out.append(f'<text x="{left + pw / 2}" y="{height - 10}" text-anchor="middle">{escape(xlabel)}</text>')
    if ylabel:
        out.append(f'<text x="14" y="{top + ph / 2}" text-anchor="middle" '
                   f'transform="rotate(-90 14 {top + ph / 2})">{escape(ylabel)}</text>')
    line = [p for p in line if all(math.isfinite(c) for c in p)]
    if line:
        pts = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in line)
        out.append(f'<polyline points="{pts}" fill="none" stroke="#1f77b4" stroke-width="1.5"/>')
    for x, y in points:
        if math.isfinite(x) and math.isfinite(y):
            out.append(f'<circle cx="{sx(x):.1f}" cy="{sy(y):.1f}" r="3" fill="#d62728"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_plot(svg_path, header: Sequence[str], rows: Sequence[Sequence], points, **kw) -> Path:
    """Write the SVG and its sibling CSV (same stem); returns the CSV path."""
    svg_path = Path(svg_path)
    csv_path = svg_path.with_suffix(".csv")
    write_csv(csv_path, header, rows)
    atomic_write_text(svg_path, svg_plot(points, **kw))
    return csv_path
