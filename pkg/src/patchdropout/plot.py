"""Static SVG line plots from result CSVs.

Output bytes depend only on the CSV contents: fixed number formatting, stable
series order, no timestamps.
"""

from __future__ import annotations

import csv
import io
import math
from pathlib import Path
from xml.sax.saxutils import escape

from .errors import SchemaMismatch

KINDS = {
    # kind: (required columns, x column, y column, series column or None)
    "keep_rate_curve": (("keep_rate", "test_top1"), "keep_rate", "test_top1", None),
    "robustness": (("series", "keep_rate", "accuracy"), "keep_rate", "accuracy", "series"),
    "savings": (("keep_rate", "N", "relative_theoretical", "relative_empirical"), "N", None, "keep_rate"),
}

WIDTH, HEIGHT = 640, 420
MARGIN = dict(left=70, right=160, top=30, bottom=55)
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")


def read_rows(text: str) -> list[dict]:
    return list(csv.DictReader(io.StringIO(text)))


def _series(rows: list[dict], kind: str) -> tuple[dict[str, list[tuple[float, float]]], str, str, bool]:
    required, xcol, ycol, scol = KINDS[kind]
    if not rows:
        raise SchemaMismatch(f"{kind} plot needs at least one row")
    missing = [c for c in required if c not in rows[0]]
    if missing:
        raise SchemaMismatch(f"{kind} plot needs columns {missing}")
    series: dict[str, list[tuple[float, float]]] = {}
    try:
        if kind == "savings":
            for r in rows:
                for which in ("theoretical", "empirical"):
                    name = f"r={float(r['keep_rate']):g} {which}"
                    series.setdefault(name, []).append((float(r["N"]), float(r[f"relative_{which}"])))
            return series, "sequence length N", "relative compute", True
        for r in rows:
            name = r[scol] if scol else ycol
            series.setdefault(name, []).append((float(r[xcol]), float(r[ycol])))
    except ValueError as exc:
        raise SchemaMismatch(f"non-numeric value in {kind} CSV: {exc}") from exc
    return series, xcol.replace("_", " "), ycol.replace("_", " "), False


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        return [lo]
    return [lo + (hi - lo) * i / (n - 1) for i in range(n)]


def render_svg(rows: list[dict], kind: str, title: str = "") -> str:
    if kind not in KINDS:
        raise SchemaMismatch(f"unknown plot kind {kind!r}; choose from {sorted(KINDS)}")
    series, xlabel, ylabel, logx = _series(rows, kind)
    for pts in series.values():
        pts.sort()

    xs = [x for pts in series.values() for x, _ in pts]
    ys = [y for pts in series.values() for _, y in pts]
    tx = (lambda v: math.log10(v)) if logx else (lambda v: v)
    x0, x1 = tx(min(xs)), tx(max(xs))
    y0, y1 = min(0.0, min(ys)), max(1.0, max(ys))
    if x1 == x0:
        x0, x1 = x0 - 0.5, x1 + 0.5
    pw = WIDTH - MARGIN["left"] - MARGIN["right"]
    ph = HEIGHT - MARGIN["top"] - MARGIN["bottom"]

    def px(v):
        return MARGIN["left"] + (tx(v) - x0) / (x1 - x0) * pw

    def py(v):
        return MARGIN["top"] + (1 - (v - y0) / (y1 - y0)) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
    ]
    if title:
        out.append(f'<text x="{WIDTH / 2:.2f}" y="18" text-anchor="middle" font-size="14">{escape(title)}</text>')
    # axes
    left, bottom = MARGIN["left"], HEIGHT - MARGIN["bottom"]
    out.append(f'<line class="axis" x1="{left}" y1="{bottom}" x2="{left + pw}" y2="{bottom}" stroke="black"/>')
    out.append(f'<line class="axis" x1="{left}" y1="{MARGIN["top"]}" x2="{left}" y2="{bottom}" stroke="black"/>')
    for t in _ticks(x0, x1):
        xv = 10**t if logx else t
        x = MARGIN["left"] + (t - x0) / (x1 - x0) * pw
        label = f"{xv:.3g}"
        out.append(f'<line x1="{x:.2f}" y1="{bottom}" x2="{x:.2f}" y2="{bottom + 5}" stroke="black"/>')
        out.append(f'<text x="{x:.2f}" y="{bottom + 18}" text-anchor="middle" font-size="11">{label}</text>')
    for t in _ticks(y0, y1):
        y = py(t)
        out.append(f'<line x1="{left - 5}" y1="{y:.2f}" x2="{left}" y2="{y:.2f}" stroke="black"/>')
        out.append(f'<text x="{left - 8}" y="{y + 4:.2f}" text-anchor="end" font-size="11">{t:.3g}</text>')
    out.append(f'<text x="{left + pw / 2:.2f}" y="{HEIGHT - 15}" text-anchor="middle" font-size="12">{escape(xlabel)}</text>')
    out.append(
        f'<text x="18" y="{MARGIN["top"] + ph / 2:.2f}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 18 {MARGIN["top"] + ph / 2:.2f})">{escape(ylabel)}</text>'
    )
    # series
    for i, name in enumerate(sorted(series)):
        color = PALETTE[i % len(PALETTE)]
        pts = series[name]
        path = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in pts)
        out.append(f'<g class="series" data-name="{escape(name)}">')
        if len(pts) > 1:
            out.append(f'<polyline points="{path}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        for x, y in pts:
            out.append(f'<circle class="point" cx="{px(x):.2f}" cy="{py(y):.2f}" r="3" fill="{color}"/>')
        out.append("</g>")
        ly = MARGIN["top"] + 16 * i + 8
        lx = WIDTH - MARGIN["right"] + 12
        out.append(f'<line x1="{lx}" y1="{ly}" x2="{lx + 18}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{lx + 24}" y="{ly + 4}" font-size="11">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_plot(csv_path, kind: str, out_path=None, title: str = "") -> Path:
    csv_path = Path(csv_path)
    svg = render_svg(read_rows(csv_path.read_text()), kind, title)
    out = Path(out_path) if out_path else csv_path.with_suffix(".svg")
    out.write_text(svg)
    return out
