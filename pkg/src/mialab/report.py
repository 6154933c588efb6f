"""Report emission: MetricsReport CSV and an SVG 1.1 ROC plot."""

from __future__ import annotations

import math
from pathlib import Path
from typing import List, Sequence, Tuple
from xml.sax.saxutils import escape

from .data_lab import _atomic_write
from .detectors.attack import ScoreTable
from .evaluation import RocCurve, report_csv, report_rows, roc_curve

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf")
WIDTH, HEIGHT = 560, 420
LEFT, RIGHT, TOP, BOTTOM = 60, 170, 20, 50


def _curves(tables: Sequence[ScoreTable]) -> List[Tuple[str, bool, RocCurve]]:
    out = []
    for t in tables:
        for det, boosted in t.keys():
            out.append((det, boosted, roc_curve(*t.select(det, boosted))))
    return out


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def roc_svg(tables: Sequence[ScoreTable], log_fpr: bool = False) -> str:
    """One polyline per (table, detector, boosted); boosted curves are dashed."""
    curves = _curves(tables)
    pw, ph = WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM
    floor = 1e-3
    if log_fpr and curves:
        floor = min(floor, min(0.5 / c.n_neg for _, _, c in curves))
    lo = math.log10(floor)

    def sx(f: float) -> float:
        if log_fpr:
            return LEFT + pw * (math.log10(max(f, floor)) - lo) / -lo
        return LEFT + pw * f

    def sy(t: float) -> float:
        return TOP + ph * (1.0 - t)

    parts = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>',
    ]
    if log_fpr:
        xticks = [10.0**e for e in range(int(math.ceil(lo)), 1)]
        xlabels = [f"1e{int(round(math.log10(v)))}" for v in xticks]
    else:
        xticks = [i / 5 for i in range(6)]
        xlabels = [f"{v:.1f}" for v in xticks]
    for v, lab in zip(xticks, xlabels):
        x = sx(v)
        parts.append(f'<line x1="{_fmt(x)}" y1="{TOP + ph}" x2="{_fmt(x)}" y2="{TOP + ph + 5}" stroke="black"/>')
        parts.append(f'<text x="{_fmt(x)}" y="{TOP + ph + 18}" font-size="11" text-anchor="middle">{lab}</text>')
    for i in range(6):
        v = i / 5
        y = sy(v)
        parts.append(f'<line x1="{LEFT - 5}" y1="{_fmt(y)}" x2="{LEFT}" y2="{_fmt(y)}" stroke="black"/>')
        parts.append(f'<text x="{LEFT - 8}" y="{_fmt(y + 4)}" font-size="11" text-anchor="end">{v:.1f}</text>')
    xlab = "False positive rate (log)" if log_fpr else "False positive rate"
    parts.append(f'<text x="{LEFT + pw / 2}" y="{HEIGHT - 12}" font-size="12" text-anchor="middle">{xlab}</text>')
    parts.append(f'<text x="16" y="{TOP + ph / 2}" font-size="12" text-anchor="middle" '
                 f'transform="rotate(-90 16 {TOP + ph / 2})">True positive rate</text>')
    # chance line
    if log_fpr:
        n = 50
        pts = [(floor * (1 / floor) ** (i / n)) for i in range(n + 1)]
        chance = " ".join(f"{_fmt(sx(f))},{_fmt(sy(f))}" for f in pts)
    else:
        chance = f"{_fmt(sx(0))},{_fmt(sy(0))} {_fmt(sx(1))},{_fmt(sy(1))}"
    parts.append(f'<polyline points="{chance}" fill="none" stroke="#999999" stroke-width="1"/>')

    colors = {}
    for k, (det, boosted, c) in enumerate(curves):
        color = colors.setdefault(det, PALETTE[len(colors) % len(PALETTE)])
        dash = ' stroke-dasharray="6,4"' if boosted else ""
        pts = " ".join(f"{_fmt(sx(f))},{_fmt(sy(t))}" for f, t in c.points())
        label = escape(f"{det} boosted={int(boosted)}")
        parts.append(f'<polyline class="roc" points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"{dash}>'
                     f"<title>{label}</title></polyline>")
        ly = TOP + 12 + 18 * k
        lx = WIDTH - RIGHT + 12
        parts.append(f'<line x1="{lx}" y1="{ly}" x2="{lx + 28}" y2="{ly}" stroke="{color}" stroke-width="1.5"{dash}/>')
        parts.append(f'<text x="{lx + 34}" y="{ly + 4}" font-size="11">{label}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def emit_report(paths: Sequence, out_dir, seed: int = 0, log_fpr: bool = False) -> Tuple[str, str]:
    """Read score tables, write ``report.csv`` and ``roc.svg`` into ``out_dir``."""
    tables = [ScoreTable.read(p) for p in paths]
    rows = [r for t in tables for r in report_rows(t, seed)]
    csv_text = report_csv(rows)
    svg = roc_svg(tables, log_fpr)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _atomic_write(out / "report.csv", csv_text.encode())
    _atomic_write(out / "roc.svg", svg.encode())
    return csv_text, svg
