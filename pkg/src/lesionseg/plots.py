"""Grouped bar charts as standalone SVG with the plotted numbers embedded.

The data block is a CSV inside an XML comment, so a chart can be checked
or regenerated by reading the file back rather than comparing pixels.
"""

from __future__ import annotations

import csv
import io
import re
from html import escape
from typing import Mapping, Sequence

PALETTE = ("#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f", "#edc948", "#b07aa1", "#ff9da7")
_DATA_RE = re.compile(r"<!-- data\n(.*?)-->", re.S)


def grouped_bar_svg(
    title: str,
    groups: Sequence[str],
    series: Mapping[str, Sequence[float]],
    ylabel: str = "",
    ymax: float | None = None,
    width: int = 720,
    height: int = 360,
) -> str:
    """One cluster of bars per group, one coloured bar per series."""
    names = list(series)
    for name in names:
        if len(series[name]) != len(groups):
            raise ValueError(f"series {name!r} has {len(series[name])} values for {len(groups)} groups")
    values = [float(v) for name in names for v in series[name]]
    top = ymax if ymax is not None else max([1.0] + values)
    left, right, upper, lower = 60, 150, 40, 50
    pw, ph = width - left - right, height - upper - lower
    slot = pw / max(len(groups), 1)
    bar = slot * 0.8 / max(len(names), 1)

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        "<!-- data\n" + series_to_csv(groups, series) + "-->",
        f'<text x="{width / 2:.1f}" y="22" text-anchor="middle" font-family="sans-serif" font-size="15">{escape(title)}</text>',
        f'<line x1="{left}" y1="{upper + ph}" x2="{left + pw}" y2="{upper + ph}" stroke="black"/>',
        f'<line x1="{left}" y1="{upper}" x2="{left}" y2="{upper + ph}" stroke="black"/>',
    ]
    for k in range(6):
        v = top * k / 5
        y = upper + ph - ph * k / 5
        out.append(f'<line x1="{left - 4}" y1="{y:.1f}" x2="{left}" y2="{y:.1f}" stroke="black"/>')
        out.append(
            f'<text x="{left - 7}" y="{y + 4:.1f}" text-anchor="end" font-family="sans-serif" font-size="11">{v:.2f}</text>'
        )
    if ylabel:
        out.append(
            f'<text x="16" y="{upper + ph / 2:.1f}" transform="rotate(-90 16 {upper + ph / 2:.1f})" '
            f'text-anchor="middle" font-family="sans-serif" font-size="12">{escape(ylabel)}</text>'
        )
    for gi, group in enumerate(groups):
        x0 = left + gi * slot + slot * 0.1
        for si, name in enumerate(names):
            v = float(series[name][gi])
            h = 0.0 if top <= 0 else max(0.0, min(v, top)) / top * ph
            out.append(
                f'<rect x="{x0 + si * bar:.1f}" y="{upper + ph - h:.1f}" width="{bar:.1f}" height="{h:.1f}" '
                f'fill="{PALETTE[si % len(PALETTE)]}"><title>{escape(name)} / {escape(group)}: {v:.4f}</title></rect>'
            )
        out.append(
            f'<text x="{left + (gi + 0.5) * slot:.1f}" y="{upper + ph + 18}" text-anchor="middle" '
            f'font-family="sans-serif" font-size="12">{escape(group)}</text>'
        )
    for si, name in enumerate(names):
        y = upper + 10 + si * 18
        out.append(f'<rect x="{left + pw + 15}" y="{y - 9}" width="12" height="12" fill="{PALETTE[si % len(PALETTE)]}"/>')
        out.append(f'<text x="{left + pw + 32}" y="{y + 1}" font-family="sans-serif" font-size="12">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def series_to_csv(groups: Sequence[str], series: Mapping[str, Sequence[float]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["series", "group", "value"])
    for name, vals in series.items():
        for g, v in zip(groups, vals):
            w.writerow([name, g, repr(float(v))])
    return buf.getvalue()


def read_svg_data(svg: str) -> tuple[list[str], dict[str, list[float]]]:
    """Recover ``(groups, series)`` from a chart written by :func:`grouped_bar_svg`."""
    m = _DATA_RE.search(svg)
    if not m:
        raise ValueError("no embedded data block in SVG")
    groups: list[str] = []
    series: dict[str, list[float]] = {}
    for rec in csv.DictReader(io.StringIO(m.group(1))):
        if rec["group"] not in groups:
            groups.append(rec["group"])
        series.setdefault(rec["series"], []).append(float(rec["value"]))
    return groups, series
