"""Bare-bones SVG output for sweeps and loss traces (no plotting library)."""

from __future__ import annotations

import math
from pathlib import Path
from xml.sax.saxutils import escape

WIDTH, HEIGHT, MARGIN = 480, 320, 60
PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f"]


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.3g}"
    return str(v)


def _svg(body: list[str], title: str) -> str:
    head = f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" font-family="sans-serif" font-size="11">'
    return "\n".join([head, f'<text x="{WIDTH / 2}" y="18" text-anchor="middle">{escape(title)}</text>', *body, "</svg>\n"])


def _color(value: float) -> str:
    """Map [0, 1] onto a white-to-blue ramp; NaN cells are grey."""
    if not math.isfinite(value):
        return "#bbbbbb"
    t = min(max(value, 0.0), 1.0)
    r, g = int(255 * (1 - t)), int(255 * (1 - 0.6 * t))
    return f"#{r:02x}{g:02x}ff"


def heatmap_svg(rows: list[dict], x_key: str, y_key: str, value_key: str = "acc", title: str | None = None) -> str:
    xs = list(dict.fromkeys(r[x_key] for r in rows))
    ys = list(dict.fromkeys(r[y_key] for r in rows))
    cw = (WIDTH - 2 * MARGIN) / len(xs)
    ch = (HEIGHT - 2 * MARGIN) / len(ys)
    body = []
    for r in rows:
        i, j = xs.index(r[x_key]), ys.index(r[y_key])
        v = float(r[value_key])
        x, y = MARGIN + i * cw, MARGIN + j * ch
        body.append(f'<rect x="{x:.1f}" y="{y:.1f}" width="{cw:.1f}" height="{ch:.1f}" fill="{_color(v)}" stroke="#333"/>')
        body.append(f'<text x="{x + cw / 2:.1f}" y="{y + ch / 2 + 4:.1f}" text-anchor="middle">{_fmt(v)}</text>')
    for i, xv in enumerate(xs):
        body.append(f'<text x="{MARGIN + (i + 0.5) * cw:.1f}" y="{HEIGHT - MARGIN + 16}" text-anchor="middle">{escape(_fmt(xv))}</text>')
    for j, yv in enumerate(ys):
        body.append(f'<text x="{MARGIN - 6}" y="{MARGIN + (j + 0.5) * ch + 4:.1f}" text-anchor="end">{escape(_fmt(yv))}</text>')
    body.append(f'<text x="{WIDTH / 2}" y="{HEIGHT - 18}" text-anchor="middle">{escape(x_key)}</text>')
    body.append(f'<text x="14" y="{HEIGHT / 2}" transform="rotate(-90 14 {HEIGHT / 2})" text-anchor="middle">{escape(y_key)}</text>')
    return _svg(body, title or f"{value_key} over {y_key} x {x_key}")


def line_svg(series: dict[str, list[float]], title: str = "", x_label: str = "step", y_label: str = "value") -> str:
    """One polyline per named series, sharing axes; non-finite points are dropped."""
    finite = [v for vals in series.values() for v in vals if math.isfinite(v)]
    lo, hi = (min(finite), max(finite)) if finite else (0.0, 1.0)
    if hi == lo:
        hi = lo + 1.0
    n_max = max((len(v) for v in series.values()), default=1)
    pw, ph = WIDTH - 2 * MARGIN, HEIGHT - 2 * MARGIN
    body = [
        f'<line x1="{MARGIN}" y1="{HEIGHT - MARGIN}" x2="{WIDTH - MARGIN}" y2="{HEIGHT - MARGIN}" stroke="#000"/>',
        f'<line x1="{MARGIN}" y1="{MARGIN}" x2="{MARGIN}" y2="{HEIGHT - MARGIN}" stroke="#000"/>',
        f'<text x="{MARGIN - 4}" y="{MARGIN + 4}" text-anchor="end">{_fmt(hi)}</text>',
        f'<text x="{MARGIN - 4}" y="{HEIGHT - MARGIN}" text-anchor="end">{_fmt(lo)}</text>',
        f'<text x="{WIDTH / 2}" y="{HEIGHT - 18}" text-anchor="middle">{escape(x_label)}</text>',
        f'<text x="14" y="{HEIGHT / 2}" transform="rotate(-90 14 {HEIGHT / 2})" text-anchor="middle">{escape(y_label)}</text>',
    ]
    for s, (name, vals) in enumerate(series.items()):
        color = PALETTE[s % len(PALETTE)]
        pts = [
            f"{MARGIN + pw * i / max(n_max - 1, 1):.1f},{HEIGHT - MARGIN - ph * (v - lo) / (hi - lo):.1f}"
            for i, v in enumerate(vals)
            if math.isfinite(v)
        ]
        body.append(f'<polyline fill="none" stroke="{color}" points="{" ".join(pts)}"/>')
        body.append(f'<text x="{WIDTH - MARGIN + 4}" y="{MARGIN + 14 * s + 4}" fill="{color}">{escape(name)}</text>')
    return _svg(body, title)


def sweep_svg(rows: list[dict], keys: list[str], value_key: str = "acc") -> str:
    """Heat cells for a two-key grid, one ACC polyline per cell otherwise."""
    if len(keys) == 2:
        return heatmap_svg(rows, keys[1], keys[0], value_key)
    label = ",".join(keys)
    return line_svg({value_key: [float(r[value_key]) for r in rows]}, f"{value_key} over {label}", label, value_key)


def write_svg(path, text: str) -> Path:
    path = Path(path)
    path.write_text(text)
    return path
