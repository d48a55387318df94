"""Learning-curve SVGs written as plain text, one file per metric."""

from __future__ import annotations

from collections import defaultdict
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .harness import SummaryCurve

PALETTE = ("#1b6ca8", "#d1495b", "#edae49", "#00798c", "#66a182", "#8d6a9f", "#2e4057",
           "#b5651d")
WIDTH, HEIGHT = 640, 400
LEFT, RIGHT, TOP, BOTTOM = 60, 150, 30, 50


def _ticks(lo: float, hi: float, n: int = 5) -> np.ndarray:
    if hi <= lo:
        return np.array([lo])
    return np.linspace(lo, hi, n)


def render_svg(metric: str, curves: list[SummaryCurve]) -> str:
    xs = np.concatenate([c.iteration for c in curves]).astype(float)
    lows = np.concatenate([c.ci_low for c in curves])
    highs = np.concatenate([c.ci_high for c in curves])
    x0, x1 = float(xs.min()), float(xs.max())
    y0, y1 = float(np.nanmin(lows)), float(np.nanmax(highs))
    if x1 == x0:
        x1 = x0 + 1
    if y1 - y0 < 1e-9:
        y0, y1 = y0 - 0.5, y1 + 0.5
    pad = 0.05 * (y1 - y0)
    y0, y1 = y0 - pad, y1 + pad
    pw, ph = WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM

    def px(x):
        return LEFT + (x - x0) / (x1 - x0) * pw

    def py(y):
        return TOP + (y1 - y) / (y1 - y0) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
           f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">',
           f'<title>{escape(metric)}</title>',
           f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>']
    # axes
    out.append(f'<line x1="{LEFT}" y1="{TOP + ph}" x2="{LEFT + pw}" y2="{TOP + ph}" stroke="black"/>')
    out.append(f'<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{TOP + ph}" stroke="black"/>')
    for v in _ticks(y0 + pad, y1 - pad):
        y = py(v)
        out.append(f'<line x1="{LEFT - 4}" y1="{y:.1f}" x2="{LEFT}" y2="{y:.1f}" stroke="black"/>')
        out.append(f'<text x="{LEFT - 6}" y="{y + 4:.1f}" text-anchor="end">{v:.3g}</text>')
    for v in sorted(set(xs.tolist())):
        x = px(v)
        out.append(f'<line x1="{x:.1f}" y1="{TOP + ph}" x2="{x:.1f}" y2="{TOP + ph + 4}" stroke="black"/>')
        out.append(f'<text x="{x:.1f}" y="{TOP + ph + 16}" text-anchor="middle">{int(v)}</text>')
    out.append(f'<text x="{LEFT + pw / 2}" y="{HEIGHT - 10}" text-anchor="middle">iteration</text>')
    out.append(f'<text x="15" y="{TOP + ph / 2}" text-anchor="middle" '
               f'transform="rotate(-90 15 {TOP + ph / 2})">{escape(metric)}</text>')

    for k, c in enumerate(curves):
        color = PALETTE[k % len(PALETTE)]
        upper = " ".join(f"{px(x):.1f},{py(y):.1f}" for x, y in zip(c.iteration, c.ci_high))
        lower = " ".join(f"{px(x):.1f},{py(y):.1f}"
                         for x, y in zip(c.iteration[::-1], c.ci_low[::-1]))
        out.append(f'<polygon class="ci" points="{upper} {lower}" fill="{color}" '
                   f'fill-opacity="0.15" stroke="none"/>')
        line = " ".join(f"{px(x):.1f},{py(y):.1f}" for x, y in zip(c.iteration, c.mean))
        out.append(f'<polyline class="mean" points="{line}" fill="none" stroke="{color}" '
                   f'stroke-width="2"/>')
        ly = TOP + 10 + 16 * k
        lx = LEFT + pw + 12
        out.append(f'<line x1="{lx}" y1="{ly}" x2="{lx + 18}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text class="legend" x="{lx + 24}" y="{ly + 4}">{escape(c.strategy)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_plots(curves: list[SummaryCurve], out_dir) -> list[Path]:
    """Write ``curve_<metric>.svg`` for every metric present in ``curves``."""
    by_metric = defaultdict(list)
    for c in curves:
        if len(c.iteration):
            by_metric[c.metric].append(c)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for metric, group in by_metric.items():
        path = out_dir / f"curve_{metric}.svg"
        path.write_text(render_svg(metric, group))
        paths.append(path)
    return paths
