"""Self-contained SVG charts: importance bars, labeled scatter, trade-off plot."""

from __future__ import annotations

import datetime as _dt
import os
from html import escape
from typing import Sequence

WIDTH, HEIGHT = 640, 420
MARGIN = 56
PALETTE = ("#3b6ea8", "#d0732c", "#4c9a52", "#b8423a", "#7d5ba6", "#8c6d4f", "#c65f9e", "#6f6f6f")


def _fmt(v: float) -> str:
    return f"{v:.2f}".rstrip("0").rstrip(".")


def _header(title: str, fixed: bool) -> list[str]:
    if fixed:
        stamp = "fixed"
    elif "SOURCE_DATE_EPOCH" in os.environ:
        stamp = _dt.datetime.fromtimestamp(int(os.environ["SOURCE_DATE_EPOCH"]), _dt.timezone.utc).isoformat()
    else:
        stamp = _dt.datetime.now(_dt.timezone.utc).replace(microsecond=0).isoformat()
    return [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">',
        f"<metadata>generator=scalpel created={stamp}</metadata>",
        f"<title>{escape(title)}</title>",
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>',
    ]


class _Axes:
    def __init__(self, xlo, xhi, ylo, yhi):
        if xhi <= xlo:
            xlo, xhi = xlo - 1.0, xhi + 1.0
        if yhi <= ylo:
            ylo, yhi = ylo - 1.0, yhi + 1.0
        self.xlo, self.xhi, self.ylo, self.yhi = xlo, xhi, ylo, yhi

    def x(self, v: float) -> float:
        return MARGIN + (v - self.xlo) / (self.xhi - self.xlo) * (WIDTH - 2 * MARGIN)

    def y(self, v: float) -> float:
        return HEIGHT - MARGIN - (v - self.ylo) / (self.yhi - self.ylo) * (HEIGHT - 2 * MARGIN)

    def frame(self, xlabel: str, ylabel: str, ticks: int = 5) -> list[str]:
        out = [
            f'<line x1="{MARGIN}" y1="{HEIGHT - MARGIN}" x2="{WIDTH - MARGIN}" y2="{HEIGHT - MARGIN}" stroke="black"/>',
            f'<line x1="{MARGIN}" y1="{MARGIN}" x2="{MARGIN}" y2="{HEIGHT - MARGIN}" stroke="black"/>',
            f'<text x="{WIDTH / 2}" y="{HEIGHT - 14}" text-anchor="middle">{escape(xlabel)}</text>',
            f'<text x="16" y="{HEIGHT / 2}" text-anchor="middle" transform="rotate(-90 16 {HEIGHT / 2})">'
            f"{escape(ylabel)}</text>",
        ]
        for i in range(ticks + 1):
            v = self.ylo + (self.yhi - self.ylo) * i / ticks
            out.append(f'<text x="{MARGIN - 6}" y="{self.y(v) + 4:.1f}" text-anchor="end">{_fmt(v)}</text>')
        return out


def _pad(lo: float, hi: float) -> tuple[float, float]:
    span = hi - lo if hi > lo else 1.0
    return lo - 0.08 * span, hi + 0.08 * span


def bar_chart(labels: Sequence[str], values: Sequence[float], title: str, ylabel: str = "score",
              highlight: int | None = None, fixed: bool = False) -> str:
    out = _header(title, fixed)
    ax = _Axes(0, max(len(values), 1), 0.0, max(max(values, default=0.0), 1e-12) * 1.1)
    out += ax.frame("", ylabel)
    slot = (WIDTH - 2 * MARGIN) / max(len(values), 1)
    for i, (label, v) in enumerate(zip(labels, values)):
        x0 = MARGIN + i * slot + slot * 0.15
        top = ax.y(v)
        color = PALETTE[3] if i == highlight else PALETTE[0]
        out.append(f'<rect x="{x0:.1f}" y="{top:.1f}" width="{slot * 0.7:.1f}" '
                   f'height="{HEIGHT - MARGIN - top:.1f}" fill="{color}"/>')
        out.append(f'<text x="{x0 + slot * 0.35:.1f}" y="{HEIGHT - MARGIN + 14}" '
                   f'text-anchor="middle">{escape(str(label))}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def scatter(points: Sequence[tuple[float, float]], labels: Sequence[str], title: str,
            xlabel: str = "x", ylabel: str = "y", groups: Sequence[str] | None = None,
            fixed: bool = False) -> str:
    xs = [p[0] for p in points]
    ys = [p[1] for p in points]
    ax = _Axes(*_pad(min(xs, default=0), max(xs, default=1)), *_pad(min(ys, default=0), max(ys, default=1)))
    out = _header(title, fixed) + ax.frame(xlabel, ylabel)
    colors = {}
    for g in groups or ():
        colors.setdefault(g, PALETTE[len(colors) % len(PALETTE)])
    for i, ((x, y), label) in enumerate(zip(points, labels)):
        color = colors[groups[i]] if groups else PALETTE[0]
        cx, cy = ax.x(x), ax.y(y)
        out.append(f'<circle cx="{cx:.1f}" cy="{cy:.1f}" r="5" fill="{color}"/>')
        out.append(f'<text x="{cx + 7:.1f}" y="{cy - 5:.1f}">{escape(str(label))}</text>')
    for j, (g, color) in enumerate(colors.items()):
        y = MARGIN + 14 * j
        out.append(f'<rect x="{WIDTH - MARGIN - 90}" y="{y - 8}" width="8" height="8" fill="{color}"/>')
        out.append(f'<text x="{WIDTH - MARGIN - 78}" y="{y}">{escape(g)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def tradeoff_plot(methods: Sequence[str], accd: Sequence[float], cap: Sequence[float], ppl: Sequence[float],
                  title: str = "accuracy drop vs capability", fixed: bool = False) -> str:
    """Accuracy drop on x, capability on y; each label carries the perplexity."""
    labels = [f"{m} (ppl {_fmt(p)})" for m, p in zip(methods, ppl)]
    return scatter(list(zip(accd, cap)), labels, title, "AccD", "Cap", fixed=fixed)
