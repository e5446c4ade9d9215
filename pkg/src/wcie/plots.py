"""Standalone SVG figures: association trajectories and simulation summaries.

Every plotted point carries a ``<title>`` with its exact values so the
figure doubles as a readable data table in a browser.
"""
from __future__ import annotations

from dataclasses import dataclass
from xml.sax.saxutils import escape

import numpy as np

PANEL_W, PANEL_H = 360, 260
MARGIN = dict(left=62, right=16, top=34, bottom=44)


@dataclass
class _Panel:
    x0: float
    y0: float
    xlim: tuple[float, float]
    ylim: tuple[float, float]

    def sx(self, x):
        a, b = self.xlim
        w = PANEL_W - MARGIN["left"] - MARGIN["right"]
        return self.x0 + MARGIN["left"] + (np.asarray(x, float) - a) / (b - a) * w

    def sy(self, y):
        a, b = self.ylim
        h = PANEL_H - MARGIN["top"] - MARGIN["bottom"]
        return self.y0 + MARGIN["top"] + (b - np.asarray(y, float)) / (b - a) * h


def _limits(*arrays, pad=0.06):
    vals = np.concatenate([np.ravel(a) for a in arrays if a is not None])
    vals = vals[np.isfinite(vals)]
    lo, hi = (float(vals.min()), float(vals.max())) if vals.size else (0.0, 1.0)
    if hi - lo < 1e-12:
        lo, hi = lo - 0.5 * max(abs(lo), 1e-3), hi + 0.5 * max(abs(hi), 1e-3)
    d = (hi - lo) * pad
    return lo - d, hi + d


def _ticks(lo, hi, n=5):
    return np.linspace(lo, hi, n)


def _g(v: float) -> str:
    return f"{v:.4g}"


def _axes(p: _Panel, title: str, xlabel: str, ylabel: str, hline: float | None = None) -> list[str]:
    out = []
    x1, x2 = p.sx(p.xlim[0]), p.sx(p.xlim[1])
    y1, y2 = p.sy(p.ylim[0]), p.sy(p.ylim[1])
    out.append(f'<rect x="{x1:.2f}" y="{y2:.2f}" width="{x2 - x1:.2f}" height="{y1 - y2:.2f}" fill="none" stroke="#444"/>')
    for t in _ticks(*p.xlim):
        out.append(f'<text x="{p.sx(t):.2f}" y="{y1 + 14:.2f}" font-size="10" text-anchor="middle">{_g(t)}</text>')
    for t in _ticks(*p.ylim):
        out.append(f'<text x="{x1 - 4:.2f}" y="{p.sy(t) + 3:.2f}" font-size="10" text-anchor="end">{_g(t)}</text>')
    if hline is not None and p.ylim[0] < hline < p.ylim[1]:
        out.append(f'<line x1="{x1:.2f}" x2="{x2:.2f}" y1="{p.sy(hline):.2f}" y2="{p.sy(hline):.2f}" stroke="#999" stroke-dasharray="4 3"/>')
    cx = (x1 + x2) / 2
    out.append(f'<text x="{cx:.2f}" y="{p.y0 + 20:.2f}" font-size="12" text-anchor="middle" font-weight="bold">{escape(title)}</text>')
    out.append(f'<text x="{cx:.2f}" y="{y1 + 32:.2f}" font-size="11" text-anchor="middle">{escape(xlabel)}</text>')
    ym = (y1 + y2) / 2
    out.append(
        f'<text x="{p.x0 + 14:.2f}" y="{ym:.2f}" font-size="11" text-anchor="middle" '
        f'transform="rotate(-90 {p.x0 + 14:.2f} {ym:.2f})">{escape(ylabel)}</text>'
    )
    return out


def _polyline(p: _Panel, x, y, color, dash=None, width=1.6) -> str:
    pts = " ".join(f"{a:.2f},{b:.2f}" for a, b in zip(p.sx(x), p.sy(y)))
    d = f' stroke-dasharray="{dash}"' if dash else ""
    return f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="{width}"{d}/>'


def _band(p: _Panel, x, lo, hi, color) -> str:
    xs = np.concatenate([x, x[::-1]])
    ys = np.concatenate([hi, lo[::-1]])
    pts = " ".join(f"{a:.2f},{b:.2f}" for a, b in zip(p.sx(xs), p.sy(ys)))
    return f'<polygon points="{pts}" fill="{color}" fill-opacity="0.2" stroke="none"/>'


def _points(p: _Panel, x, y, color, labels) -> list[str]:
    return [
        f'<circle cx="{a:.2f}" cy="{b:.2f}" r="2.2" fill="{color}"><title>{escape(lab)}</title></circle>'
        for a, b, lab in zip(p.sx(x), p.sy(y), labels)
    ]


def _document(width, height, body) -> str:
    return (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif">\n'
        f'<rect width="{width}" height="{height}" fill="white"/>\n' + "\n".join(body) + "\n</svg>\n"
    )


def trajectory_svg(traj, truth=None) -> str:
    """Two panels: association with the outcome level and with its slope.

    ``truth`` optionally holds ``(gamma_I, gamma_S)`` arrays on the same grid.
    """
    body = []
    t = np.asarray(traj.grid)
    for k, (which, title) in enumerate((("I", "Association with initial level"), ("S", "Association with slope"))):
        est = traj.gamma_I if which == "I" else traj.gamma_S
        se = traj.se_I if which == "I" else traj.se_S
        lo = hi = None
        if se is not None:
            lo, hi = traj.bounds(which)
        true = None if truth is None else np.asarray(truth[k])
        p = _Panel(k * PANEL_W, 0, (float(t[0]), float(t[-1])), _limits(est, lo, hi, true, [0.0]))
        body += _axes(p, title, "years before landmark", f"gamma_{which}(t)", hline=0.0)
        if se is not None:
            body.append(_band(p, t, lo, hi, "#1f77b4"))
        if true is not None:
            body.append(_polyline(p, t, true, "#d62728", dash="5 3"))
        body.append(_polyline(p, t, est, "#1f77b4"))
        if se is not None:
            labels = [f"t={ti:g}: estimate {e!r}, se {s!r}, CI [{a!r}, {b!r}]" for ti, e, s, a, b in zip(t, est, se, lo, hi)]
        else:
            labels = [f"t={ti:g}: estimate {e!r}" for ti, e in zip(t, est)]
        body += _points(p, t, est, "#1f77b4", labels)
    return _document(2 * PANEL_W, PANEL_H, body)


def study_svg(summary, level: float = 0.95) -> str:
    """Four panels: per-replicate spread and mean of both curves (top) and
    pointwise CI coverage with binomial Monte-Carlo bands (bottom)."""
    body = []
    t = np.asarray(summary.grid)
    xlim = (float(t[0]), float(t[-1]))
    for k, which in enumerate(("I", "S")):
        est = getattr(summary, f"estimates_{which}")
        truth = getattr(summary, f"truth_{which}")
        q = np.percentile(est, [2.5, 25, 50, 75, 97.5], axis=0)
        p = _Panel(k * PANEL_W, 0, xlim, _limits(q, truth))
        name = "initial level" if which == "I" else "slope"
        body += _axes(p, f"Estimated association with {name}", "years before landmark", f"gamma_{which}(t)", hline=0.0)
        body.append(_band(p, t, q[0], q[4], "#7f7f7f"))
        body.append(_band(p, t, q[1], q[3], "#1f77b4"))
        body.append(_polyline(p, t, truth, "#d62728", dash="5 3"))
        mean = summary.mean(which)
        body.append(_polyline(p, t, mean, "#1f77b4"))
        labels = [
            f"t={ti:g}: truth {tr!r}, mean {m!r}, bias {m - tr!r}, median {md!r}"
            for ti, tr, m, md in zip(t, truth, mean, q[2])
        ]
        body += _points(p, t, mean, "#1f77b4", labels)

        cov = summary.coverage(which)
        mc = summary.coverage_mcse(which)
        pc = _Panel(k * PANEL_W, PANEL_H, xlim, _limits(cov, [level - 0.1, min(1.0, level + 0.05)], pad=0.02))
        body += _axes(pc, f"Coverage, {name}", "years before landmark", "coverage", hline=level)
        body.append(_band(pc, t, cov - 2 * mc, cov + 2 * mc, "#2ca02c"))
        body.append(_polyline(pc, t, cov, "#2ca02c"))
        body += _points(pc, t, cov, "#2ca02c", [f"t={ti:g}: coverage {c!r} (MC se {s!r})" for ti, c, s in zip(t, cov, mc)])
    return _document(2 * PANEL_W, 2 * PANEL_H, body)
