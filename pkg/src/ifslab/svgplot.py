"""Minimal hand-rolled SVG scatter/line plots (no plotting dependency).

Plots are pure views: they never transform the data they are given beyond
axis scaling, and the emitted SVG is deterministic for identical inputs.
"""
from __future__ import annotations

import math

import numpy as np

_W, _H = 640, 480
_ML, _MR, _MT, _MB = 64, 20, 34, 46
_COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]


def _nice_ticks(lo: float, hi: float, target: int = 6) -> list[float]:
    if not math.isfinite(lo) or not math.isfinite(hi):
        return [0.0, 1.0]
    if hi <= lo:
        hi = lo + 1.0
    raw = (hi - lo) / target
    mag = 10.0 ** math.floor(math.log10(raw))
    for mult in (1.0, 2.0, 5.0, 10.0):
        step = mult * mag
        if (hi - lo) / step <= target:
            break
    first = math.ceil(lo / step) * step
    ticks = []
    t = first
    while t <= hi + 1e-12 * step:
        ticks.append(0.0 if abs(t) < 1e-12 * step else t)
        t += step
    return ticks


def _fmt(v: float) -> str:
    return f"{v:.6g}"


class _Frame:
    def __init__(self, xlo, xhi, ylo, yhi, logy=False):
        self.logy = logy
        if logy:
            ylo, yhi = math.log10(ylo), math.log10(yhi)
        pad_x = 0.05 * (xhi - xlo or 1.0)
        pad_y = 0.05 * (yhi - ylo or 1.0)
        self.xlo, self.xhi = xlo - pad_x, xhi + pad_x
        self.ylo, self.yhi = ylo - pad_y, yhi + pad_y

    def x(self, v: float) -> float:
        return _ML + (v - self.xlo) / (self.xhi - self.xlo) * (_W - _ML - _MR)

    def y(self, v: float) -> float:
        if self.logy:
            v = math.log10(max(v, 1e-300))
        return _H - _MB - (v - self.ylo) / (self.yhi - self.ylo) * (_H - _MT - _MB)


def _axes(frame: _Frame, title: str, xlabel: str, ylabel: str) -> list[str]:
    out = [f'<rect x="{_ML}" y="{_MT}" width="{_W-_ML-_MR}" height="{_H-_MT-_MB}" '
           'fill="none" stroke="#333" stroke-width="1"/>']
    for t in _nice_ticks(frame.xlo, frame.xhi):
        px = frame.x(t)
        out.append(f'<line x1="{px:.1f}" y1="{_H-_MB}" x2="{px:.1f}" y2="{_H-_MB+4}" stroke="#333"/>')
        out.append(f'<text x="{px:.1f}" y="{_H-_MB+17}" font-size="11" text-anchor="middle">{_fmt(t)}</text>')
    lo, hi = (frame.ylo, frame.yhi)
    for t in _nice_ticks(lo, hi):
        disp = 10.0 ** t if frame.logy else t
        py = _H - _MB - (t - frame.ylo) / (frame.yhi - frame.ylo) * (_H - _MT - _MB)
        out.append(f'<line x1="{_ML-4}" y1="{py:.1f}" x2="{_ML}" y2="{py:.1f}" stroke="#333"/>')
        out.append(f'<text x="{_ML-7}" y="{py+4:.1f}" font-size="11" text-anchor="end">{_fmt(disp)}</text>')
    if title:
        out.append(f'<text x="{_W/2}" y="20" font-size="14" text-anchor="middle">{title}</text>')
    if xlabel:
        out.append(f'<text x="{_W/2}" y="{_H-8}" font-size="12" text-anchor="middle">{xlabel}</text>')
    if ylabel:
        out.append(f'<text x="14" y="{_H/2}" font-size="12" text-anchor="middle" '
                   f'transform="rotate(-90 14 {_H/2})">{ylabel}</text>')
    return out


def _document(body: list[str]) -> str:
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
            f'viewBox="0 0 {_W} {_H}">\n<rect width="{_W}" height="{_H}" fill="white"/>\n')
    return head + "\n".join(body) + "\n</svg>\n"


def line_plot(path, series, title="", xlabel="", ylabel="", logy=False) -> None:
    """series: iterable of (xs, ys, label) triples."""
    series = [(np.asarray(x, float), np.asarray(y, float), lab) for x, y, lab in series]
    xs = np.concatenate([s[0] for s in series])
    ys = np.concatenate([s[1] for s in series])
    if logy:
        ys = ys[ys > 0]
        ylo, yhi = (float(ys.min()), float(ys.max())) if ys.size else (0.1, 1.0)
    else:
        ylo, yhi = float(ys.min()), float(ys.max())
    frame = _Frame(float(xs.min()), float(xs.max()), ylo, yhi, logy=logy)
    body = _axes(frame, title, xlabel, ylabel)
    for k, (x, y, label) in enumerate(series):
        color = _COLORS[k % len(_COLORS)]
        pts = " ".join(f"{frame.x(a):.2f},{frame.y(b):.2f}" for a, b in zip(x, y)
                       if not logy or b > 0)
        body.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        if label:
            ly = _MT + 16 + 15 * k
            body.append(f'<line x1="{_W-_MR-120}" y1="{ly-4}" x2="{_W-_MR-98}" y2="{ly-4}" '
                        f'stroke="{color}" stroke-width="2"/>')
            body.append(f'<text x="{_W-_MR-92}" y="{ly}" font-size="11">{label}</text>')
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(_document(body))


def scatter_plot(path, clouds, title="", xlabel="", ylabel="", max_points=6000) -> None:
    """clouds: iterable of (points (n,2), label) pairs."""
    clouds = [(np.atleast_2d(np.asarray(p, float)), lab) for p, lab in clouds]
    allpts = np.concatenate([c[0] for c in clouds])
    frame = _Frame(float(allpts[:, 0].min()), float(allpts[:, 0].max()),
                   float(allpts[:, 1].min()), float(allpts[:, 1].max()))
    body = _axes(frame, title, xlabel, ylabel)
    for k, (pts, label) in enumerate(clouds):
        color = _COLORS[k % len(_COLORS)]
        if pts.shape[0] > max_points:
            step = pts.shape[0] // max_points + 1
            pts = pts[::step]
        circles = "".join(f'<circle cx="{frame.x(px):.2f}" cy="{frame.y(py):.2f}" r="1.6" '
                          f'fill="{color}" fill-opacity="0.55"/>' for px, py in pts)
        body.append(circles)
        if label:
            ly = _MT + 16 + 15 * k
            body.append(f'<circle cx="{_W-_MR-110}" cy="{ly-4}" r="3" fill="{color}"/>')
            body.append(f'<text x="{_W-_MR-100}" y="{ly}" font-size="11">{label}</text>')
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(_document(body))
