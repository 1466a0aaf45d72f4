"""Self-contained SVG line plots: port currents with attacked intervals shaded,
training loss per epoch, and the anomaly score trace with threshold and flags.

Output is plain text built from fixed-precision numbers, so identical inputs
give identical bytes.
"""

from __future__ import annotations

import math
import os
from typing import Callable, Sequence

import numpy as np

from replay_sentinel.detector import AnomalyReport
from replay_sentinel.replay_attack import LabeledDataset

WIDTH = 900
PANEL_H = 110
MARGIN_L, MARGIN_R, MARGIN_T, MARGIN_B = 70, 20, 30, 30
MAX_POINTS = 1500


def _f(x: float) -> str:
    return f"{x:.2f}"


def _esc(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def _header(height: float, title: str) -> list[str]:
    return [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{_f(height)}" '
        f'viewBox="0 0 {WIDTH} {_f(height)}" font-family="sans-serif" font-size="11">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{_f(height)}" fill="white"/>',
        f'<text x="{WIDTH / 2:.0f}" y="18" text-anchor="middle" font-size="13">{_esc(title)}</text>',
    ]


def _decimate(y: np.ndarray, max_points: int = MAX_POINTS) -> tuple[np.ndarray, np.ndarray]:
    """Min/max per bucket keeps spikes visible; returns (indices, values)."""
    n = y.shape[0]
    if n <= max_points:
        return np.arange(n), y
    buckets = max_points // 2
    edges = np.linspace(0, n, buckets + 1).astype(int)
    idx = []
    for a, b in zip(edges[:-1], edges[1:]):
        seg = y[a:b]
        lo, hi = a + int(np.argmin(seg)), a + int(np.argmax(seg))
        idx.extend(sorted({lo, hi}))
    idx = np.array(idx)
    return idx, y[idx]


class _Panel:
    def __init__(self, top: float, height: float, x_max: float, y_min: float, y_max: float):
        self.top, self.height = top, height
        self.x_max = max(x_max, 1e-12)
        if not y_max > y_min:
            y_min, y_max = y_min - 1.0, y_max + 1.0
        self.y_min, self.y_max = y_min, y_max
        self.w = WIDTH - MARGIN_L - MARGIN_R

    def x(self, v) -> np.ndarray:
        return MARGIN_L + np.asarray(v, dtype=float) / self.x_max * self.w

    def y(self, v) -> np.ndarray:
        frac = (np.asarray(v, dtype=float) - self.y_min) / (self.y_max - self.y_min)
        return self.top + self.height * (1.0 - frac)

    def frame(self, label: str) -> list[str]:
        return [
            f'<rect class="frame" x="{MARGIN_L}" y="{_f(self.top)}" width="{self.w}" '
            f'height="{_f(self.height)}" fill="none" stroke="#888"/>',
            f'<text x="{MARGIN_L - 6}" y="{_f(self.top + self.height / 2)}" text-anchor="end">{_esc(label)}</text>',
            f'<text x="{MARGIN_L - 6}" y="{_f(self.top + 9)}" text-anchor="end" fill="#666">{self.y_max:.3g}</text>',
            f'<text x="{MARGIN_L - 6}" y="{_f(self.top + self.height)}" text-anchor="end" fill="#666">{self.y_min:.3g}</text>',
        ]

    def polyline(self, xs, ys, cls: str, color: str) -> str:
        pts = " ".join(f"{_f(a)},{_f(b)}" for a, b in zip(self.x(xs), self.y(ys)))
        return f'<polyline class="{cls}" fill="none" stroke="{color}" stroke-width="1" points="{pts}"/>'


def _segments(y: np.ndarray) -> list[tuple[int, int]]:
    """Maximal runs of finite values."""
    ok = np.isfinite(y).astype(np.int8)
    edges = np.diff(np.concatenate([[0], ok, [0]]))
    return list(zip(np.flatnonzero(edges == 1), np.flatnonzero(edges == -1)))


def port_currents_svg(dataset: LabeledDataset, channels: Sequence[str] | None = None) -> str:
    """One panel per port current; each channel's replayed intervals are shaded."""
    s = dataset.series
    channels = list(channels) if channels is not None else [c for c in s.channel_names if c.startswith("I_CB")]
    T = len(s)
    height = MARGIN_T + len(channels) * (PANEL_H + 10) + MARGIN_B
    out = _header(height, "Port currents (shaded: replayed intervals)")
    for k, name in enumerate(channels):
        y = s.channel(name)
        p = _Panel(MARGIN_T + k * (PANEL_H + 10), PANEL_H, T, float(y.min()), float(y.max()))
        for spec in dataset.attacks:
            if spec.channel != name:
                continue
            a, b = spec.target_interval
            x0, x1 = p.x([a, b])
            out.append(f'<rect class="attack" x="{_f(x0)}" y="{_f(p.top)}" width="{_f(x1 - x0)}" '
                       f'height="{_f(p.height)}" fill="#f4a3a3" fill-opacity="0.6"/>')
        out += p.frame(name)
        idx, vals = _decimate(y)
        out.append(p.polyline(idx, vals, "series", "#1f4e9c"))
    out.append("</svg>")
    return "\n".join(out) + "\n"


def loss_curve_svg(loss_history: Sequence[tuple[int, float]]) -> str:
    height = MARGIN_T + 260 + MARGIN_B
    out = _header(height, "Training loss (log-cosh) per epoch")
    if not loss_history:
        out += ['<text x="450" y="150" text-anchor="middle">no training history</text>', "</svg>"]
        return "\n".join(out) + "\n"
    ep = np.array([e for e, _ in loss_history], dtype=float)
    v = np.array([x for _, x in loss_history], dtype=float)
    p = _Panel(MARGIN_T, 260, 1.0, 0.0, float(v.max()) * 1.05)
    xs = (ep - ep.min()) / max(ep.max() - ep.min(), 1.0)
    out += p.frame("loss")
    out.append(p.polyline(xs, v, "loss", "#1f4e9c"))
    for a, b, e in zip(p.x(xs), p.y(v), ep):
        out.append(f'<circle class="epoch" cx="{_f(a)}" cy="{_f(b)}" r="2.5" fill="#1f4e9c"/>')
    out.append(f'<text x="{MARGIN_L}" y="{_f(height - 10)}">epoch {int(ep.min())}</text>')
    out.append(f'<text x="{WIDTH - MARGIN_R}" y="{_f(height - 10)}" text-anchor="end">epoch {int(ep.max())}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def score_trace_svg(report: AnomalyReport, labels: np.ndarray | None = None) -> str:
    """Score vs time, one horizontal line at the threshold (when finite),
    flagged timesteps as ticks below the trace and labelled ones above it."""
    scores = np.asarray(report.scores, dtype=float)
    T = scores.shape[0]
    finite = scores[np.isfinite(scores)]
    lo = float(finite.min()) if finite.size else 0.0
    hi = float(finite.max()) if finite.size else 1.0
    if math.isfinite(report.threshold):
        lo, hi = min(lo, report.threshold), max(hi, report.threshold)
    height = MARGIN_T + 300 + MARGIN_B
    out = _header(height, "Anomaly score (Mahalanobis) with threshold and flags")
    p = _Panel(MARGIN_T + 20, 260, T, lo, hi * 1.02 if hi > 0 else hi + 1.0)
    out += p.frame("score")
    for a, b in _segments(scores):
        idx, vals = _decimate(scores[a:b])
        out.append(p.polyline(idx + a, vals, "score", "#1f4e9c"))
    if math.isfinite(report.threshold):
        yt = float(p.y(report.threshold))
        out.append(f'<line class="threshold" x1="{MARGIN_L}" y1="{_f(yt)}" x2="{WIDTH - MARGIN_R}" '
                   f'y2="{_f(yt)}" stroke="#d62728" stroke-dasharray="6,3"/>')
    rows = [("flag", report.flags, p.top + p.height + 4, "#d62728")]
    if labels is not None:
        rows.append(("label", np.asarray(labels), p.top - 14, "#2ca02c"))
    for cls, seq, y0, color in rows:
        for a, b in _segments(np.where(np.asarray(seq) > 0, 1.0, np.nan)):
            x0, x1 = p.x([a, b])
            out.append(f'<rect class="{cls}" x="{_f(x0)}" y="{_f(y0)}" width="{_f(max(x1 - x0, 0.5))}" '
                       f'height="8" fill="{color}"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_plots(dataset: LabeledDataset, report: AnomalyReport | None,
               loss_history: Sequence[tuple[int, float]], out_dir: str,
               write: Callable[[str, bytes], None]) -> list[str]:
    """Render the three views and hand each to ``write(path, bytes)``; returns the paths."""

    if report is not None and report.flags.shape[0] != len(dataset.series):
        raise ValueError(f"report covers {report.flags.shape[0]} samples but the dataset has "
                         f"{len(dataset.series)}")
    docs = [("currents.svg", port_currents_svg(dataset)), ("loss.svg", loss_curve_svg(loss_history))]
    if report is not None:
        docs.append(("scores.svg", score_trace_svg(report, dataset.labels)))
    paths = []
    for name, text in docs:
        path = os.path.join(out_dir, name)
        write(path, text.encode("utf-8"))
        paths.append(path)
    return paths
