"""Reconstruction-error scoring: sliding windows, Gaussian fit, Mahalanobis
score, prefix-calibrated threshold, flags and confusion metrics."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from replay_sentinel.errors import NumericalError
from replay_sentinel.replay_attack import LabeledDataset
from replay_sentinel.series import MultivariateSeries
from replay_sentinel.tcn_ae import TcnAeModel, reconstruct

STD_EPS = 1e-12
CHUNK = 2048


class StageError(Exception):
    """Wraps a failure inside :func:`detect` with the name of the failing stage."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause


# -- scaling -------------------------------------------------------------------

@dataclass
class ScalerParams:
    mean: np.ndarray
    std: np.ndarray
    channel_names: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"channel_names": list(self.channel_names), "mean": self.mean.tolist(),
                "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "ScalerParams":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64),
                   list(d.get("channel_names", [])))


def fit_scaler(x_train) -> ScalerParams:
    """Per-channel mean and population std; near-constant channels get std 1."""
    names = []
    if isinstance(x_train, MultivariateSeries):
        names = list(x_train.channel_names)
        x_train = x_train.data
    x = np.asarray(x_train, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] == 0:
        raise ValueError("cannot fit a scaler on an empty training split")
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std = np.where(std < STD_EPS, 1.0, std)
    return ScalerParams(mean, std, names)


def apply_scaler(x, p: ScalerParams):
    if isinstance(x, MultivariateSeries):
        if p.channel_names and list(x.channel_names) != p.channel_names:
            raise ValueError("series channels do not match the scaler's channels")
        return MultivariateSeries((x.data - p.mean) / p.std, x.channel_names, x.sample_period)
    return (np.asarray(x, dtype=np.float64) - p.mean) / p.std


def invert_scaler(z, p: ScalerParams) -> np.ndarray:
    return np.asarray(z, dtype=np.float64) * p.std + p.mean


# -- errors and windows ----------------------------------------------------------

def reconstruction_error(x: np.ndarray, x_hat: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {x_hat.shape}")
    return x - x_hat


def sliding_error_windows(error: np.ndarray, l: int) -> np.ndarray:
    """Rows are flattened ``error[i:i+l]`` blocks in time-major order: shape ``(T-l+1, l*d)``.

    The result is a read-only strided view; no data is copied.
    """
    error = np.asarray(error, dtype=np.float64)
    if error.ndim == 1:
        error = error[:, None]
    T, d = error.shape
    if not 1 <= l <= T:
        raise ValueError(f"window length {l} must be in [1, T={T}]")
    error = np.ascontiguousarray(error)
    # strides of a length-1 axis are arbitrary, so derive them from the item size
    item = error.itemsize
    return np.lib.stride_tricks.as_strided(error, shape=(T - l + 1, l * d), strides=(d * item, item),
                                           writeable=False)


@dataclass
class ErrorWindowStats:
    mu: np.ndarray
    cov: np.ndarray  # includes the ridge
    ridge: float
    chol: np.ndarray | None = None  # lower factor; None in diagonal mode
    diag: bool = False

    @property
    def dim(self) -> int:
        return self.mu.shape[0]


def _windows_mean(windows: np.ndarray) -> np.ndarray:
    total = np.zeros(windows.shape[1])
    for i in range(0, windows.shape[0], CHUNK):
        total += windows[i:i + CHUNK].sum(axis=0)
    return total / windows.shape[0]


def estimate_stats(windows: np.ndarray, ridge: float | None = None, diag_cov: bool = False,
                   ridge_scale: float = 1e-3) -> ErrorWindowStats:
    """Mean and unbiased covariance of window rows plus ``ridge * I``.

    The default ridge is ``ridge_scale * trace(cov) / dim``. The Cholesky factor
    is computed once and cached.
    """
    windows = np.asarray(windows)
    n, dim = windows.shape
    if n < 2:
        raise ValueError("need at least two windows to estimate a covariance")
    mu = _windows_mean(windows)
    if diag_cov:
        sq = np.zeros(dim)
        for i in range(0, n, CHUNK):
            c = windows[i:i + CHUNK] - mu
            sq += np.einsum("ij,ij->j", c, c)
        var = sq / (n - 1)
        lam = ridge_scale * var.sum() / dim if ridge is None else float(ridge)
        var = var + lam
        if np.any(var <= 0):
            raise NumericalError(f"non-positive variance after ridge {lam:g}; use a larger ridge")
        return ErrorWindowStats(mu, np.diag(var), lam, None, True)
    cov = np.zeros((dim, dim))
    for i in range(0, n, CHUNK):
        c = windows[i:i + CHUNK] - mu
        cov += c.T @ c
    cov /= n - 1
    cov = 0.5 * (cov + cov.T)
    lam = ridge_scale * np.trace(cov) / dim if ridge is None else float(ridge)
    cov[np.diag_indices(dim)] += lam
    try:
        chol = linalg.cholesky(cov, lower=True)
    except linalg.LinAlgError:
        suggest = max(10 * lam, 1e-8)
        raise NumericalError(
            f"covariance is not positive definite with ridge {lam:g}; try ridge >= {suggest:g}") from None
    return ErrorWindowStats(mu, cov, lam, chol, False)


def mahalanobis_scores(windows: np.ndarray, stats: ErrorWindowStats) -> np.ndarray:
    """Squared Mahalanobis distance of each row, via triangular solves."""
    windows = np.asarray(windows)
    if windows.ndim != 2 or windows.shape[1] != stats.dim:
        raise ValueError(f"windows must have width {stats.dim}, got shape {windows.shape}")
    out = np.empty(windows.shape[0])
    if stats.diag:
        var = np.diag(stats.cov)
        for i in range(0, windows.shape[0], CHUNK):
            c = windows[i:i + CHUNK] - stats.mu
            out[i:i + CHUNK] = np.einsum("ij,ij->i", c, c / var)
        return out
    for i in range(0, windows.shape[0], CHUNK):
        c = windows[i:i + CHUNK] - stats.mu
        z = linalg.solve_triangular(stats.chol, c.T, lower=True, check_finite=False)
        out[i:i + CHUNK] = np.einsum("ij,ij->j", z, z)
    return out


# -- threshold, flags, metrics ------------------------------------------------------

def _f1_counts(tp, fp, fn):
    denom = 2 * tp + fp + fn
    return np.where(denom > 0, 2 * tp / np.maximum(denom, 1), 0.0)


def threshold_candidates(scores: np.ndarray) -> np.ndarray:
    """-inf, midpoints between consecutive sorted unique scores, +inf (ascending)."""
    u = np.unique(np.asarray(scores, dtype=np.float64))
    mids = (u[:-1] + u[1:]) / 2.0
    return np.concatenate([[-np.inf], mids, [np.inf]])


def optimize_threshold(scores_prefix, labels_prefix) -> tuple[float, float]:
    """Threshold maximising F1 of ``score >= M_T`` on the prefix, and that F1.

    Ties go to the largest threshold.
    """
    s = np.asarray(scores_prefix, dtype=np.float64)
    y = np.asarray(labels_prefix).astype(bool)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    if y.all() or not y.any():
        raise ValueError("threshold prefix holds a single class; use a longer prefix so it "
                         "contains both anomalous and benign labels")
    if not np.all(np.isfinite(s)):
        raise NumericalError("non-finite anomaly scores in the threshold prefix")
    u, inv = np.unique(s, return_inverse=True)
    pos = np.bincount(inv, weights=y, minlength=u.size)
    cnt = np.bincount(inv, minlength=u.size)
    # threshold between u[i-1] and u[i] flags every unique value >= u[i]
    tp = np.concatenate([np.cumsum(pos[::-1])[::-1], [0.0]])
    flagged = np.concatenate([np.cumsum(cnt[::-1])[::-1], [0]])
    fp = flagged - tp
    fn = y.sum() - tp
    f1 = _f1_counts(tp, fp, fn)
    cands = threshold_candidates(s)
    best = np.flatnonzero(f1 == f1.max())[-1]
    return float(cands[best]), float(f1[best])


def window_positions(T: int, l: int, alignment: str = "last") -> np.ndarray:
    """Timestep that receives the score of each window ``[i, i+l)``."""
    n = T - l + 1
    if alignment == "last":
        return np.arange(n) + (l - 1)
    if alignment == "center":
        return np.arange(n) + (l - 1) // 2
    raise ValueError(f"unknown alignment {alignment!r}")


def scores_to_timeline(window_scores: np.ndarray, T: int, l: int, alignment: str = "last") -> np.ndarray:
    """Per-timestep scores; positions no window maps to are NaN."""
    out = np.full(T, np.nan)
    out[window_positions(T, l, alignment)] = window_scores
    return out


def flag_anomalies(scores: np.ndarray, M_T: float, l: int, T: int | None = None,
                   alignment: str = "last") -> np.ndarray:
    """Binary flags of length ``T`` from per-window scores.

    With ``last`` alignment window ``i`` lands on timestep ``i + l - 1`` and the
    first ``l - 1`` timesteps stay 0.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if T is None:
        T = scores.shape[0] + l - 1
    flags = np.zeros(T, dtype=np.int64)
    flags[window_positions(T, l, alignment)] = scores >= M_T
    return flags


@dataclass
class Metrics:
    accuracy: float
    precision: float
    recall: float
    f1: float
    TP: int
    FP: int
    TN: int
    FN: int
    degenerate: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"accuracy": self.accuracy, "precision": self.precision, "recall": self.recall,
                "f1": self.f1, "TP": self.TP, "FP": self.FP, "TN": self.TN, "FN": self.FN,
                "degenerate": list(self.degenerate)}


def metrics_from_counts(TP: int, FP: int, TN: int, FN: int) -> Metrics:
    deg = []

    def ratio(num, den, name):
        if den == 0:
            deg.append(name)
            return 0.0
        return num / den

    accuracy = ratio(TP + TN, TP + TN + FP + FN, "accuracy")
    precision = ratio(TP, TP + FP, "precision")
    recall = ratio(TP, TP + FN, "recall")
    f1 = ratio(2 * precision * recall, precision + recall, "f1")
    return Metrics(accuracy, precision, recall, f1, int(TP), int(FP), int(TN), int(FN), deg)


def metrics(flags, labels) -> Metrics:
    a = np.asarray(flags).astype(bool)
    y = np.asarray(labels).astype(bool)
    if a.shape != y.shape:
        raise ValueError(f"flags ({a.shape}) and labels ({y.shape}) differ in length")
    tp = int(np.sum(a & y))
    fp = int(np.sum(a & ~y))
    tn = int(np.sum(~a & ~y))
    fn = int(np.sum(~a & y))
    return metrics_from_counts(tp, fp, tn, fn)


# -- pipeline ----------------------------------------------------------------------

@dataclass
class AnomalyReport:
    scores: np.ndarray  # per timestep, NaN where no window lands
    threshold: float
    flags: np.ndarray
    metrics: Metrics
    prefix_len: int
    window_len: int
    alignment: str
    prefix_f1: float
    prefix_metrics: Metrics | None = None

    def to_dict(self, include_scores: bool = True) -> dict:
        out = {
            "threshold": _json_float(self.threshold),
            "window_len": self.window_len,
            "alignment": self.alignment,
            "prefix_len": self.prefix_len,
            "prefix_f1": self.prefix_f1,
            "length": int(self.flags.shape[0]),
            "flags_rle": run_length_encode(self.flags),
            "confusion": {k: getattr(self.metrics, k) for k in ("TP", "FP", "TN", "FN")},
            "metrics": self.metrics.to_dict(),
        }
        if self.prefix_metrics is not None:
            out["prefix_metrics"] = self.prefix_metrics.to_dict()
        if include_scores:
            out["scores"] = [None if math.isnan(v) else float(v) for v in self.scores]
        return out

    def to_json(self, include_scores: bool = True) -> str:
        return json.dumps(self.to_dict(include_scores), indent=1) + "\n"


def _json_float(x: float):
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return float(x)


def run_length_encode(flags) -> list[list[int]]:
    """``[[value, run_length], ...]``."""
    flags = np.asarray(flags).astype(np.int64)
    if flags.size == 0:
        return []
    edges = np.flatnonzero(np.diff(flags)) + 1
    starts = np.concatenate([[0], edges])
    stops = np.concatenate([edges, [flags.size]])
    return [[int(flags[a]), int(b - a)] for a, b in zip(starts, stops)]


def run_length_decode(rle) -> np.ndarray:
    return np.concatenate([np.full(n, v, dtype=np.int64) for v, n in rle]) if rle else np.zeros(0, np.int64)


def error_windows(model: TcnAeModel, scaler: ScalerParams, series: MultivariateSeries, l: int) -> np.ndarray:
    z = apply_scaler(series, scaler).data
    return sliding_error_windows(reconstruction_error(z, reconstruct(model, z)), l)


def fit_error_stats(model: TcnAeModel, scaler: ScalerParams, train_series: MultivariateSeries, l: int,
                    ridge: float | None = None, diag_cov: bool = False) -> ErrorWindowStats:
    """Gaussian model of reconstruction-error windows on the benign training split."""
    return estimate_stats(error_windows(model, scaler, train_series, l), ridge, diag_cov)


def detect(model: TcnAeModel, scaler: ScalerParams, stats: ErrorWindowStats, labeled: LabeledDataset,
           l: int = 128, prefix_fraction: float = 0.10, alignment: str = "last") -> AnomalyReport:
    """Score ``labeled.series``, calibrate the threshold on the first
    ``floor(prefix_fraction * T)`` samples, flag the whole series and compute
    metrics on the part after the prefix."""
    series = labeled.series
    T = len(series)

    def stage(name, fn, *a, **kw):
        try:
            return fn(*a, **kw)
        except (ValueError, ArithmeticError, KeyError) as exc:
            raise StageError(name, exc) from exc

    z = stage("scale", apply_scaler, series, scaler).data
    x_hat = stage("reconstruct", reconstruct, model, z)
    err = stage("error", reconstruction_error, z, x_hat)
    windows = stage("windows", sliding_error_windows, err, l)
    wscores = stage("score", mahalanobis_scores, windows, stats)
    timeline = scores_to_timeline(wscores, T, l, alignment)

    prefix_len = int(math.floor(prefix_fraction * T))
    pos = window_positions(T, l, alignment)
    in_prefix = pos < prefix_len
    M_T, prefix_f1 = stage("threshold", optimize_threshold, wscores[in_prefix],
                           labeled.labels[pos[in_prefix]])
    flags = flag_anomalies(wscores, M_T, l, T, alignment)
    met = stage("metrics", metrics, flags[prefix_len:], labeled.labels[prefix_len:])
    pre = metrics(flags[:prefix_len], labeled.labels[:prefix_len])
    return AnomalyReport(timeline, M_T, flags, met, prefix_len, l, alignment, prefix_f1, pre)
