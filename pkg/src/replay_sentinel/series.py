"""Named multivariate series and their CSV representation."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np


@dataclass
class MultivariateSeries:
    """``data`` has shape ``(T, d)``; one name per column."""

    data: np.ndarray
    channel_names: list[str]
    sample_period: float = 1.0

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2:
            raise ValueError(f"series data must be 2-D, got shape {self.data.shape}")
        self.channel_names = list(self.channel_names)
        if len(self.channel_names) != self.data.shape[1]:
            raise ValueError("one channel name per column required")
        if len(set(self.channel_names)) != len(self.channel_names):
            raise ValueError("channel names must be unique")

    def __len__(self) -> int:
        return self.data.shape[0]

    @property
    def d(self) -> int:
        return self.data.shape[1]

    def index(self, name: str) -> int:
        try:
            return self.channel_names.index(name)
        except ValueError:
            raise KeyError(f"unknown channel {name!r}") from None

    def channel(self, name: str) -> np.ndarray:
        return self.data[:, self.index(name)]

    def select(self, names: Sequence[str]) -> "MultivariateSeries":
        cols = [self.index(n) for n in names]
        return MultivariateSeries(self.data[:, cols].copy(), list(names), self.sample_period)

    def slice(self, start: int, stop: int) -> "MultivariateSeries":
        return MultivariateSeries(self.data[start:stop].copy(), self.channel_names, self.sample_period)

    def copy(self) -> "MultivariateSeries":
        return MultivariateSeries(self.data.copy(), self.channel_names, self.sample_period)


def format_float(x: float) -> str:
    return f"{x:.9g}"


def series_to_csv(series: MultivariateSeries, extra: dict[str, Iterable] | None = None) -> str:
    """Header of channel names then one row per sample, floats at 9 significant digits.
    ``extra`` columns are appended after the channels (integers are written as such)."""
    extra = extra or {}
    cols = [np.asarray(v) for v in extra.values()]
    for name, c in zip(extra, cols):
        if c.shape != (len(series),):
            raise ValueError(f"extra column {name!r} has length {c.shape}, expected {len(series)}")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(series.channel_names + list(extra))
    for i, row in enumerate(series.data):
        out = [format_float(v) for v in row]
        for c in cols:
            v = c[i]
            out.append(str(int(v)) if np.issubdtype(c.dtype, np.integer) or c.dtype == bool
                       else format_float(float(v)))
        w.writerow(out)
    return buf.getvalue()


def read_csv_columns(text: str) -> tuple[list[str], np.ndarray]:
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise ValueError("CSV is empty") from None
    rows = [r for r in reader if r]
    if not rows:
        raise ValueError("CSV has a header but no rows")
    for n, r in enumerate(rows, start=2):
        if len(r) != len(header):
            raise ValueError(f"CSV line {n} has {len(r)} fields, expected {len(header)}")
    try:
        data = np.array([[float(v) for v in r] for r in rows], dtype=np.float64)
    except ValueError as exc:
        raise ValueError(f"non-numeric CSV cell: {exc}") from None
    return header, data


def series_from_csv(text: str, sample_period: float = 1.0,
                    exclude: Sequence[str] = ()) -> tuple[MultivariateSeries, dict[str, np.ndarray]]:
    """Parse CSV text; columns named in ``exclude`` are returned separately."""
    header, data = read_csv_columns(text)
    keep = [i for i, h in enumerate(header) if h not in exclude]
    extra = {h: data[:, i] for i, h in enumerate(header) if h in exclude}
    return MultivariateSeries(data[:, keep], [header[i] for i in keep], sample_period), extra
