"""Labelled multi-replay attack datasets.

A replay overwrites a target interval of one port-current channel with a copy
of an earlier recording from the same channel: charging data played into an
idle period, or idle data played over a charging period.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from replay_sentinel.evci_sim import IDLE_THRESHOLD_A
from replay_sentinel.series import MultivariateSeries

Interval = tuple[int, int]


@dataclass(frozen=True)
class ReplaySpec:
    channel: str
    source_interval: Interval
    target_interval: Interval

    def __post_init__(self) -> None:
        object.__setattr__(self, "source_interval", tuple(int(v) for v in self.source_interval))
        object.__setattr__(self, "target_interval", tuple(int(v) for v in self.target_interval))

    @property
    def length(self) -> int:
        return self.target_interval[1] - self.target_interval[0]

    def validate(self, T: int) -> None:
        (s0, s1), (t0, t1) = self.source_interval, self.target_interval
        if s1 - s0 != t1 - t0:
            raise ValueError(f"{self.channel}: source and target lengths differ ({s1 - s0} vs {t1 - t0})")
        if s1 <= s0:
            raise ValueError(f"{self.channel}: empty interval")
        for a, b in (self.source_interval, self.target_interval):
            if a < 0 or b > T:
                raise ValueError(f"{self.channel}: interval [{a}, {b}) outside series of length {T}")
        if s0 < t1 and t0 < s1:
            raise ValueError(f"{self.channel}: source and target intervals overlap")

    def to_dict(self) -> dict:
        return {"channel": self.channel, "source_interval": list(self.source_interval),
                "target_interval": list(self.target_interval)}

    @classmethod
    def from_dict(cls, d: dict) -> "ReplaySpec":
        return cls(d["channel"], tuple(d["source_interval"]), tuple(d["target_interval"]))


def plan_to_json(plan: Sequence[ReplaySpec]) -> str:
    return json.dumps([s.to_dict() for s in plan], indent=1) + "\n"


def plan_from_json(text: str) -> list[ReplaySpec]:
    return [ReplaySpec.from_dict(d) for d in json.loads(text)]


@dataclass
class LabeledDataset:
    series: MultivariateSeries
    labels: np.ndarray
    attacks: list[ReplaySpec] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.shape != (len(self.series),):
            raise ValueError("label sequence must have one entry per sample")


def find_segments(series: MultivariateSeries, channel: str, kind: str = "charging",
                  min_len: int = 1, threshold: float = IDLE_THRESHOLD_A) -> list[Interval]:
    """Maximal runs where the channel is above (charging) or at/below (idle) the threshold."""
    if kind not in ("charging", "idle"):
        raise ValueError(f"kind must be 'charging' or 'idle', got {kind!r}")
    x = series.channel(channel)
    on = x > threshold if kind == "charging" else x <= threshold
    edges = np.diff(np.concatenate([[0], on.astype(np.int8), [0]]))
    starts = np.flatnonzero(edges == 1)
    stops = np.flatnonzero(edges == -1)
    return [(int(a), int(b)) for a, b in zip(starts, stops) if b - a >= min_len]


def inject_replays(series: MultivariateSeries, specs: Sequence[ReplaySpec]) -> LabeledDataset:
    """Apply every replay to a copy of ``series``; sources are read from the benign input."""
    T = len(series)
    by_channel: dict[str, list[Interval]] = {}
    for spec in specs:
        series.index(spec.channel)
        spec.validate(T)
        for a, b in by_channel.get(spec.channel, []):
            t0, t1 = spec.target_interval
            if t0 < b and a < t1:
                raise ValueError(f"{spec.channel}: target intervals overlap")
        by_channel.setdefault(spec.channel, []).append(spec.target_interval)

    out = series.copy()
    labels = np.zeros(T, dtype=np.int64)
    for spec in specs:
        j = series.index(spec.channel)
        (s0, s1), (t0, t1) = spec.source_interval, spec.target_interval
        out.data[t0:t1, j] = series.data[s0:s1, j]
        labels[t0:t1] = 1
    return LabeledDataset(out, labels, list(specs))


def _overlaps(iv: Interval, others: Sequence[Interval], margin: int = 0) -> bool:
    return any(iv[0] < b + margin and a - margin < iv[1] for a, b in others)


def random_attack_plan(series: MultivariateSeries, n_attacks: int, rng_seed=None, *,
                       channels: Sequence[str] | None = None,
                       length_range: tuple[int, int] = (150, 250),
                       region: Interval | None = None,
                       first_target_region: Interval | None = None,
                       spacing: int | None = None,
                       threshold: float = IDLE_THRESHOLD_A) -> list[ReplaySpec]:
    """Draw ``n_attacks`` replays, alternating charging->idle and idle->charging.

    Targets lie inside ``region`` (default: the whole series). With ``spacing``
    unset, targets on different channels may overlap in time (simultaneous
    multi-port replay); an integer ``spacing`` keeps every pair of targets at
    least that many samples apart.
    ``first_target_region`` replaces ``region`` for the first attack.
    Sources may come from anywhere in the series. Raises ``ValueError`` naming
    the deficit when the series cannot host the plan.
    """
    if n_attacks <= 0:
        return []
    rng = np.random.default_rng(rng_seed)
    T = len(series)
    channels = list(channels) if channels is not None else [
        c for c in series.channel_names if c.startswith("I_CB")]
    if not channels:
        raise ValueError("no port-current channels available for replay")
    lo_len, hi_len = length_range
    region = region or (0, T)
    segs = {c: {k: find_segments(series, c, k, lo_len, threshold) for k in ("charging", "idle")}
            for c in channels}

    plan: list[ReplaySpec] = []
    taken: list[tuple[str, Interval]] = []
    for i in range(n_attacks):
        # even: charging data replayed into idle time; odd: idle data over charging time
        src_kind, tgt_kind = ("charging", "idle") if i % 2 == 0 else ("idle", "charging")
        allowed = first_target_region if (i == 0 and first_target_region) else region
        length = int(rng.integers(lo_len, hi_len + 1))
        options = []
        for c in channels:
            for a, b in segs[c][tgt_kind]:
                a, b = max(a, allowed[0]), min(b, allowed[1])
                if b - a < length:
                    continue
                sources = [(sa, sb) for sa, sb in segs[c][src_kind] if sb - sa >= length]
                if sources:
                    options.append((c, a, b, sources))
        rng.shuffle(options)
        spec = None
        for c, a, b, sources in options:
            starts = np.arange(a, b - length + 1)
            blockers = [iv for ch, iv in taken if spacing is not None or ch == c]
            starts = [s for s in starts if not _overlaps((s, s + length), blockers, spacing or 0)]
            if not starts:
                continue
            t0 = int(starts[int(rng.integers(len(starts)))])
            target = (t0, t0 + length)
            cand = []
            for sa, sb in sources:
                for s in (sa, sb - length):
                    if not _overlaps((s, s + length), [target]):
                        cand.append(s)
            if not cand:
                continue
            s0 = int(cand[int(rng.integers(len(cand)))])
            spec = ReplaySpec(c, (s0, s0 + length), target)
            break
        if spec is None:
            raise ValueError(
                f"could only place {len(plan)} of {n_attacks} attacks: no {tgt_kind} segment of "
                f"length >= {length} with a matching {src_kind} source is left")
        spec.validate(T)
        plan.append(spec)
        taken.append((spec.channel, spec.target_interval))
    return plan
