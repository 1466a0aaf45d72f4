"""Behavioural generator of benign charging-station telemetry.

Four charging boards with two ports each, a battery energy storage system
(BESS) and a grid connection. Port currents follow a closed-form CC-CV
profile; the supply side is dispatched per scenario so that the grid and
BESS together deliver exactly the power drawn by the ports.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from replay_sentinel.series import MultivariateSeries

IDLE_THRESHOLD_A = 0.5
CV_SOC = 0.8


class Level(str, enum.Enum):
    LEVEL1 = "Level1"
    LEVEL3 = "Level3"


class Scenario(str, enum.Enum):
    GRID_ONLY = "GridOnly"
    BESS_ONLY = "BessOnly"
    GRID_AND_BESS = "GridAndBess"


MAX_PORT_POWER_W = {Level.LEVEL1: 50e3, Level.LEVEL3: 400e3}


@dataclass(frozen=True)
class PortSpec:
    board: int
    port: str
    level: Level
    ev_battery_voltage: float
    ev_battery_capacity: float  # Ah
    c_rate: float = 1.0

    @property
    def port_id(self) -> str:
        return f"{self.board}{self.port}"

    @property
    def max_port_power(self) -> float:
        return MAX_PORT_POWER_W[Level(self.level)]

    @property
    def max_current(self) -> float:
        return self.max_port_power / self.ev_battery_voltage

    @property
    def cc_current(self) -> float:
        return min(self.c_rate * self.ev_battery_capacity, self.max_current)


def default_port_specs() -> list[PortSpec]:
    """Eight ports: two-wheelers on CB1, Level-1 four-wheelers on CB2/CB3A,
    Level-3 four-wheelers on CB3B/CB4."""
    two_w = dict(level=Level.LEVEL1, ev_battery_voltage=72.0, ev_battery_capacity=45.0, c_rate=1.0)
    l1_4w = dict(level=Level.LEVEL1, ev_battery_voltage=200.0, ev_battery_capacity=90.0, c_rate=0.5)
    l3_4w = dict(level=Level.LEVEL3, ev_battery_voltage=300.0, ev_battery_capacity=100.0, c_rate=2.0)
    return [
        PortSpec(1, "A", **two_w), PortSpec(1, "B", **two_w),
        PortSpec(2, "A", **l1_4w), PortSpec(2, "B", **l1_4w),
        PortSpec(3, "A", **l1_4w), PortSpec(3, "B", **l3_4w),
        PortSpec(4, "A", **l3_4w), PortSpec(4, "B", **l3_4w),
    ]


def channel_names(specs: Sequence[PortSpec]) -> list[str]:
    ids = [s.port_id for s in specs]
    return ([f"I_CB{p}" for p in ids] + [f"V_CB{p}" for p in ids]
            + [f"CS_EV{p}" for p in ids] + ["I_grid", "I_BAT"])


def current_channels(specs: Sequence[PortSpec]) -> list[str]:
    return [f"I_CB{s.port_id}" for s in specs]


def feature_channels(specs: Sequence[PortSpec]) -> list[str]:
    """Default detector inputs: port currents plus grid and BESS current."""
    return current_channels(specs) + ["I_grid", "I_BAT"]


DEFAULT_FEATURES = feature_channels(default_port_specs())


@dataclass(frozen=True)
class ChargingSession:
    port_id: str
    arrival_time: int
    departure_time: int
    arrival_soc: float
    target_soc: float
    c_rate: float

    def __post_init__(self) -> None:
        if not self.arrival_time < self.departure_time:
            raise ValueError("arrival must precede departure")
        if not 0.0 <= self.arrival_soc < self.target_soc <= 1.0:
            raise ValueError("need 0 <= arrival_soc < target_soc <= 1")
        if self.c_rate <= 0:
            raise ValueError("c_rate must be positive")


@dataclass(frozen=True)
class ChargeProfile:
    """Closed-form CC-CV profile in hours since arrival."""

    i_cc: float
    cc_end_h: float
    tau_h: float
    done_h: float

    def current(self, h: np.ndarray | float) -> np.ndarray:
        h = np.asarray(h, dtype=np.float64)
        taper = self.i_cc * np.exp(-(h - self.cc_end_h) / self.tau_h)
        i = np.where(h < self.cc_end_h, self.i_cc, taper)
        return np.where(h < self.done_h, i, 0.0)


def charge_profile(session: ChargingSession, spec: PortSpec) -> ChargeProfile:
    # taper time constant puts a quarter of capacity behind the CV knee, so any
    # target <= 1 is reached in finite time
    i_cc = min(session.c_rate * spec.ev_battery_capacity, spec.max_current)
    c_eff = i_cc / spec.ev_battery_capacity
    tau = 0.25 / c_eff
    soc0, target = session.arrival_soc, session.target_soc
    if target <= CV_SOC:
        cc_end = done = (target - soc0) / c_eff
    else:
        cc_end = max(CV_SOC - soc0, 0.0) / c_eff
        start_soc = max(soc0, CV_SOC)
        done = cc_end - tau * math.log1p(-(target - start_soc) / (c_eff * tau))
    return ChargeProfile(i_cc, cc_end, tau, done)


def session_current(session: ChargingSession, spec: PortSpec, t: int, sample_period_s: float = 1.0) -> float:
    """Charging current (A) of ``session`` at sample index ``t``."""
    if not session.arrival_time <= t < session.departure_time:
        raise ValueError(f"t={t} is outside session [{session.arrival_time}, {session.departure_time})")
    h = (t - session.arrival_time) * sample_period_s / 3600.0
    return float(charge_profile(session, spec).current(h))


def generate_sessions(specs: Sequence[PortSpec], horizon_T: int, mean_sessions_per_port: float,
                      rng_seed=None, sample_period_s: float = 1.0, min_gap: int = 300) -> list[ChargingSession]:
    """Per-port renewal process: exponential idle gap, session, idle gap, ...

    The mean gap is sized so a port sees about ``mean_sessions_per_port``
    sessions over the horizon given its typical session length; consecutive
    sessions on a port are at least ``min_gap`` samples apart. A session
    still running at the horizon is cut there.
    """
    rng = np.random.default_rng(rng_seed)
    sessions: list[ChargingSession] = []
    if horizon_T < 1 or mean_sessions_per_port <= 0:
        return sessions
    to_samples = 3600.0 / sample_period_s
    for spec in specs:
        typical = ChargingSession(spec.port_id, 0, 1, 0.3, 0.9, spec.c_rate)
        typical_len = 0.85 * charge_profile(typical, spec).done_h * to_samples
        mean_gap = max(horizon_T / mean_sessions_per_port - typical_len - min_gap, 1.0)
        t = int(rng.exponential(mean_gap))
        while t < horizon_T:
            s0 = float(rng.uniform(0.1, 0.5))
            tg = float(rng.uniform(0.8, 1.0))
            stay = float(rng.uniform(0.5, 1.2))
            probe = ChargingSession(spec.port_id, t, t + 1, s0, tg, spec.c_rate)
            need = charge_profile(probe, spec).done_h * to_samples
            dep = min(t + max(1, int(round(need * stay))), horizon_T)
            sessions.append(ChargingSession(spec.port_id, t, dep, s0, tg, spec.c_rate))
            t = dep + min_gap + int(rng.exponential(mean_gap))
    return sessions


@dataclass
class SupplyParams:
    v_grid: float = 800.0
    v_bat: float = 600.0
    bess_capacity_wh: float = 500e3
    bess_charge_power_w: float = 20e3
    bess_reserve: float = 0.1
    grid_fraction: float = 0.5
    initial_bess_soc: float = 0.6


@dataclass(frozen=True)
class SupplyDispatch:
    i_grid: float
    i_bat: float  # positive while discharging
    shortfall: bool = False

    def powers(self, p: SupplyParams) -> tuple[float, float]:
        return self.i_grid * p.v_grid, self.i_bat * p.v_bat


def dispatch_supply(total_load_watts: float, scenario: Scenario | str, bess_soc: float,
                    params: SupplyParams | None = None, sample_period_s: float = 1.0) -> SupplyDispatch:
    """Split the station load between grid and BESS for one sample.

    When the BESS cannot cover its share the grid picks it up and ``shortfall`` is set.
    """
    p = params or SupplyParams()
    if total_load_watts < 0:
        raise ValueError("load must be non-negative")
    scenario = Scenario(scenario)
    hours = sample_period_s / 3600.0
    available_w = max(bess_soc - p.bess_reserve, 0.0) * p.bess_capacity_wh / hours
    if scenario is Scenario.GRID_ONLY:
        room_w = max(1.0 - bess_soc, 0.0) * p.bess_capacity_wh / hours
        p_bat = -min(p.bess_charge_power_w, room_w)
        p_grid = total_load_watts - p_bat
        shortfall = False
    else:
        share = 1.0 if scenario is Scenario.BESS_ONLY else 1.0 - p.grid_fraction
        p_bat = share * total_load_watts
        shortfall = p_bat > available_w
        if shortfall:
            p_bat = 0.0
        p_grid = total_load_watts - p_bat
    return SupplyDispatch(p_grid / p.v_grid, p_bat / p.v_bat, shortfall)


@dataclass
class ScenarioPlan:
    segments: list[tuple[int, Scenario]]

    def __post_init__(self) -> None:
        self.segments = [(int(s), Scenario(sc)) for s, sc in self.segments]
        if not self.segments or self.segments[0][0] != 0:
            raise ValueError("scenario plan must start at index 0")
        starts = [s for s, _ in self.segments]
        if any(b <= a for a, b in zip(starts, starts[1:])):
            raise ValueError("scenario segment starts must be strictly increasing")

    @classmethod
    def cycling(cls, horizon_T: int, block: int,
                order: Sequence[Scenario] = (Scenario.GRID_ONLY, Scenario.GRID_AND_BESS,
                                             Scenario.BESS_ONLY)) -> "ScenarioPlan":
        return cls([(s, order[i % len(order)]) for i, s in enumerate(range(0, max(horizon_T, 1), block))])

    def per_sample(self, horizon_T: int) -> list[Scenario]:
        out: list[Scenario] = []
        bounds = [s for s, _ in self.segments[1:]] + [horizon_T]
        for (start, sc), end in zip(self.segments, bounds):
            out.extend([sc] * max(0, min(end, horizon_T) - start))
        return out[:horizon_T]

    def to_json(self) -> list:
        return [[s, sc.value] for s, sc in self.segments]


@dataclass
class SimulationState:
    bess_soc: np.ndarray
    shortfall: np.ndarray
    scenario: list[Scenario] = field(default_factory=list)


def simulate_with_state(specs: Sequence[PortSpec], schedule: Sequence[ChargingSession], plan: ScenarioPlan,
                        horizon_T: int, sample_period_s: float = 1.0, rng_seed=None, noise: bool = True,
                        supply: SupplyParams | None = None, noise_fraction: float = 0.005):
    supply = supply or SupplyParams()
    ids = [s.port_id for s in specs]
    by_id = {s.port_id: s for s in specs}
    n = len(specs)
    current = np.zeros((horizon_T, n))
    voltage = np.zeros((horizon_T, n))
    for sess in schedule:
        if sess.port_id not in by_id:
            raise ValueError(f"session references unknown port {sess.port_id!r}")
        spec = by_id[sess.port_id]
        j = ids.index(sess.port_id)
        a, b = sess.arrival_time, min(sess.departure_time, horizon_T)
        if a >= horizon_T:
            continue
        h = (np.arange(a, b) - a) * sample_period_s / 3600.0
        current[a:b, j] = charge_profile(sess, spec).current(h)
        voltage[a:b, j] = spec.ev_battery_voltage
    if noise:
        rng = np.random.default_rng(rng_seed)
        sigma = noise_fraction * np.array([s.cc_current for s in specs])
        jitter = rng.normal(size=current.shape) * sigma
        conducting = current > 0
        caps = np.array([s.max_current for s in specs])
        current = np.where(conducting, np.clip(current + jitter, 0.0, caps), 0.0)
    cs = (current > IDLE_THRESHOLD_A).astype(np.float64)
    load = current * voltage
    total = load.sum(axis=1)

    scen = plan.per_sample(horizon_T)
    i_grid = np.zeros(horizon_T)
    i_bat = np.zeros(horizon_T)
    soc = np.zeros(horizon_T)
    shortfall = np.zeros(horizon_T, dtype=bool)
    bess = supply.initial_bess_soc
    hours = sample_period_s / 3600.0
    for t in range(horizon_T):
        disp = dispatch_supply(float(total[t]), scen[t], bess, supply, sample_period_s)
        i_grid[t], i_bat[t], shortfall[t] = disp.i_grid, disp.i_bat, disp.shortfall
        bess = min(max(bess - disp.i_bat * supply.v_bat * hours / supply.bess_capacity_wh, 0.0), 1.0)
        soc[t] = bess
    data = np.column_stack([current, voltage, cs, i_grid, i_bat])
    series = MultivariateSeries(data, channel_names(specs), sample_period_s)
    return series, SimulationState(soc, shortfall, scen)


def simulate(specs: Sequence[PortSpec], schedule: Sequence[ChargingSession], plan: ScenarioPlan,
             horizon_T: int, sample_period_s: float = 1.0, rng_seed=None, noise: bool = True,
             supply: SupplyParams | None = None) -> MultivariateSeries:
    """Telemetry with channels ``I_CB*`` (8), ``V_CB*`` (8), ``CS_EV*`` (8), ``I_grid``, ``I_BAT``.

    Measurement noise (sigma = 0.5% of the port's CC current) is applied to
    conducting port currents; the supply side is dispatched from those
    currents, so power balance holds in both modes.
    """
    return simulate_with_state(specs, schedule, plan, horizon_T, sample_period_s, rng_seed, noise, supply)[0]


def power_imbalance(series: MultivariateSeries, specs: Sequence[PortSpec],
                    supply: SupplyParams | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Per-frame ``(|P_grid + P_bat - sum P_port|, sum P_port)``."""
    supply = supply or SupplyParams()
    ids = [s.port_id for s in specs]
    ports = sum(series.channel(f"V_CB{p}") * series.channel(f"I_CB{p}") for p in ids)
    supplied = supply.v_grid * series.channel("I_grid") + supply.v_bat * series.channel("I_BAT")
    return np.abs(supplied - ports), ports
