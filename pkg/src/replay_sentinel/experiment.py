"""Run configuration and the end-to-end experiment: simulate a benign training
series and a test series, inject replays into the test series, train the
autoencoder on the training series and score the test series."""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from replay_sentinel import detector as dt
from replay_sentinel import evci_sim as ev
from replay_sentinel import replay_attack as ra
from replay_sentinel import tcn_ae as ta
from replay_sentinel.series import MultivariateSeries

log = logging.getLogger(__name__)

# independent random streams derived from the run seed
STREAM_TRAIN, STREAM_TEST, STREAM_ATTACK = 1, 2, 3


def _strict(cls, data: dict, section: str):
    if not isinstance(data, dict):
        raise ValueError(f"config section {section!r} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ValueError(f"unknown keys in config section {section!r}: {unknown}")
    return cls(**data)


@dataclass
class SimulationConfig:
    horizon: int = 20_000
    train_horizon: int = 20_000
    sample_period: float = 1.0
    sessions_per_port: float = 8.0
    scenario_block: int = 2500
    noise: bool = True

    def validate(self) -> None:
        if self.horizon < 1 or self.train_horizon < 1:
            raise ValueError("horizons must be >= 1")
        if self.sample_period <= 0:
            raise ValueError("sample_period must be positive")
        if self.sessions_per_port < 0:
            raise ValueError("sessions_per_port must be >= 0")
        if self.scenario_block < 1:
            raise ValueError("scenario_block must be >= 1")


@dataclass
class AttackConfig:
    n_attacks: int = 4
    min_length: int = 150
    max_length: int = 250
    # place the first replay inside the threshold prefix so calibration sees both classes
    first_in_prefix: bool = True
    plan_path: str | None = None

    def validate(self) -> None:
        if self.n_attacks < 0:
            raise ValueError("n_attacks must be >= 0")
        if not 1 <= self.min_length <= self.max_length:
            raise ValueError("need 1 <= min_length <= max_length")


@dataclass
class DetectionConfig:
    window_len: int = 128
    prefix_fraction: float = 0.10
    ridge: float | None = None
    ridge_scale: float = 1e-3
    diag_cov: bool = False
    alignment: str = "center"

    def validate(self) -> None:
        if self.window_len < 1:
            raise ValueError("window_len must be >= 1")
        if not 0.0 < self.prefix_fraction < 1.0:
            raise ValueError("prefix_fraction must be in (0, 1)")
        if self.ridge is not None and self.ridge < 0:
            raise ValueError("ridge must be non-negative")
        if self.alignment not in ("last", "center"):
            raise ValueError("alignment must be 'last' or 'center'")


@dataclass
class IoConfig:
    out_dir: str = "run"
    include_scores: bool = True


def _default_model() -> dict:
    cfg = ta.TcnAeConfig(d=len(ev.DEFAULT_FEATURES)).to_dict()
    cfg.pop("seed")
    return cfg


@dataclass
class RunConfig:
    seed: int = 0
    simulation: SimulationConfig = field(default_factory=SimulationConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    model: dict = field(default_factory=_default_model)
    detection: DetectionConfig = field(default_factory=DetectionConfig)
    io: IoConfig = field(default_factory=IoConfig)

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        self.simulation.validate()
        self.attack.validate()
        self.detection.validate()
        self.model_config()

    def model_config(self) -> ta.TcnAeConfig:
        """Model hyperparameters; the run seed doubles as the model seed."""
        if "seed" in self.model:
            raise ValueError("the model seed is the run seed; set the top-level 'seed' instead")
        return ta.TcnAeConfig.from_dict({**_default_model(), **self.model, "seed": self.seed})

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "simulation": asdict(self.simulation),
            "attack": asdict(self.attack),
            "model": {**_default_model(), **copy.deepcopy(self.model)},
            "detection": asdict(self.detection),
            "io": asdict(self.io),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        if not isinstance(data, dict):
            raise ValueError("config must be a JSON object")
        sections = {"simulation": SimulationConfig, "attack": AttackConfig,
                    "detection": DetectionConfig, "io": IoConfig}
        unknown = sorted(set(data) - set(sections) - {"seed", "model"})
        if unknown:
            raise ValueError(f"unknown top-level config keys: {unknown}")
        kw = {name: _strict(kind, data.get(name, {}), name) for name, kind in sections.items()}
        model = data.get("model", {})
        if not isinstance(model, dict):
            raise ValueError("config section 'model' must be an object")
        seed = data.get("seed", 0)
        if isinstance(seed, bool) or not isinstance(seed, int):
            raise ValueError("seed must be an integer")
        return cls(seed=seed, model=dict(model), **kw)

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ValueError(f"config is not valid JSON: {exc}") from None
        return cls.from_dict(data)


# -- stages ----------------------------------------------------------------------

def quantize(series: MultivariateSeries) -> MultivariateSeries:
    """Round to the 9 significant digits used by the CSV files, so in-memory and
    file-chained runs see identical numbers."""
    q = np.array([float(f"{v:.9g}") for v in series.data.ravel()]).reshape(series.data.shape)
    return MultivariateSeries(q, series.channel_names, series.sample_period)


def simulate_series(cfg: RunConfig, which: str) -> MultivariateSeries:
    """Benign telemetry (all channels) for the ``train`` or ``test`` stream."""
    sim = cfg.simulation
    stream, T = {"train": (STREAM_TRAIN, sim.train_horizon), "test": (STREAM_TEST, sim.horizon)}[which]
    seed = [cfg.seed, stream]
    specs = ev.default_port_specs()
    sched = ev.generate_sessions(specs, T, sim.sessions_per_port, seed, sim.sample_period)
    plan = ev.ScenarioPlan.cycling(T, sim.scenario_block)
    series = ev.simulate(specs, sched, plan, T, sim.sample_period, seed, noise=sim.noise)
    return quantize(series)


def prefix_length(cfg: RunConfig, T: int) -> int:
    return int(math.floor(cfg.detection.prefix_fraction * T))


def plan_attacks(cfg: RunConfig, benign: MultivariateSeries) -> list[ra.ReplaySpec]:
    a = cfg.attack
    first = (0, prefix_length(cfg, len(benign))) if a.first_in_prefix else None
    return ra.random_attack_plan(benign, a.n_attacks, [cfg.seed, STREAM_ATTACK],
                                 channels=ev.current_channels(ev.default_port_specs()),
                                 length_range=(a.min_length, a.max_length),
                                 first_target_region=first)


def features(series: MultivariateSeries) -> MultivariateSeries:
    return series.select(ev.DEFAULT_FEATURES)


def train_model(cfg: RunConfig, train_series: MultivariateSeries, progress=None):
    """Fit the scaler on the benign training features and train a fresh model."""
    x = features(train_series)
    scaler = dt.fit_scaler(x)
    model = ta.build_model(cfg.model_config())
    model = ta.train(model, dt.apply_scaler(x, scaler).data, progress)
    return model, scaler


def detect_run(cfg: RunConfig, model: ta.TcnAeModel, scaler: dt.ScalerParams,
               train_series: MultivariateSeries, labeled: ra.LabeledDataset) -> dt.AnomalyReport:
    d = cfg.detection
    train_x = features(train_series)
    windows = dt.error_windows(model, scaler, train_x, d.window_len)
    stats = dt.estimate_stats(windows, d.ridge, d.diag_cov, d.ridge_scale)
    test = ra.LabeledDataset(features(labeled.series), labeled.labels, labeled.attacks)
    return dt.detect(model, scaler, stats, test, d.window_len, d.prefix_fraction, d.alignment)


@dataclass
class ExperimentResult:
    config: RunConfig
    train_series: MultivariateSeries
    labeled: ra.LabeledDataset
    model: ta.TcnAeModel
    scaler: dt.ScalerParams
    report: dt.AnomalyReport


def run_experiment(cfg: RunConfig, progress=None) -> ExperimentResult:
    """All stages in memory; numerically identical to the file-chained pipeline."""
    train_series = simulate_series(cfg, "train")
    benign = simulate_series(cfg, "test")
    labeled = ra.inject_replays(benign, plan_attacks(cfg, benign))
    model, scaler = train_model(cfg, train_series, progress)
    report = detect_run(cfg, model, scaler, train_series, labeled)
    log.info("seed %d: f1 %.4f accuracy %.4f", cfg.seed, report.metrics.f1, report.metrics.accuracy)
    return ExperimentResult(cfg, train_series, labeled, model, scaler, report)
