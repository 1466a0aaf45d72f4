"""Command line entry point: ``replay-sentinel <stage> [options]``.

Stages read and write files in one output directory, so they can be run one
at a time or chained with ``pipeline``::

    simulate  -> train.csv, benign.csv
    inject    -> attack_plan.json, labeled.csv
    train     -> model.json, scaler.json
    detect    -> report.json, scores.csv
    evaluate  -> prints metrics of a CSV holding Anomaly and flag columns
    plot      -> plots/currents.svg, plots/loss.svg, plots/scores.svg

Exit codes: 0 success, 1 usage error, 2 data or validation error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
import tempfile

import numpy as np

from replay_sentinel import detector as dt
from replay_sentinel import experiment as ex
from replay_sentinel import plots
from replay_sentinel import replay_attack as ra
from replay_sentinel import tcn_ae as ta
from replay_sentinel.errors import ModelFormatError
from replay_sentinel.series import series_from_csv, series_to_csv

log = logging.getLogger("replay_sentinel")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
THREADS_ENV = "REPLAY_SENTINEL_THREADS"
STAGES = ("simulate", "inject", "train", "detect", "evaluate", "plot", "pipeline")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# -- file helpers -------------------------------------------------------------------

def write_atomic(path: str, payload: bytes | str) -> None:
    """Write to a temporary file in the target directory, then rename over ``path``."""
    if isinstance(payload, str):
        payload = payload.encode("utf-8")
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=directory)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(tmp)
        raise


def _read(path: str, what: str) -> str:
    if not os.path.isfile(path):
        raise FileNotFoundError(f"missing {what}: {path}")
    with open(path, encoding="utf-8") as fh:
        return fh.read()


def _json(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


def _summary(stage: str, **kv) -> None:
    parts = [f"stage={stage}", "status=ok"]
    for k, v in kv.items():
        parts.append(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}")
    print(" ".join(parts), flush=True)


class Paths:
    def __init__(self, out: str):
        self.out = out

    def __getattr__(self, name):
        names = {"train": "train.csv", "benign": "benign.csv", "plan": "attack_plan.json",
                 "labeled": "labeled.csv", "model": "model.json", "scaler": "scaler.json",
                 "report": "report.json", "scores": "scores.csv", "config": "config.json"}
        if name == "plots":
            return os.path.join(self.out, "plots")
        if name not in names:
            raise AttributeError(name)
        return os.path.join(self.out, names[name])


def _load_series(path: str, what: str, cfg: ex.RunConfig, exclude=()):
    return series_from_csv(_read(path, what), cfg.simulation.sample_period, exclude)


def _load_labeled(paths: Paths, cfg: ex.RunConfig) -> ra.LabeledDataset:
    series, extra = _load_series(paths.labeled, "labeled dataset", cfg, exclude=("Anomaly",))
    if "Anomaly" not in extra:
        raise ValueError(f"{paths.labeled} has no Anomaly column")
    plan = ra.plan_from_json(_read(paths.plan, "attack plan")) if os.path.isfile(paths.plan) else []
    return ra.LabeledDataset(series, extra["Anomaly"].astype(np.int64), plan)


# -- stages ---------------------------------------------------------------------------

def stage_simulate(cfg: ex.RunConfig, paths: Paths) -> None:
    train = ex.simulate_series(cfg, "train")
    benign = ex.simulate_series(cfg, "test")
    write_atomic(paths.train, series_to_csv(train))
    write_atomic(paths.benign, series_to_csv(benign))
    _summary("simulate", train=paths.train, benign=paths.benign, train_rows=len(train), rows=len(benign))


def stage_inject(cfg: ex.RunConfig, paths: Paths) -> None:
    benign, _ = _load_series(paths.benign, "benign test series", cfg)
    if cfg.attack.plan_path:
        plan = ra.plan_from_json(_read(cfg.attack.plan_path, "attack plan"))
    else:
        plan = ex.plan_attacks(cfg, benign)
    ds = ra.inject_replays(benign, plan)
    write_atomic(paths.plan, ra.plan_to_json(plan))
    write_atomic(paths.labeled, series_to_csv(ds.series, {"Anomaly": ds.labels}))
    _summary("inject", out=paths.labeled, attacks=len(plan), attacked_fraction=float(ds.labels.mean()))


def stage_train(cfg: ex.RunConfig, paths: Paths) -> None:
    train, _ = _load_series(paths.train, "training series", cfg)
    model, scaler = ex.train_model(cfg, train)
    write_atomic(paths.model, ta.save_model(model))
    write_atomic(paths.scaler, _json(scaler.to_dict()))
    final = model.loss_history[-1][1] if model.loss_history else float("nan")
    _summary("train", out=paths.model, epochs=len(model.loss_history), final_loss=final)


def _load_model(path: str) -> ta.TcnAeModel:
    with open(path, "rb") as fh:
        return ta.load_model(fh.read())


def stage_detect(cfg: ex.RunConfig, paths: Paths, model_path: str | None = None) -> None:
    model_path = model_path or paths.model
    if not os.path.isfile(model_path):
        raise FileNotFoundError(f"missing trained model file: {model_path} (run the train stage first)")
    model = _load_model(model_path)
    scaler = dt.ScalerParams.from_dict(json.loads(_read(paths.scaler, "scaler parameters")))
    train, _ = _load_series(paths.train, "training series", cfg)
    labeled = _load_labeled(paths, cfg)
    report = ex.detect_run(cfg, model, scaler, train, labeled)
    write_atomic(paths.report, report.to_json(cfg.io.include_scores))
    # the labeled input with score and flag appended; timesteps no window reaches keep a NaN score
    write_atomic(paths.scores, series_to_csv(labeled.series, {"Anomaly": labeled.labels,
                                                              "score": report.scores, "flag": report.flags}))
    m = report.metrics
    _summary("detect", out=paths.report, threshold=report.threshold, f1=m.f1, accuracy=m.accuracy,
             precision=m.precision, recall=m.recall)


def stage_evaluate(cfg: ex.RunConfig, paths: Paths, input_path: str | None = None) -> None:
    path = input_path or paths.scores
    series, extra = _load_series(path, "flags CSV", cfg, exclude=("Anomaly", "flag"))
    for col in ("Anomaly", "flag"):
        if col not in extra:
            raise ValueError(f"{path} has no {col!r} column")
        if not np.all(np.isin(extra[col], (0.0, 1.0))):
            raise ValueError(f"column {col!r} in {path} must hold only 0/1")
    m = dt.metrics(extra["flag"], extra["Anomaly"])
    _summary("evaluate", f1=m.f1, accuracy=m.accuracy, precision=m.precision, recall=m.recall,
             TP=m.TP, FP=m.FP, TN=m.TN, FN=m.FN)


def stage_plot(cfg: ex.RunConfig, paths: Paths) -> None:
    labeled = _load_labeled(paths, cfg)
    history = _load_model(paths.model).loss_history if os.path.isfile(paths.model) else []
    report = None
    if os.path.isfile(paths.report):
        doc = json.loads(_read(paths.report, "report"))
        report = _report_from_doc(doc)
    out = plots.emit_plots(labeled, report, history, paths.plots, write_atomic)
    _summary("plot", files=",".join(out))


def _report_from_doc(doc: dict) -> dt.AnomalyReport:
    T = doc["length"]
    scores = doc.get("scores")
    scores = np.array([np.nan if v is None else v for v in scores], float) if scores else np.full(T, np.nan)
    thr = doc["threshold"]
    thr = float(thr)  # float() also parses the "inf" / "-inf" strings
    met = dt.metrics_from_counts(**doc["confusion"])
    pre = doc.get("prefix_metrics")
    pre = dt.metrics_from_counts(*(pre[k] for k in ("TP", "FP", "TN", "FN"))) if pre else None
    return dt.AnomalyReport(scores, thr, dt.run_length_decode(doc["flags_rle"]), met,
                            doc["prefix_len"], doc["window_len"], doc["alignment"], doc["prefix_f1"], pre)


def stage_pipeline(cfg: ex.RunConfig, paths: Paths) -> None:
    write_atomic(paths.config, cfg.to_json())
    stage_simulate(cfg, paths)
    stage_inject(cfg, paths)
    stage_train(cfg, paths)
    stage_detect(cfg, paths)
    stage_plot(cfg, paths)


# -- argument handling ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="run seed (overrides the config)")
    common.add_argument("--out", metavar="DIR", help="output directory (overrides the config)")
    common.add_argument("--epochs", type=int, help="training epochs")
    common.add_argument("--window-len", type=int, help="detector window length l")
    common.add_argument("--n-attacks", type=int, help="number of replay injections")
    common.add_argument("--diag-cov", action="store_true", default=None,
                        help="use a diagonal error covariance")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    parser = _Parser(prog="replay-sentinel", description="Replay-attack detection on charging-station telemetry.")
    sub = parser.add_subparsers(dest="stage", metavar="STAGE", parser_class=_Parser)
    sub.required = True
    for name in STAGES:
        p = sub.add_parser(name, parents=[common], help=f"run the {name} stage")
        if name == "detect":
            p.add_argument("--model", metavar="PATH", help="trained model file (default: OUT/model.json)")
        if name == "evaluate":
            p.add_argument("--input", metavar="PATH", help="CSV with Anomaly and flag columns "
                                                          "(default: OUT/scores.csv)")
    return parser


def load_config(args) -> ex.RunConfig:
    cfg = ex.RunConfig.from_json(_read(args.config, "config file")) if args.config else ex.RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.io.out_dir = args.out
    if args.epochs is not None:
        cfg.model["n_epochs"] = args.epochs
    if args.window_len is not None:
        cfg.detection.window_len = args.window_len
    if args.n_attacks is not None:
        cfg.attack.n_attacks = args.n_attacks
    if args.diag_cov:
        cfg.detection.diag_cov = True
    cfg.validate()
    return cfg


def _thread_limit():
    raw = os.environ.get(THREADS_ENV)
    if not raw:
        return contextlib.nullcontext()
    try:
        n = int(raw)
        if n < 1:
            raise ValueError
    except ValueError:
        raise UsageError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit():
            cfg = load_config(args)
            paths = Paths(cfg.io.out_dir)
            stage = globals()[f"stage_{args.stage}"]
            if args.stage == "detect":
                stage(cfg, paths, args.model)
            elif args.stage == "evaluate":
                stage(cfg, paths, args.input)
            else:
                stage(cfg, paths)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except dt.StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC if isinstance(exc.cause, ArithmeticError) else EXIT_DATA
    except ArithmeticError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ValueError, KeyError, ModelFormatError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
