"""Command-line entry point: synth, train, evaluate, compare, grad-check.

Exit status: 0 success, 2 configuration error, 3 data error, 4 numeric
failure (non-finite loss or a failed gradient check).
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from dataclasses import dataclass
from datetime import date
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .data import (
    DataError,
    SyntheticBasinSpec,
    generate_synthetic_basin,
    load_gauge_series,
    load_grid_series,
    save_gauge_series,
    save_grid_series,
)
from .metrics import BasinResult, DegenerateSeriesError, KgeComponents, compare_report, kge
from .model import CNN_LSTM, LSTM, MODEL_KINDS, CnnLstmConfig, LstmBaselineConfig, build_model, graph
from .training import (
    Evaluation,
    NumericError,
    TrainConfig,
    default_model_config,
    evaluate,
    mse_loss,
    prepare_dataset,
    train,
)

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

PRECIP_FILE = "precip.grid"
TEMP_FILE = "temp.grid"
GAUGE_FILE = "gauge.csv"
CHECKPOINT_FILE = "model.ckpt"
HISTORY_FILE = "history.csv"
KGE_FILE = "test_kge.csv"
PREDICTIONS_FILE = "predictions.csv"

log = logging.getLogger("flowcast")


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration files


@dataclass(frozen=True)
class RunConfig:
    model: str
    precip: str
    temp: str
    gauge: str
    basin_id: str = "basin"
    lookback: int = 182
    epochs: int = 100
    batch_size: int = 50
    val_frac: float = 0.3
    train_frac: float = 0.7
    clip_max_norm: float = 1.0
    learning_rate: float = 1e-3
    seed: int = 0
    output_dir: str = "run"
    lstm_hidden: int = 80
    dropout: float = 0.3

    def __post_init__(self):
        if self.model not in MODEL_KINDS:
            raise ConfigError(f"model must be one of {', '.join(MODEL_KINDS)}, got {self.model!r}")
        if self.lookback < 1:
            raise ConfigError(f"lookback must be at least 1, got {self.lookback}")
        if self.lstm_hidden < 1:
            raise ConfigError("lstm_hidden must be at least 1")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must lie in [0, 1)")
        try:
            self.train_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def train_config(self) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size, val_frac=self.val_frac,
                           train_frac=self.train_frac, clip_max_norm=self.clip_max_norm,
                           learning_rate=self.learning_rate, seed=self.seed)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _read_json(path: Path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            obj = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(obj, dict):
        raise ConfigError(f"{path}: expected a JSON object of key/value pairs")
    return obj


def _build(cls, values: dict, source):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - names)
    if unknown:
        raise ConfigError(f"{source}: unknown key(s) {', '.join(unknown)}")
    try:
        return cls(**values)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{source}: {exc}") from None


def load_run_config(path) -> RunConfig:
    path = Path(path)
    return _build(RunConfig, _read_json(path), path)


def load_synth_spec(path) -> SyntheticBasinSpec:
    path = Path(path)
    values = _read_json(path)
    if "start_date" in values:
        try:
            values["start_date"] = date.fromisoformat(values["start_date"])
        except (TypeError, ValueError):
            raise ConfigError(f"{path}: start_date must be an ISO date") from None
    for key in ("k_range", "phi_range"):
        if key in values:
            values[key] = tuple(values[key])
    return _build(SyntheticBasinSpec, values, path)


def _resolve(base: Path, name: str) -> Path:
    p = Path(name)
    return p if p.is_absolute() else base / p


def _load_basin(precip: Path, temp: Path, gauge: Path):
    for p in (precip, temp, gauge):
        if not p.is_file():
            raise DataError(f"data file not found: {p}")
    return load_grid_series(precip), load_grid_series(temp), load_gauge_series(gauge)


# ---------------------------------------------------------------------------
# record files


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fmt(x: float) -> str:
    return repr(float(x))


def write_history(path: Path, history) -> None:
    _write_csv(path, ("epoch", "train_loss", "val_loss"),
               [(r.epoch, _fmt(r.train_loss), _fmt(r.val_loss)) for r in history])


def write_kge(path: Path, basin_id: str, model: str, k: KgeComponents) -> None:
    _write_csv(path, ("basin_id", "model", "r", "beta", "gamma", "kge"),
               [(basin_id, model, _fmt(k.r), _fmt(k.beta), _fmt(k.gamma), _fmt(k.kge))])


def write_predictions(path: Path, start: date, ev: Evaluation) -> None:
    first = start.toordinal()
    _write_csv(path, ("date", "observed", "predicted"),
               [(date.fromordinal(first + int(d)).isoformat(), _fmt(o), _fmt(p))
                for d, o, p in zip(ev.target_days, ev.observed, ev.predicted)])


def read_predictions(path: Path) -> tuple[np.ndarray, np.ndarray]:
    if not path.exists():
        raise DataError(f"predictions file not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if not rows or [c.strip() for c in rows[0][1:3]] != ["observed", "predicted"]:
        raise DataError(f"{path}: expected header date,observed,predicted")
    try:
        obs = np.array([float(r[1]) for r in rows[1:]])
        sim = np.array([float(r[2]) for r in rows[1:]])
    except (IndexError, ValueError) as exc:
        raise DataError(f"{path}: malformed row ({exc})") from None
    return obs, sim


def _print_kge(basin_id: str, model: str, k: KgeComponents) -> None:
    print(f"{basin_id} {model}: KGE {k.kge:.4f} (r {k.r:.4f}, beta {k.beta:.4f}, gamma {k.gamma:.4f})")


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    spec = load_synth_spec(args.spec)
    if args.seed is not None:
        spec = dataclasses.replace(spec, seed=args.seed)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    precip, temp, gauge = generate_synthetic_basin(spec)
    save_grid_series(precip, out / PRECIP_FILE)
    save_grid_series(temp, out / TEMP_FILE)
    save_gauge_series(gauge, out / GAUGE_FILE)
    print(f"wrote {spec.days} days on a {spec.height}x{spec.width} grid to {out}")
    return 0


def run_training(cfg: RunConfig, base: Path, out: Path) -> Checkpoint:
    """Train, evaluate on the test partition and write every artifact of a run."""
    precip, temp, gauge = _load_basin(_resolve(base, cfg.precip), _resolve(base, cfg.temp),
                                      _resolve(base, cfg.gauge))
    try:
        dataset = prepare_dataset(cfg.model, precip, temp, gauge, lookback=cfg.lookback,
                                  train_frac=cfg.train_frac, val_frac=cfg.val_frac)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    model_config = default_model_config(cfg.model, dataset, lstm_hidden=cfg.lstm_hidden, dropout=cfg.dropout)
    result = train(cfg.model, dataset, cfg.train_config(), model_config)
    ev = evaluate(result.params, dataset, "test")
    ckpt = Checkpoint(result.params, dataset.scaler, cfg.to_dict(), result.history, ev.kge)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(ckpt, out / CHECKPOINT_FILE)
    write_history(out / HISTORY_FILE, result.history)
    write_kge(out / KGE_FILE, cfg.basin_id, cfg.model, ev.kge)
    write_predictions(out / PREDICTIONS_FILE, gauge.start_date, ev)
    return ckpt


def cmd_train(args) -> int:
    config_path = Path(args.config)
    cfg = load_run_config(config_path)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    base = config_path.parent
    out = Path(args.output_dir) if args.output_dir else _resolve(base, cfg.output_dir)
    ckpt = run_training(cfg, base, out)
    _print_kge(cfg.basin_id, cfg.model, ckpt.test_kge)
    print(f"checkpoint written to {out / CHECKPOINT_FILE}")
    return 0


def _check_compatible(ckpt: Checkpoint, precip) -> None:
    config = ckpt.params.config
    if isinstance(config, CnnLstmConfig) and (precip.height, precip.width) != (config.height, config.width):
        raise DataError(f"checkpoint expects a {config.height}x{config.width} grid, "
                        f"data is {precip.height}x{precip.width}")


def evaluate_checkpoint(ckpt: Checkpoint, precip, temp, gauge, part: str = "test") -> Evaluation:
    _check_compatible(ckpt, precip)
    rc = ckpt.run_config
    try:
        dataset = prepare_dataset(ckpt.kind, precip, temp, gauge, lookback=ckpt.params.config.lookback,
                                  train_frac=rc.get("train_frac", 0.7), val_frac=rc.get("val_frac", 0.3),
                                  scaler=ckpt.scaler)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    return evaluate(ckpt.params, dataset, part)


def cmd_evaluate(args) -> int:
    if args.predictions:
        obs, sim = read_predictions(Path(args.predictions))
        try:
            k = kge(sim, obs)
        except DegenerateSeriesError as exc:
            raise DataError(f"{args.predictions}: {exc}") from None
        _print_kge(Path(args.predictions).stem, "predictions", k)
        if args.output_dir:
            out = Path(args.output_dir)
            out.mkdir(parents=True, exist_ok=True)
            write_kge(out / KGE_FILE, Path(args.predictions).stem, "predictions", k)
        return 0
    if not args.checkpoint:
        raise ConfigError("evaluate needs a checkpoint or --predictions")
    ckpt_path = Path(args.checkpoint)
    if not ckpt_path.is_file():
        raise DataError(f"checkpoint not found: {ckpt_path}")
    ckpt = load_checkpoint(ckpt_path)
    rc = ckpt.run_config
    paths = [Path(getattr(args, name) or rc.get(name, "")) for name in ("precip", "temp", "gauge")]
    precip, temp, gauge = _load_basin(*paths)
    ev = evaluate_checkpoint(ckpt, precip, temp, gauge)
    out = Path(args.output_dir) if args.output_dir else ckpt_path.parent
    out.mkdir(parents=True, exist_ok=True)
    write_kge(out / KGE_FILE, ckpt.basin_id, ckpt.kind, ev.kge)
    write_predictions(out / PREDICTIONS_FILE, gauge.start_date, ev)
    _print_kge(ckpt.basin_id, ckpt.kind, ev.kge)
    return 0


def _kge_by_basin(paths, kind: str) -> dict[str, KgeComponents]:
    found: dict[str, KgeComponents] = {}
    for p in paths:
        p = Path(p)
        if not p.is_file():
            raise DataError(f"checkpoint not found: {p}")
        ckpt = load_checkpoint(p)
        if ckpt.kind != kind:
            raise ConfigError(f"{p}: expected a {kind} checkpoint, found {ckpt.kind}")
        if ckpt.test_kge is None:
            raise DataError(f"{p}: checkpoint carries no test KGE")
        if ckpt.basin_id in found:
            raise ConfigError(f"{p}: basin {ckpt.basin_id!r} listed twice for {kind}")
        found[ckpt.basin_id] = ckpt.test_kge
    return found


def cmd_compare(args) -> int:
    lstm = _kge_by_basin(args.lstm, LSTM)
    cnn = _kge_by_basin(args.cnn_lstm, CNN_LSTM)
    if set(lstm) != set(cnn):
        only_l = sorted(set(lstm) - set(cnn))
        only_c = sorted(set(cnn) - set(lstm))
        raise ConfigError(f"mismatched basin sets: only lstm {only_l}, only cnn-lstm {only_c}")
    rows = [BasinResult(b, lstm[b], cnn[b]) for b in sorted(lstm)]
    summary = compare_report(rows)
    text = summary.to_text()
    sys.stdout.write(text)
    if args.output_dir:
        out = Path(args.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "comparison.txt").write_text(text, encoding="utf-8")
        _write_csv(out / "comparison.csv", ("basin_id", "kge_lstm", "kge_cnn_lstm", "delta"),
                   [(r.basin_id, _fmt(r.lstm.kge), _fmt(r.cnn_lstm.kge), _fmt(r.delta)) for r in rows])
        record = summary.summary_record()
        _write_csv(out / "summary.csv", tuple(record),
                   [tuple(v if isinstance(v, (int, str)) else _fmt(v) for v in record.values())])
    return 0


def reduced_gradient_error(kind: str, grid: int = 3, lookback: int = 3, hidden: int = 4,
                           epsilon: float = 1e-5, seed: int = 0) -> float:
    """Worst relative gradient error of a small ``kind`` model on random data.

    Biases are drawn at random so their gradients are exercised; dropout is
    off so the loss is a deterministic function of the parameters.
    """
    rng = np.random.default_rng(seed)
    n_days, batch = lookback + 3, 3
    if kind == CNN_LSTM:
        config = CnnLstmConfig(grid, grid, lookback=lookback, lstm_hidden=hidden, dropout=0.0)
        inputs = rng.standard_normal((n_days, 3, grid, grid))
    elif kind == LSTM:
        config = LstmBaselineConfig(lookback=lookback, lstm_hidden=hidden, dropout=0.0)
        inputs = rng.standard_normal((n_days, 3))
    else:
        raise ConfigError(f"unknown model kind {kind!r}")
    params = build_model(kind, config, rng)
    tensors = {name: (rng.uniform(-0.5, 0.5, v.shape) if not v.any() else v)
               for name, v in params.tensors.items()}
    starts = np.arange(batch) * (n_days - lookback) // batch
    windows = starts[:, None] + np.arange(lookback)[None]
    targets = rng.standard_normal(batch)
    return ad.grad_check(lambda p: mse_loss(graph(params, p, inputs, windows), targets), tensors, epsilon)


def cmd_grad_check(args) -> int:
    kinds = MODEL_KINDS if args.model == "all" else (args.model,)
    ok = True
    for kind in kinds:
        err = reduced_gradient_error(kind, args.grid, args.lookback, args.hidden, args.epsilon, args.seed)
        passed = err < args.tolerance
        ok &= passed
        print(f"{kind}: max relative error {err:.3e} ({'pass' if passed else 'FAIL'}, tolerance {args.tolerance:g})")
    return 0 if ok else EXIT_NUMERIC


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flowcast", description="Gridded streamflow forecasting with CNN-LSTM and LSTM models.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch losses")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic basin")
    p.add_argument("spec", help="JSON file of synthetic basin parameters")
    p.add_argument("out_dir")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one model on one basin")
    p.add_argument("config", help="JSON run configuration")
    p.add_argument("--seed", type=int)
    p.add_argument("--output-dir")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint (or a predictions file) on the test period")
    p.add_argument("checkpoint", nargs="?")
    p.add_argument("--precip")
    p.add_argument("--temp")
    p.add_argument("--gauge")
    p.add_argument("--predictions", help="CSV with date,observed,predicted columns to score directly")
    p.add_argument("--output-dir")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("compare", help="per-basin comparison of paired checkpoints")
    p.add_argument("--lstm", nargs="+", required=True, metavar="CKPT")
    p.add_argument("--cnn-lstm", nargs="+", required=True, metavar="CKPT")
    p.add_argument("--output-dir")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("grad-check", help="finite-difference check of a reduced model")
    p.add_argument("--model", choices=(*MODEL_KINDS, "all"), default="all")
    p.add_argument("--grid", type=int, default=3)
    p.add_argument("--lookback", type=int, default=3)
    p.add_argument("--hidden", type=int, default=4)
    p.add_argument("--epsilon", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_grad_check)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointError, ad.ShapeError, DegenerateSeriesError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
