"""Command-line entry point: synth, prepare, train, cv, transfer, eval, gradcheck, info.

Exit codes: 0 ok, 1 usage/config error, 2 data error, 3 verification failure.
"""
from __future__ import annotations

import argparse
import glob
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .dataio import (
    DataError,
    WindowedDataset,
    load_recording,
    load_windowed,
    model_from_weights,
    save_recording,
    save_weights,
    save_windowed,
)
from .model import ConfigError, ModelConfig, build_model, expected_parameter_counts
from .prepare import PrepareConfig, prepare_dataset
from .trainer import (
    CONDITION_EPOCHS,
    TrainConfig,
    cross_validate,
    evaluate,
    make_plan,
    run_condition,
    save_fold_weights,
    save_history,
    train,
)

log = logging.getLogger("ppgnet")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_VERIFY = 0, 1, 2, 3


class UsageError(Exception):
    pass


# run configuration -------------------------------------------------------------

@dataclass
class CvConfig:
    scheme: str = "kfold:5"  # "loso" or "kfold:K"
    split_by: str = "subject"  # "subject" or "window"
    split_seed: int = 0
    jobs: int = 1
    sparse_fraction: float = 0.15


@dataclass
class RunConfig:
    """Everything a run needs besides file paths; serialized as JSON sections."""

    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    prepare: PrepareConfig = field(default_factory=PrepareConfig)
    cv: CvConfig = field(default_factory=CvConfig)

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            section = asdict(getattr(self, f.name))
            out[f.name] = {k: list(v) if isinstance(v, tuple) else v for k, v in section.items()}
        return out


_SECTIONS = {f.name: f for f in fields(RunConfig)}


def _section_types(name: str) -> dict:
    cls = type(getattr(RunConfig(), name))
    return {f.name: f for f in fields(cls)}


def _coerce(section: str, key: str, value, default):
    if isinstance(default, tuple) or (section == "train" and key == "freeze"):
        if value is None:
            return None
        if isinstance(value, str):
            value = [v for v in value.split(",") if v]
        if not isinstance(value, (list, tuple)):
            raise UsageError(f"{section}.{key} expects a list")
        return tuple(int(v) if isinstance(default, tuple) and default and isinstance(default[0], int) else v
                     for v in value)
    if isinstance(default, bool):
        if isinstance(value, str):
            if value.lower() not in ("true", "false", "1", "0"):
                raise UsageError(f"{section}.{key} expects true/false, got {value!r}")
            return value.lower() in ("true", "1")
        return bool(value)
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float) or (default is None and key == "sparse_fraction"):
        return None if value is None else float(value)
    return value


def apply_settings(cfg: RunConfig, settings: dict) -> RunConfig:
    """Overlay ``{section: {key: value}}`` onto ``cfg``; unknown names are errors."""
    for section, values in settings.items():
        if section not in _SECTIONS:
            raise UsageError(f"unknown config section {section!r} (expected one of {sorted(_SECTIONS)})")
        if not isinstance(values, dict):
            raise UsageError(f"config section {section!r} must be an object")
        known = _section_types(section)
        current = getattr(cfg, section)
        updates = {}
        for key, value in values.items():
            if key not in known:
                raise UsageError(f"unknown config key {section}.{key}")
            try:
                updates[key] = _coerce(section, key, value, getattr(current, key))
            except (TypeError, ValueError) as exc:
                raise UsageError(f"bad value for {section}.{key}: {value!r} ({exc})") from exc
        cfg = replace(cfg, **{section: replace(current, **updates)})
    return cfg


def load_run_config(path: str | None, overrides: list[str] | None = None) -> RunConfig:
    cfg = RunConfig()
    if path:
        try:
            data = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise UsageError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(data, dict):
            raise UsageError(f"{path}: top level must be an object")
        cfg = apply_settings(cfg, data)
    for item in overrides or []:
        name, sep, value = item.partition("=")
        section, dot, key = name.partition(".")
        if not sep or not dot:
            raise UsageError(f"--set expects section.key=value, got {item!r}")
        try:
            parsed = json.loads(value)
        except json.JSONDecodeError:
            parsed = value
        cfg = apply_settings(cfg, {section: {key: parsed}})
    cfg.model.validate()
    try:
        cfg.train.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    return cfg


def _config_from_args(args) -> RunConfig:
    sets = list(getattr(args, "set", None) or [])
    shortcuts = {
        "epochs": "train.epochs",
        "lr": "train.learning_rate",
        "batch_size": "train.batch_size",
        "jobs": "cv.jobs",
        "scheme": "cv.scheme",
        "split_by": "cv.split_by",
    }
    for attr, key in shortcuts.items():
        value = getattr(args, attr, None)
        if value is not None:
            sets.append(f"{key}={value}")
    seed = getattr(args, "seed", None)
    if seed is not None:
        sets += [f"model.seed={seed}", f"train.seed={seed}", f"cv.split_seed={seed}"]
    return load_run_config(getattr(args, "config", None), sets)


# commands ------------------------------------------------------------------------

def cmd_synth(args) -> int:
    from .synth import synth_cohort

    if args.n < 1 or args.duration <= 8:
        raise UsageError("need --n >= 1 and --duration > 8")
    cohort = synth_cohort(args.n, args.duration, args.seed, args.noise, args.artifact)
    for rec in cohort:
        save_recording(rec, args.out)
    print(f"wrote {len(cohort)} recordings to {args.out}")
    return EXIT_OK


def cmd_prepare(args) -> int:
    cfg = _config_from_args(args)
    paths = sorted({p for pattern in args.manifests for p in glob.glob(pattern)})
    if not paths:
        raise DataError(f"no manifests match {args.manifests}")
    recordings = [load_recording(p) for p in paths]
    dataset, stats = prepare_dataset(recordings, cfg.prepare)
    if len(dataset) == 0:
        log.warning("no windows survived preparation")
    save_windowed(dataset, args.out)
    print(
        f"{len(recordings)} recordings, {stats.windows} windows, kept {stats.kept}, "
        f"dropped {stats.dropped} (no label {stats.dropped_no_label}, out of band {stats.dropped_out_of_band}, "
        f"flat signal {stats.dropped_flat})"
    )
    return EXIT_OK


def _load_nonempty(path) -> WindowedDataset:
    ds = load_windowed(path)
    if len(ds) == 0:
        raise DataError(f"{path}: dataset has no windows")
    return ds


def cmd_train(args) -> int:
    cfg = _config_from_args(args)
    ds = _load_nonempty(args.dataset)
    model = build_model(cfg.model)
    model, history = train(model, ds, cfg.train, callback=_progress(cfg.train.epochs))
    save_weights(model, args.out_weights, {"history_final_loss": history[-1] if history else None})
    if args.out_history:
        save_history(args.out_history, history)
    final = f"{history[-1]:.4f}" if history else "n/a"
    print(f"trained {cfg.train.epochs} epochs on {len(ds)} windows; final loss {final}")
    return EXIT_OK


def _progress(total: int):
    def callback(epoch, loss):
        if total and (epoch + 1) % max(1, total // 10) == 0:
            log.info("epoch %d/%d mean loss %.4f", epoch + 1, total, loss)
    return callback


def _print_summary(report) -> None:
    for row in report.aggregates():
        if row["scope"] != "fold":
            print(f"{row['scope']:<10} MAE {row['mae']:.3f}  SDAE {row['sdae']:.3f}  PCC {row['pcc']:.4f}  n={row['n_windows']}")


def cmd_cv(args) -> int:
    cfg = _config_from_args(args)
    ds = _load_nonempty(args.dataset)
    try:
        plan = make_plan(ds, cfg.cv.scheme, cfg.cv.split_seed, cfg.cv.split_by)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    result = cross_validate(ds, plan, cfg.model, cfg.train, jobs=cfg.cv.jobs, condition=None)
    result.report.meta["run_config"] = cfg.to_dict()
    result.report.save(args.out)
    for i, history in enumerate(result.histories):
        save_history(Path(args.out) / f"history_fold{i}.csv", history)
    if args.save_weights:
        save_fold_weights(result, args.out)
    print(f"{plan.scheme}: {len(plan)} folds")
    _print_summary(result.report)
    return EXIT_OK


def cmd_transfer(args) -> int:
    cfg = _config_from_args(args)
    target = _load_nonempty(args.target)
    tcfg = cfg.train
    if args.epochs is None and not _train_key_set(args, "epochs"):
        tcfg = replace(tcfg, epochs=CONDITION_EPOCHS.get(args.condition, tcfg.epochs))
    if args.condition == 1:
        source_weights = None
    elif args.source_weights is None:
        raise UsageError(f"condition {args.condition} needs --source-weights")
    else:
        source_weights = args.source_weights
    result = run_condition(
        args.condition,
        target,
        source_weights=source_weights,
        model_config=cfg.model,
        train_config=tcfg,
        k=int(cfg.cv.scheme.partition(":")[2] or 5) if cfg.cv.scheme.startswith("kfold") else 5,
        sparse_fraction=cfg.cv.sparse_fraction,
        split_seed=cfg.cv.split_seed,
        jobs=cfg.cv.jobs,
    )
    result.report.meta["run_config"] = cfg.to_dict()
    result.report.save(args.out)
    for i, history in enumerate(result.histories):
        if history:
            save_history(Path(args.out) / f"history_fold{i}.csv", history)
    if args.save_weights:
        save_fold_weights(result, args.out)
    meta = result.report.meta
    print(
        f"condition {args.condition}: epochs {meta['epochs']}, optimizer steps {meta['optimizer_steps']}, "
        f"trainable {meta['trainable_params']} of {meta['total_params']}"
    )
    _print_summary(result.report)
    return EXIT_OK


def _train_key_set(args, key: str) -> bool:
    if any(s.startswith(f"train.{key}=") for s in (getattr(args, "set", None) or [])):
        return True
    if getattr(args, "config", None):
        data = json.loads(Path(args.config).read_text())
        return key in data.get("train", {})
    return False


def cmd_eval(args) -> int:
    model, meta = model_from_weights(args.weights)
    ds = load_windowed(args.dataset)
    counts = model.count_parameters()
    report = evaluate(model, ds, {
        "condition": None, "scheme": "HOLDOUT", "initial_weights": str(args.weights),
        "epochs": 0, "optimizer_steps": 0, "total_params": counts["total"],
        "trainable_params": counts["trainable"], "parameter_counts": counts,
    })
    report.save(args.out)
    if len(report) == 0:
        log.warning("dataset has no windows; empty report written")
    else:
        _print_summary(report)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .verify import run_suite

    report = run_suite(args.seed or 0)
    for line in report.lines():
        print(line)
    print("gradient suite", "PASSED" if report.passed else "FAILED")
    return EXIT_OK if report.passed else EXIT_VERIFY


def cmd_info(args) -> int:
    if args.weights:
        model, meta = model_from_weights(args.weights)
        config = model.config
        counts = model.count_parameters()
    else:
        cfg = _config_from_args(args)
        config = cfg.model
        counts = expected_parameter_counts(config)
        if args.dump_config:
            print(json.dumps(cfg.to_dict(), indent=2))
    for block, n in counts.items():
        print(f"{block:<10} {n:>9}")
    ledger = build_model(config).shape_ledger()
    print("shapes:", ", ".join(f"{k} {list(v)}" for k, v in ledger.items()))
    return EXIT_OK


# parser --------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_config(p, training: bool = False):
    p.add_argument("--config", help="JSON run configuration (sections: model, train, prepare, cv)")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config field")
    p.add_argument("--seed", type=int, help="seed for init, training order, dropout and splits")
    if training:
        p.add_argument("--epochs", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--batch-size", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ppgnet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic PPG/ECG cohort")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=10)
    p.add_argument("--duration", type=float, default=300.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--artifact", type=float, default=0.3)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("prepare", help="manifests -> labelled, normalized windows")
    p.add_argument("manifests", nargs="+", help="manifest paths or glob patterns")
    p.add_argument("--out", required=True)
    _add_config(p)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="single training run")
    p.add_argument("dataset")
    p.add_argument("--out-weights", required=True)
    p.add_argument("--out-history")
    _add_config(p, training=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("cv", help="cross-validation")
    p.add_argument("dataset")
    p.add_argument("--scheme", help="loso or kfold:K")
    p.add_argument("--split-by", choices=("subject", "window"))
    p.add_argument("--jobs", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--save-weights", action="store_true")
    _add_config(p, training=True)
    p.set_defaults(func=cmd_cv)

    p = sub.add_parser("transfer", help="transfer-learning conditions 1-4")
    p.add_argument("target")
    p.add_argument("--condition", type=int, choices=(1, 2, 3, 4), required=True)
    p.add_argument("--source-weights")
    p.add_argument("--jobs", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--save-weights", action="store_true")
    _add_config(p, training=True)
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("eval", help="inference and metrics with a weights file")
    p.add_argument("weights")
    p.add_argument("dataset")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference verification of the autograd core")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("info", help="parameter counts and shapes for weights or a config")
    p.add_argument("--weights")
    p.add_argument("--dump-config", action="store_true", help="print the effective run configuration")
    _add_config(p)
    p.set_defaults(func=cmd_info)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"ppgnet: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"ppgnet: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"ppgnet: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
