"""Command-line surface: dataset generation, training, evaluation, cost
analysis, and full leave-one-user-out runs.

Exit codes are stable for scripting: 0 success, 2 usage error, 3 config or
geometry error, 4 data/checkpoint integrity error.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import evaluation as eval_mod
from . import model as model_mod
from . import training as train_mod
from .errors import (
    ConfigError,
    ContractError,
    DimensionError,
    IntegrityError,
    SchemaError,
    UsageError,
)
from .model import SensorSpec

RUN_CONFIG_SCHEMA_VERSION = 1
_MODEL_KEYS = {"single_widths", "multi_widths", "model_dim", "num_heads", "dropout", "norm"}
_TRAIN_KEYS = {
    "epochs", "batch_size", "learning_rate", "weight_decay", "optimizer",
    "lr_schedule", "momentum", "precision", "normalize",
}


def load_run_config(path) -> dict:
    """Parse a run-config JSON file; unknown keys are rejected."""
    try:
        blob = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}")
    if not isinstance(blob, dict):
        raise UsageError(f"config {path} must be a JSON object")
    if blob.get("schema_version") != RUN_CONFIG_SCHEMA_VERSION:
        raise UsageError(
            f"config {path}: schema_version must be {RUN_CONFIG_SCHEMA_VERSION}"
        )
    unknown = set(blob) - {"schema_version", "model", "train"}
    if unknown:
        raise UsageError(f"config {path}: unknown top-level key(s) {sorted(unknown)}")
    for section, allowed in (("model", _MODEL_KEYS), ("train", _TRAIN_KEYS)):
        extra = set(blob.get(section, {})) - allowed
        if extra:
            raise UsageError(f"config {path}: unknown {section} key(s) {sorted(extra)}")
    return blob


def _parse_sensors(spec: str) -> list[SensorSpec]:
    """Parse 'name:channels,name:channels' sensor descriptions."""
    sensors = []
    for part in spec.split(","):
        if ":" not in part:
            raise UsageError(f"bad sensor spec {part!r}; expected name:channels")
        name, channels = part.split(":", 1)
        try:
            sensors.append(SensorSpec(name.strip(), int(channels)))
        except ValueError:
            raise UsageError(f"bad channel count in sensor spec {part!r}")
    return sensors


def _resolve_seed(value) -> int:
    if value is not None:
        return int(value)
    env = os.environ.get("UMSNET_SEED")
    return int(env) if env else 0


def _build_from_container(dataset, variant, run_config, seed):
    model_kwargs = dict(run_config.get("model", {}))
    config, model = model_mod.build_model(
        variant,
        dataset.sensors,
        len(dataset.activity_set),
        dataset.K,
        seed=seed,
        **model_kwargs,
    )
    return config, model


def _train_config(run_config, seed) -> train_mod.TrainConfig:
    return train_mod.TrainConfig(seed=seed, **run_config.get("train", {}))


def _check_window(dataset, window):
    if window is None:
        return
    if abs(dataset.window_seconds - window) > 1e-9:
        raise ConfigError(
            f"data container was sliced with window={dataset.window_seconds}s, "
            f"requested {window}s; regenerate the container"
        )


# -- subcommands ---------------------------------------------------------------


def cmd_generate(args) -> int:
    sensors = _parse_sensors(args.sensors)
    seed = _resolve_seed(args.seed)
    recordings = data_mod.synth_generate(
        num_users=args.users,
        num_classes=args.classes,
        sensors=sensors,
        seconds_per_user=args.seconds,
        seed=seed,
        noise_sigma=args.noise,
        long_horizon=args.long_horizon,
    )
    dataset = data_mod.build_dataset(recordings, window_seconds=args.window)
    out = Path(args.out)
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
        data_mod.save_dataset(dataset, out)
    except OSError as exc:
        print(f"error: cannot write {out}: {exc}", file=sys.stderr)
        return 1
    per_user = {}
    per_class = {}
    for s in dataset.samples:
        per_user[s.user_id] = per_user.get(s.user_id, 0) + 1
        per_class[s.label] = per_class.get(s.label, 0) + 1
    print(f"wrote {len(dataset.samples)} samples (K={dataset.K}) to {out}")
    for user in sorted(per_user):
        print(f"  user {user}: {per_user[user]} samples")
    for label in sorted(per_class):
        print(f"  class {dataset.activity_set[label]}: {per_class[label]} samples")
    return 0


def cmd_train(args) -> int:
    run_config = load_run_config(args.config) if args.config else {}
    seed = _resolve_seed(args.seed)
    dataset = data_mod.load_dataset(args.data)
    _check_window(dataset, args.window)
    split = data_mod.leave_one_user_out(dataset.samples, args.holdout_user)
    _, model = _build_from_container(dataset, args.variant, run_config, seed)
    tconfig = _train_config(run_config, seed)
    if tconfig.precision == "f64":
        model.to_dtype(np.float64)

    ckpt, history = train_mod.train(model, split, tconfig)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_mod.save_checkpoint(ckpt, out / "checkpoint.umsn")
    with open(out / "history.jsonl", "w") as fh:
        for record in history:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    test = split.test
    if ckpt.normalization is not None:
        test = data_mod.apply_channel_stats(test, ckpt.normalization)
    report = eval_mod.evaluate(model, test)
    (out / "metrics.json").write_text(report.to_json() + "\n")
    print(f"holdout user {args.holdout_user}: "
          f"accuracy={report.accuracy:.4f} macro_f1={report.macro_f1:.4f}")
    return 0


def cmd_eval(args) -> int:
    ckpt = train_mod.load_checkpoint(args.checkpoint)
    dataset = data_mod.load_dataset(args.data)
    samples = dataset.samples
    if args.holdout_user:
        samples = data_mod.leave_one_user_out(samples, args.holdout_user).test
    if ckpt.normalization is not None:
        samples = data_mod.apply_channel_stats(samples, ckpt.normalization)
    model = train_mod.restore_model(ckpt, which="best" if args.best else "final")
    report = eval_mod.evaluate(model, samples, include_time=args.time)
    print(report.to_json())
    return 0


def cmd_analyze(args) -> int:
    profile = args.profile.lower()
    if profile == "hhar":
        sensors, num_classes = model_mod.hhar_profile()
    elif profile == "mhealth":
        sensors, num_classes = model_mod.mhealth_profile()
    elif profile == "custom":
        sensors = _parse_sensors(args.sensors)
        num_classes = args.classes
    else:
        raise UsageError(f"unknown profile {args.profile!r}")
    k = int(round(args.window / 0.25))
    run_config = load_run_config(args.config) if args.config else {}
    _, model = model_mod.build_model(
        args.variant, sensors, num_classes, k, seed=0, **run_config.get("model", {})
    )

    param_rows = dict(eval_mod.parameter_breakdown(model))
    mac_rows = dict(eval_mod.mult_adds_breakdown(model))
    layers = sorted(set(param_rows) | set(mac_rows))
    summary = {
        "variant": model.config.variant,
        "profile": profile,
        "window_seconds": args.window,
        "K": k,
        "params": eval_mod.count_params(model),
        "mult_adds": eval_mod.count_mult_adds(model),
    }
    print(json.dumps(summary, sort_keys=True))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "cost.json").write_text(json.dumps(summary, sort_keys=True) + "\n")
        with open(out / "cost_breakdown.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["layer", "params", "mult_adds"])
            for layer in layers:
                writer.writerow([layer, param_rows.get(layer, 0), mac_rows.get(layer, 0)])
    if args.dense_ratio:
        # depthwise vs dense weight ratio on every grouped conv
        for name, module in model.named_modules():
            conv = getattr(module, "dwconv", None)
            if conv is None:
                continue
            dw = conv.weight.size
            dense = conv.out_channels * conv.in_channels * conv.kernel_size
            print(f"{name}.dwconv: depthwise/dense weight ratio = {dw}/{dense} "
                  f"= 1/{dense // dw}")
    return 0


def cmd_loocv(args) -> int:
    run_config = load_run_config(args.config) if args.config else {}
    seed = _resolve_seed(args.seed)
    dataset = data_mod.load_dataset(args.data)
    _check_window(dataset, args.window)
    users = dataset.users
    if len(users) < 2:
        raise UsageError("leave-one-user-out needs at least two users in the data")

    rows = []
    for user in users:
        split = data_mod.leave_one_user_out(dataset.samples, user)
        _, model = _build_from_container(dataset, args.variant, run_config, seed)
        tconfig = _train_config(run_config, seed)
        ckpt, history = train_mod.train(model, split, tconfig)
        test = split.test
        if ckpt.normalization is not None:
            test = data_mod.apply_channel_stats(test, ckpt.normalization)
        report = eval_mod.evaluate(model, test)
        rows.append({"user": user, "accuracy": report.accuracy,
                     "macro_f1": report.macro_f1})
        print(f"user {user}: accuracy={report.accuracy:.4f} "
              f"macro_f1={report.macro_f1:.4f}")

    mean_row = {
        "user": "mean",
        "accuracy": float(np.mean([r["accuracy"] for r in rows])),
        "macro_f1": float(np.mean([r["macro_f1"] for r in rows])),
    }
    rows.append(mean_row)
    print(f"mean: accuracy={mean_row['accuracy']:.4f} "
          f"macro_f1={mean_row['macro_f1']:.4f}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "loocv.json").write_text(json.dumps(rows, sort_keys=True) + "\n")
    return 0


# -- entry point ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="umsnet",
        description="Multi-sensor activity recognition: generate, train, eval, analyze.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="generate a synthetic UMSD dataset container")
    p.add_argument("--out", required=True)
    p.add_argument("--users", type=int, default=9)
    p.add_argument("--classes", type=int, default=6)
    p.add_argument("--sensors", default="accelerometer:3,gyroscope:3")
    p.add_argument("--seconds", type=float, default=120.0)
    p.add_argument("--window", type=float, default=1.5, choices=[1.5, 3.0, 6.0])
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--long-horizon", action="store_true")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train one leave-one-user-out fold")
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--variant", default="A", choices=["A", "B", "C", "custom"])
    p.add_argument("--window", type=float, default=None, choices=[1.5, 3.0, 6.0])
    p.add_argument("--holdout-user", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a data container")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--holdout-user", default=None)
    p.add_argument("--best", action="store_true",
                   help="use the best-accuracy weights instead of the final ones")
    p.add_argument("--time", action="store_true", help="include inference timing")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", help="parameter and mult-add cost analysis")
    p.add_argument("--variant", default="A", choices=["A", "B", "C", "custom"])
    p.add_argument("--profile", default="HHAR")
    p.add_argument("--window", type=float, default=6.0, choices=[1.5, 3.0, 6.0])
    p.add_argument("--sensors", default="accelerometer:3,gyroscope:3",
                   help="sensor spec for --profile custom")
    p.add_argument("--classes", type=int, default=6, help="classes for --profile custom")
    p.add_argument("--config", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--dense-ratio", action="store_true",
                   help="print grouped-vs-dense weight ratios")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("loocv", help="train and evaluate every leave-one-user-out fold")
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--variant", default="A", choices=["A", "B", "C", "custom"])
    p.add_argument("--window", type=float, default=None, choices=[1.5, 3.0, 6.0])
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_loocv)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, ContractError, DimensionError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 3
    except (IntegrityError, SchemaError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
