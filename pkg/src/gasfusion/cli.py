"""Command line: generate, train, eval, predict.

Exit codes: 0 success, 2 data or runtime error, 64 usage error. Results go
to stdout, progress to stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields
from pathlib import Path
from types import SimpleNamespace

import numpy as np

from . import metrics
from .data import CLASS_NAMES, SENSOR_NAMES, GenConfig, SensorFrame, ThermalFrame, gen_dataset, load_dataset, read_pgm, save_dataset
from .errors import GasFusionError
from .modelfile import load_bundle, save_bundle
from .models import KINDS, LATE_RULES, N_CLASSES, init_bundle, predict_proba, spec_from_dict, train
from .optim import TrainConfig

EXIT_OK, EXIT_DATA, EXIT_USAGE = 0, 2, 64
DEFAULT_SEED = 7
CONFIG_KEYS = ("seed", "generate", "train", "model")


class ConfigError(GasFusionError, ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _sensors_arg(text: str) -> tuple:
    parts = text.split(",")
    if len(parts) != len(SENSOR_NAMES):
        raise argparse.ArgumentTypeError(f"expected {len(SENSOR_NAMES)} comma-separated readings, got {len(parts)}")
    try:
        return tuple(int(p.strip()) for p in parts)
    except ValueError:
        raise argparse.ArgumentTypeError(f"readings must be integers: {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    p = _Parser(prog="gasfusion", description=__doc__.splitlines()[0], formatter_class=fmt)
    p.add_argument("--seed", type=int, default=None,
                   help=f"seed for generation, splitting, init and training (config value, else {DEFAULT_SEED})")
    p.add_argument("--config", type=Path, default=None, help="JSON config file; flags override its values")
    p.add_argument("--quiet", action="store_true", help="no progress output on stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="write a synthetic dataset", formatter_class=fmt)
    g.add_argument("--out", type=Path, required=True, help="dataset directory")
    g.add_argument("--samples-per-class", type=int, default=None, help="samples per class (default 1600)")

    t = sub.add_parser("train", help="train one model", formatter_class=fmt)
    t.add_argument("--data", type=Path, required=True, help="dataset directory")
    t.add_argument("--model", choices=KINDS, required=True, help="model kind")
    t.add_argument("--epochs", type=int, default=None, help="training epochs (default 300)")
    t.add_argument("--out", type=Path, required=True, help="model file to write")
    t.add_argument("--history", type=Path, default=None, help="history file (default: <out>.history.json)")

    e = sub.add_parser("eval", help="evaluate models on the test split", formatter_class=fmt)
    e.add_argument("--data", type=Path, required=True, help="dataset directory")
    e.add_argument("--model", type=Path, nargs="+", required=True, help="model files")
    e.add_argument("--late", choices=("none", *LATE_RULES), default="none",
                   help="late-fusion rule applied to exactly two models")
    e.add_argument("--out", type=Path, required=True, help="report directory")

    r = sub.add_parser("predict", help="classify one sample", formatter_class=fmt)
    r.add_argument("--model", type=Path, required=True, help="model file")
    r.add_argument("--image", type=Path, default=None, help="thermal frame (binary PGM)")
    r.add_argument("--sensors", type=_sensors_arg, default=None,
                   help="7 comma-separated ADC readings, " + ",".join(SENSOR_NAMES))
    return p


# --------------------------------------------------------------------------
# config
# --------------------------------------------------------------------------


def _section(cfg: dict, key: str) -> dict:
    val = cfg.get(key, {})
    if not isinstance(val, dict):
        raise ConfigError(f"config section {key!r} must be an object")
    return val


def _known(section: dict, cls, name: str, exclude=("seed",)) -> dict:
    allowed = {f.name for f in fields(cls)} - set(exclude)
    unknown = sorted(set(section) - allowed)
    if unknown:
        raise ConfigError(f"unknown keys in config section {name!r}: {', '.join(unknown)}")
    return dict(section)


def load_config(path: Path | None) -> dict:
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as e:
        raise ConfigError(f"{path}: cannot read config: {e.strerror}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}:{e.lineno}: invalid JSON: {e.msg}") from None
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    unknown = sorted(set(cfg) - set(CONFIG_KEYS))
    if unknown:
        raise ConfigError(f"{path}: unknown config keys: {', '.join(unknown)}")
    if "seed" in cfg and not isinstance(cfg["seed"], int):
        raise ConfigError(f"{path}: seed must be an integer")
    _known(_section(cfg, "generate"), GenConfig, "generate")
    _known(_section(cfg, "train"), TrainConfig, "train")
    models = _section(cfg, "model")
    bad = sorted(set(models) - set(KINDS))
    if bad:
        raise ConfigError(f"{path}: unknown model kinds in config: {', '.join(bad)}")
    return cfg


def _seed(args, cfg) -> int:
    if args.seed is not None:
        return args.seed
    return cfg.get("seed", DEFAULT_SEED)


def _spec(kind: str, cfg: dict):
    over = _section(cfg, "model").get(kind, {})
    try:
        return spec_from_dict(kind, over)
    except TypeError as e:
        raise ConfigError(f"bad model config for {kind}: {e}") from None


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, sort_keys=True) + "\n")


def cmd_generate(args, cfg, log) -> int:
    gen = _known(_section(cfg, "generate"), GenConfig, "generate")
    if args.samples_per_class is not None:
        gen["samples_per_class"] = args.samples_per_class
    seed = _seed(args, cfg)
    gcfg = GenConfig(**gen, seed=seed)
    log(f"generating {gcfg.samples_per_class} samples per class (seed {seed})")
    samples = gen_dataset(gcfg)
    try:
        save_dataset(samples, args.out, split_seed=seed)
    except OSError as e:
        raise ConfigError(f"cannot write dataset to {args.out}: {e.strerror}") from None
    counts = {name: sum(1 for s in samples if s.label.name == name) for name in CLASS_NAMES}
    _emit({"out": str(args.out), "total": len(samples), "counts": counts})
    return EXIT_OK


def _resolve_history(args) -> Path:
    if args.history is not None:
        return args.history
    return args.out.with_name(args.out.stem + ".history.json")


def cmd_train(args, cfg, log) -> int:
    tr = _known(_section(cfg, "train"), TrainConfig, "train")
    if args.epochs is not None:
        tr["epochs"] = args.epochs
    seed = _seed(args, cfg)
    tcfg = TrainConfig(**tr, seed=seed)
    spec = _spec(args.model, cfg)
    ds = load_dataset(args.data)
    train_set, val_set, test_set = ds.splits()
    log(f"training {args.model} for {tcfg.epochs} epochs on {len(train_set)} samples")
    bundle = init_bundle(args.model, spec, seed=seed)
    bundle, history = train(bundle, train_set, val_set, tcfg, log=log)
    bundle.meta["train_config"] = tcfg.to_dict()
    probs = predict_proba(bundle, test_set)
    y = np.array([int(s.label) for s in test_set])
    test_acc = float((probs.argmax(axis=1) == y).mean()) if len(y) else None
    bundle.meta["test_accuracy"] = test_acc
    try:
        save_bundle(bundle, args.out)
        hist_path = _resolve_history(args)
        body = {"model": args.model, "train_config": tcfg.to_dict(), "records": history}
        hist_path.write_text(json.dumps(body, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot write model output: {e.strerror}") from None
    _emit({"model": args.model, "out": str(args.out), "history": str(hist_path),
           "epochs": tcfg.epochs, "final": bundle.meta.get("final"), "test_accuracy": test_acc})
    return EXIT_OK


def _unique_names(paths) -> list:
    names, seen = [], {}
    for p in paths:
        base = Path(p).stem
        seen[base] = seen.get(base, 0) + 1
        names.append(base if seen[base] == 1 else f"{base}-{seen[base]}")
    return names


def _write_report(out: Path, name: str, cm, rep) -> None:
    text = f"{name}\n\nconfusion (rows true, cols predicted)\n"
    text += " " * 10 + "".join(f"{n:>10}" for n in CLASS_NAMES) + "\n"
    for cname, row in zip(CLASS_NAMES, cm.counts):
        text += f"{cname:<10}" + "".join(f"{v:>10d}" for v in row) + "\n"
    text += "\n" + rep.to_text()
    (out / f"{name}.txt").write_text(text, encoding="utf-8")
    record = {"model": name, "confusion": cm.to_dict(), "report": rep.to_dict()}
    (out / f"{name}.json").write_text(metrics.dumps_record(record), encoding="utf-8")


def cmd_eval(args, cfg, log, parser) -> int:
    if args.late != "none" and len(args.model) != 2:
        parser.error(f"--late {args.late} needs exactly two models, got {len(args.model)}")
    bundles = [load_bundle(p) for p in args.model]
    for path, b in zip(args.model, bundles):
        n = getattr(b.spec, "n_classes", N_CLASSES)
        if n != N_CLASSES:
            raise ConfigError(f"{path}: model has {n} classes, dataset has {N_CLASSES}")
    ds = load_dataset(args.data)
    test_set = ds.splits()[2]
    y = np.array([int(s.label) for s in test_set])
    probs = {}
    for name, b in zip(_unique_names(args.model), bundles):
        log(f"evaluating {name} ({b.kind}) on {len(test_set)} test samples")
        probs[name] = predict_proba(b, test_set)
    if args.late != "none":
        pa, pb = probs.values()
        probs[f"late-{args.late}"] = LATE_RULES[args.late](pa, pb)
    try:
        args.out.mkdir(parents=True, exist_ok=True)
        reports = {}
        for name, p in probs.items():
            cm, rep = metrics.evaluate(y, p.argmax(axis=1))
            _write_report(args.out, name, cm, rep)
            reports[name] = rep
        if len(reports) >= 2:
            text, record = metrics.compare(reports)
            (args.out / "comparison.txt").write_text(text, encoding="utf-8")
            (args.out / "comparison.json").write_text(record, encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot write reports to {args.out}: {e.strerror}") from None
    if len(reports) >= 2:
        sys.stdout.write(text)
    else:
        sys.stdout.write(next(iter(reports.values())).to_text(next(iter(reports))))
    return EXIT_OK


def cmd_predict(args, cfg, log) -> int:
    bundle = load_bundle(args.model)
    sensor = thermal = None
    if args.sensors is not None:
        sensor = SensorFrame(args.sensors)
    if args.image is not None:
        thermal = ThermalFrame(read_pgm(args.image))
    sample = SimpleNamespace(sensor=sensor, thermal=thermal)
    probs = predict_proba(bundle, [sample])[0]
    k = int(np.argmax(probs))
    lines = [CLASS_NAMES[k]] + [f"{name} {p:.6f}" for name, p in zip(CLASS_NAMES, probs)]
    sys.stdout.write("\n".join(lines) + "\n")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)

    def log(msg: str) -> None:
        if not args.quiet:
            print(msg, file=sys.stderr, flush=True)

    try:
        cfg = load_config(args.config)
        if args.command == "generate":
            return cmd_generate(args, cfg, log)
        if args.command == "train":
            return cmd_train(args, cfg, log)
        if args.command == "eval":
            return cmd_eval(args, cfg, log, parser)
        return cmd_predict(args, cfg, log)
    except (GasFusionError, ValueError, TypeError) as e:
        print(f"gasfusion: error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
