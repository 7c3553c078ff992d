"""Command-line entry point: ``asdseg <command> ...``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime or
numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import experiments as ex
from . import io
from .autograd import ContractError, Rng
from .data import as_fraction, class_histogram, generate_synthetic_dataset
from .gradcheck import format_report, run_suite
from .models import build_segnet
from .trainer import DivergenceError, evaluate

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

logger = logging.getLogger("asdseg")


class UsageFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def parse_fraction(text: str) -> Fraction:
    try:
        return as_fraction(Fraction(text))
    except (ValueError, ZeroDivisionError, ContractError) as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _data_file(path: Path, name: str) -> Path:
    """``path`` may be a data directory or a dataset file."""
    return path / name if path.is_dir() else path


# -------------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    out = Path(args.out)
    targets = [out / "train.asds", out / "test.asds", out / "manifest.json"]
    existing = [str(t) for t in targets if t.exists()]
    if existing and not args.force:
        raise UsageFailure(f"refusing to overwrite {', '.join(existing)} (use --force)")
    train_seed, test_seed = (int(s.generate_state(1)[0]) for s in np.random.SeedSequence(args.seed).spawn(2))
    train = generate_synthetic_dataset(args.n, args.hw, args.classes, train_seed)
    test = generate_synthetic_dataset(args.n_test, args.hw, args.classes, test_seed)
    out.mkdir(parents=True, exist_ok=True)
    io.save_dataset(targets[0], train)
    io.save_dataset(targets[1], test)
    manifest = {
        "generator": "synthetic-shapes",
        "format_version": io.FORMAT_VERSION,
        "seed": args.seed,
        "train": {"n": args.n, "seed": train_seed,
                  "class_histogram": [round(float(v), 6) for v in class_histogram(train.labels, args.classes)]},
        "test": {"n": args.n_test, "seed": test_seed,
                 "class_histogram": [round(float(v), 6) for v in class_histogram(test.labels, args.classes)]},
        "hw": args.hw,
        "classes": args.classes,
        "channels": int(train.images.shape[1]),
    }
    io.atomic_write(targets[2], (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode())
    print(f"wrote {args.n} train and {args.n_test} test samples to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = io.load_config(args.config)
    if args.mode is not None:
        cfg.mode = args.mode
    cfg.validate()
    if cfg.mode == "semi" and args.fraction == 1:
        raise UsageFailure("semi mode needs unlabelled data; use a fraction below 1")
    data = Path(args.data)
    train_set = io.load_dataset(_data_file(data, "train.asds"))
    test_set = io.load_dataset(data / "test.asds") if data.is_dir() and (data / "test.asds").exists() else None
    if test_set is None:
        raise UsageFailure(f"no test.asds under {data}")
    command = (f"asdseg train --config {args.config} --data {args.data} "
               f"--fraction {io.fraction_text(args.fraction)} --mode {cfg.mode} --out {args.out}")
    rep = ex.run_training(cfg, train_set, test_set, args.fraction, args.out, command)
    print(f"mode={cfg.mode} fraction={io.fraction_text(args.fraction)} seed={cfg.seed}")
    _print_report(rep)
    return EXIT_OK


def cmd_eval(args) -> int:
    weights = Path(args.weights)
    cfg_path = Path(args.config) if args.config else weights.parent / ex.CONFIG_NAME
    if not cfg_path.exists():
        raise UsageFailure(f"no config at {cfg_path}; pass --config")
    cfg = io.load_config(cfg_path)
    net = build_segnet(cfg.segnet, Rng(0))
    io.load_weights(weights, net)
    test_set = io.load_dataset(_data_file(Path(args.data), "test.asds"))
    rep = evaluate(net, test_set, cfg.eval_batch)
    _print_report(rep)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        io.atomic_write(out / ex.METRICS_NAME, ex.metrics_csv(rep).encode())
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = run_suite(args.seed, args.scale)
    print(format_report(results))
    return EXIT_OK if all(r.passed for r in results) else EXIT_RUNTIME


def _sweep_inputs(args):
    cfg = io.load_config(args.config)
    try:
        seeds = ex.parse_seeds(args.seeds, cfg.seed)
    except ValueError as exc:
        raise UsageFailure(str(exc)) from None
    for name in ("train.asds", "test.asds"):
        if not (Path(args.data) / name).is_file():
            raise UsageFailure(f"no {name} under {args.data}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    io.atomic_write(out / "command.txt", (" ".join(["asdseg", args.command] + [
        f"--{k.replace('_', '-')} {_flag_text(v)}" for k, v in sorted(vars(args).items())
        if k not in ("command", "func", "verbose")]) + "\n").encode())
    io.atomic_write(out / "sweep.cfg", io.config_to_text(cfg).encode())
    return cfg, seeds


def _flag_text(value) -> str:
    if isinstance(value, tuple):
        return ",".join(f"{v:g}" for v in value)
    return str(value)


def cmd_sweep_fraction(args) -> int:
    cfg, seeds = _sweep_inputs(args)
    _, summary = ex.sweep(ex.fraction_jobs(seeds, cfg.weight_decay), cfg, args.data, args.out)
    print(ex.fraction_table(summary))
    return EXIT_OK


def cmd_sweep_decay(args) -> int:
    cfg, seeds = _sweep_inputs(args)
    _, summary = ex.sweep(ex.decay_jobs(seeds, args.decays), cfg, args.data, args.out)
    print(ex.decay_table(summary))
    return EXIT_OK


def _print_report(rep) -> None:
    print(f"IoU {rep.iou:.4f}  class recall {rep.class_recall:.4f}  global precision {rep.global_precision:.4f}")
    print(f"{'class':>5} {'iou':>8} {'recall':>8}")
    for row in rep.per_class_rows():
        print(f"{row['class']:>5} {row['iou']:>8.4f} {row['recall']:>8.4f}")


def _decays(text: str) -> tuple[float, ...]:
    try:
        vals = tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad decay list {text!r}") from None
    if not vals or any(v < 0 for v in vals):
        raise argparse.ArgumentTypeError("decays must be a non-empty list of non-negative numbers")
    return vals


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="asdseg", description="Adversarial semi-supervised segmentation at desk scale.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a synthetic train/test dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int, default=512, help="training samples")
    g.add_argument("--n-test", type=int, default=128)
    g.add_argument("--hw", type=int, default=32, help="image height and width")
    g.add_argument("--classes", type=int, default=4)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--force", action="store_true", help="overwrite existing files")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one configuration")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True, help="directory holding train.asds and test.asds")
    t.add_argument("--fraction", type=parse_fraction, default=Fraction(1), help="labelled fraction: 1, 1/2, 1/4 or 1/8")
    t.add_argument("--mode", choices=("baseline", "semi"), default=None, help="overrides train.mode")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate saved weights on the test set")
    e.add_argument("--weights", required=True)
    e.add_argument("--data", required=True, help="data directory or .asds file")
    e.add_argument("--config", help="defaults to run.cfg next to the weights")
    e.add_argument("--out", help="directory for metrics.csv")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference check of every backward rule")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--scale", type=float, default=1.0, help="magnitude of the random inputs")
    c.set_defaults(func=cmd_gradcheck)

    for name, func, helptext in (
        ("sweep-fraction", cmd_sweep_fraction, "baseline vs semi over labelled fractions"),
        ("sweep-decay", cmd_sweep_decay, "baseline weight-decay grid at 1/8 plus one semi run"),
    ):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--config", required=True)
        s.add_argument("--data", required=True)
        s.add_argument("--seeds", default="5", help="a count (seeds start at the config seed) or a comma list")
        s.add_argument("--out", required=True)
        if name == "sweep-decay":
            s.add_argument("--decays", type=_decays, default=ex.DEFAULT_DECAYS)
        s.set_defaults(func=func)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageFailure, io.ConfigError, io.WeightsMismatchError, ContractError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"asdseg: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DivergenceError, io.FormatError, ArithmeticError, OSError) as exc:
        print(f"asdseg: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
