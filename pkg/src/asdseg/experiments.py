"""Run directories, label-fraction and weight-decay sweeps."""

from __future__ import annotations

import csv
import dataclasses
import io as _io
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import io
from .data import Dataset, as_fraction, split_dataset
from .objectives import MetricsReport
from .trainer import DivergenceError, TrainConfig, train

logger = logging.getLogger(__name__)

FRACTIONS = (Fraction(1), Fraction(1, 2), Fraction(1, 4), Fraction(1, 8))
DEFAULT_DECAYS = (0.0, 5e-4, 1e-3, 5e-3, 1e-2, 5e-2)
SEMI_DECAY = 1e-3

WEIGHTS_NAME = "weights.aswt"
LOG_NAME = "log.csv"
CONFIG_NAME = "run.cfg"
METRICS_NAME = "metrics.csv"
FAILED_NAME = "FAILED"


def load_data_dir(path) -> tuple[Dataset, Dataset]:
    path = Path(path)
    return io.load_dataset(path / "train.asds"), io.load_dataset(path / "test.asds")


def metrics_csv(report: MetricsReport) -> str:
    out = _io.StringIO()
    wr = csv.writer(out, lineterminator="\n")
    wr.writerow(["iou", "class_recall", "global_precision"])
    wr.writerow([io.format_f32(report.iou), io.format_f32(report.class_recall), io.format_f32(report.global_precision)])
    wr.writerow([])
    rows = report.per_class_rows()
    wr.writerow(list(rows[0]))
    for r in rows:
        wr.writerow([io.format_f32(v) if isinstance(v, float) else v for v in r.values()])
    return out.getvalue()


def run_training(cfg: TrainConfig, train_set: Dataset, test_set: Dataset, fraction, out_dir, command: str = "") -> MetricsReport:
    """Train one configuration and write run.cfg, weights, log and final metrics.

    On divergence the partial log and a FAILED marker are written before the
    error propagates.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    frac = as_fraction(fraction)
    header = f"# command: {command}\n# fraction: {frac}\n" if command else f"# fraction: {frac}\n"
    io.atomic_write(out / CONFIG_NAME, (header + io.config_to_text(cfg)).encode())
    split = split_dataset(train_set, frac, cfg.seed)
    try:
        net, log = train(cfg, split, test_set)
    except DivergenceError as exc:
        if exc.log.records:
            io.emit_log(exc.log, out / LOG_NAME)
        io.atomic_write(out / FAILED_NAME, (f"{exc}\n{exc.state}\n").encode())
        raise
    io.save_weights(out / WEIGHTS_NAME, net)
    io.emit_log(log, out / LOG_NAME)
    report = log.final_metrics
    io.atomic_write(out / METRICS_NAME, metrics_csv(report).encode())
    return report


@dataclass(frozen=True)
class Job:
    mode: str
    fraction: Fraction
    weight_decay: float
    seed: int

    @property
    def name(self) -> str:
        frac = str(self.fraction).replace("/", "-")
        return f"{self.mode}_f{frac}_wd{self.weight_decay:g}_s{self.seed}"


def _run_job(args) -> dict:
    job, cfg, data_dir, out_dir = args
    cfg = dataclasses.replace(cfg, mode=job.mode, seed=job.seed, weight_decay=job.weight_decay)
    train_set, test_set = load_data_dir(data_dir)
    row = {"mode": job.mode, "fraction": str(job.fraction), "weight_decay": job.weight_decay,
           "seed": job.seed, "run_dir": job.name}
    try:
        rep = run_training(cfg, train_set, test_set, job.fraction, Path(out_dir) / "runs" / job.name)
    except Exception as exc:  # a failed cell is recorded, the sweep goes on
        logger.error("run %s failed: %s", job.name, exc)
        return row | {"status": "failed", "iou": None, "class_recall": None, "global_precision": None}
    return row | {"status": "ok", "iou": rep.iou, "class_recall": rep.class_recall,
                  "global_precision": rep.global_precision}


def workers() -> int:
    try:
        return max(1, int(os.environ.get("ASDSEG_THREADS", "1")))
    except ValueError:
        return 1


def run_jobs(jobs: list[Job], cfg: TrainConfig, data_dir, out_dir) -> list[dict]:
    args = [(job, cfg, str(data_dir), str(out_dir)) for job in jobs]
    n = min(workers(), len(jobs))
    if n <= 1:
        return [_run_job(a) for a in args]
    with ProcessPoolExecutor(max_workers=n) as pool:
        return list(pool.map(_run_job, args))


def parse_seeds(text: str, base: int) -> list[int]:
    """``"5"`` -> five seeds starting at ``base``; ``"3,7,9"`` -> those seeds."""
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()] if "," in text else list(range(base, base + int(text)))
    except ValueError:
        raise ValueError(f"bad seed list {text!r}") from None
    if not seeds:
        raise ValueError("need at least one seed")
    return seeds


def fraction_jobs(seeds, weight_decay: float, fractions=FRACTIONS) -> list[Job]:
    jobs = []
    for frac in fractions:
        for mode in ("baseline", "semi"):
            if mode == "semi" and frac == 1:
                continue
            jobs += [Job(mode, Fraction(frac), weight_decay, s) for s in seeds]
    return jobs


def decay_jobs(seeds, decays=DEFAULT_DECAYS, fraction=Fraction(1, 8)) -> list[Job]:
    jobs = [Job("baseline", fraction, float(d), s) for d in decays for s in seeds]
    jobs += [Job("semi", fraction, SEMI_DECAY, s) for s in seeds]
    return jobs


SUMMARY_FIELDS = ("mode", "fraction", "weight_decay", "n_runs", "n_failed",
                  "iou_mean", "iou_std", "class_recall_mean", "class_recall_std",
                  "global_precision_mean", "global_precision_std")
RUN_FIELDS = ("mode", "fraction", "weight_decay", "seed", "status", "iou", "class_recall", "global_precision", "run_dir")


def summarize(rows: list[dict]) -> list[dict]:
    """Mean and sample standard deviation per (mode, fraction, decay) cell."""
    cells: dict[tuple, list[dict]] = {}
    for r in rows:
        cells.setdefault((r["mode"], r["fraction"], r["weight_decay"]), []).append(r)
    out = []
    for (mode, frac, wd), rs in cells.items():
        ok = [r for r in rs if r["status"] == "ok"]
        cell = {"mode": mode, "fraction": frac, "weight_decay": wd, "n_runs": len(ok), "n_failed": len(rs) - len(ok)}
        for key in ("iou", "class_recall", "global_precision"):
            vals = np.array([r[key] for r in ok], dtype=np.float64)
            cell[f"{key}_mean"] = float(vals.mean()) if len(vals) else None
            cell[f"{key}_std"] = float(vals.std(ddof=1)) if len(vals) > 1 else (0.0 if len(vals) else None)
        out.append(cell)
    return out


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path, rows: list[dict], fieldnames) -> None:
    buf = _io.StringIO()
    wr = csv.DictWriter(buf, fieldnames=fieldnames, lineterminator="\n")
    wr.writeheader()
    for r in rows:
        wr.writerow({k: _fmt(r.get(k)) for k in fieldnames})
    io.atomic_write(path, buf.getvalue().encode())


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def fraction_table(summary: list[dict]) -> str:
    """Rows: mode; columns: fraction; cells: IoU/C/G as mean±std in percent."""
    fracs = [str(f) for f in FRACTIONS]
    lookup = {(c["mode"], c["fraction"]): c for c in summary}
    lines = ["mode      " + "".join(f"{'fraction ' + f:>36}" for f in fracs)]
    lines.append("          " + "".join(f"{'IoU':>12}{'C':>12}{'G':>12}" for _ in fracs))
    for mode in ("baseline", "semi"):
        cells = []
        for f in fracs:
            c = lookup.get((mode, f))
            if c is None or c["iou_mean"] is None:
                cells.append(f"{'-':>12}" * 3)
                continue
            for key in ("iou", "class_recall", "global_precision"):
                cells.append(f"{100 * c[key + '_mean']:>6.1f}±{100 * c[key + '_std']:<4.1f} ")
        lines.append(f"{mode:<10}" + "".join(cells))
    return "\n".join(lines)


def decay_table(summary: list[dict]) -> str:
    base = sorted((c for c in summary if c["mode"] == "baseline"), key=lambda c: c["weight_decay"])
    semi = [c for c in summary if c["mode"] == "semi"]
    head = "decay factor " + "".join(f"{c['weight_decay']:>12g}" for c in base) + "  |" + "".join(f"{c['weight_decay']:>12g} (ours)" for c in semi)
    vals = "IoU          " + "".join(
        f"{100 * c['iou_mean']:>12.1f}" if c["iou_mean"] is not None else f"{'-':>12}" for c in base
    ) + "  |" + "".join(f"{100 * c['iou_mean']:>12.1f}       " if c["iou_mean"] is not None else "-" for c in semi)
    return head + "\n" + vals


def sweep(jobs: list[Job], cfg: TrainConfig, data_dir, out_dir) -> tuple[list[dict], list[dict]]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = run_jobs(jobs, cfg, data_dir, out)
    summary = summarize(rows)
    write_csv(out / "runs.csv", rows, RUN_FIELDS)
    write_csv(out / "summary.csv", summary, SUMMARY_FIELDS)
    return rows, summary


__all__ = [
    "FRACTIONS", "DEFAULT_DECAYS", "Job", "run_training", "fraction_jobs", "decay_jobs",
    "sweep", "summarize", "fraction_table", "decay_table", "parse_seeds", "load_data_dir",
]
