"""Binary dataset/weights files, the training-log CSV and ``key = value`` configs.

All binary fields are little-endian and fixed width; see ``docs/formats.md``
for the byte-level layout.  Loaders validate the whole file before touching
any caller state, and writers go through a temp file plus ``os.replace``.
"""

from __future__ import annotations

import csv
import io as _io
import os
import struct
import tempfile
import zlib
from dataclasses import fields
from fractions import Fraction
from pathlib import Path

import numpy as np

from .data import Dataset
from .models import DiscConfig, Network, SegNetConfig
from .optim import FULL_SCHEDULE, LrSchedule
from .trainer import TrainConfig, TrainLog

DATASET_MAGIC = b"ASDS"
WEIGHTS_MAGIC = b"ASWT"
FORMAT_VERSION = 1

TRAIN_HEADER = ("iteration", "lr", "sup_loss", "adv_loss", "disc_loss")
EVAL_HEADER = ("iteration", "iou", "class_recall", "global_precision")


class FormatError(ValueError):
    code = "format"


class BadMagicError(FormatError):
    code = "bad-magic"


class VersionError(FormatError):
    code = "bad-version"


class ChecksumError(FormatError):
    code = "checksum"


class TruncatedError(FormatError):
    code = "truncated"


class WeightsMismatchError(FormatError):
    code = "mismatch"


class ConfigError(ValueError):
    pass


def atomic_write(path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _crc(data: bytes) -> bytes:
    return struct.pack("<I", zlib.crc32(data) & 0xFFFFFFFF)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedError(f"file truncated: wanted {n} bytes at offset {self.pos}, have {len(self.buf) - self.pos}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def section(self, n: int) -> bytes:
        """Read ``n`` bytes followed by their CRC32 and verify it."""
        body = self.take(n)
        (crc,) = self.unpack("<I")
        if crc != zlib.crc32(body) & 0xFFFFFFFF:
            raise ChecksumError(f"CRC mismatch in section ending at offset {self.pos}")
        return body


def _check_magic(r: _Reader, magic: bytes) -> None:
    got = r.take(4)
    if got != magic:
        raise BadMagicError(f"bad magic {got!r}, expected {magic!r}")
    (version,) = r.unpack("<H")
    if version != FORMAT_VERSION:
        raise VersionError(f"unsupported format version {version}")


# --------------------------------------------------------------------- dataset


def dataset_to_bytes(data: Dataset) -> bytes:
    n, c, h, w = data.images.shape
    header = DATASET_MAGIC + struct.pack("<HIIIII", FORMAT_VERSION, n, c, h, w, data.num_classes)
    images = data.images.astype("<f4").tobytes()
    labels = data.labels.astype(np.uint8).tobytes()
    return header + _crc(header) + images + _crc(images) + labels + _crc(labels)


def dataset_from_bytes(buf: bytes) -> Dataset:
    r = _Reader(buf)
    _check_magic(r, DATASET_MAGIC)
    n, c, h, w, k = r.unpack("<IIIII")
    (crc,) = r.unpack("<I")
    if crc != zlib.crc32(buf[: r.pos - 4]) & 0xFFFFFFFF:
        raise ChecksumError("CRC mismatch in dataset header")
    images = r.section(n * c * h * w * 4)
    labels = r.section(n * h * w)
    if r.pos != len(buf):
        raise FormatError(f"{len(buf) - r.pos} trailing bytes after dataset")
    return Dataset(
        np.frombuffer(images, dtype="<f4").astype(np.float32).reshape(n, c, h, w),
        np.frombuffer(labels, dtype=np.uint8).reshape(n, h, w).copy(),
        k,
    )


def save_dataset(path, data: Dataset) -> None:
    atomic_write(path, dataset_to_bytes(data))


def load_dataset(path) -> Dataset:
    return dataset_from_bytes(Path(path).read_bytes())


# --------------------------------------------------------------------- weights


def state_to_bytes(state: dict[str, np.ndarray]) -> bytes:
    parts = [WEIGHTS_MAGIC, struct.pack("<HI", FORMAT_VERSION, len(state))]
    for name, arr in state.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.astype("<f4").tobytes())
    body = b"".join(parts)
    return body + _crc(body)


def state_from_bytes(buf: bytes) -> dict[str, np.ndarray]:
    r = _Reader(buf)
    _check_magic(r, WEIGHTS_MAGIC)
    if len(buf) < 4 + 2 + 4 + 4:
        raise TruncatedError("weights file too short")
    # the trailing CRC covers everything before it; verify before parsing
    (crc,) = struct.unpack("<I", buf[-4:])
    if crc != zlib.crc32(buf[:-4]) & 0xFFFFFFFF:
        raise ChecksumError("CRC mismatch in weights file")
    r = _Reader(buf[:-4])
    r.pos = 6
    (count,) = r.unpack("<I")
    state: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        try:
            name = r.take(nlen).decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("entry name is not valid UTF-8") from None
        (rank,) = r.unpack("<B")
        dims = r.unpack(f"<{rank}I")
        payload = r.take(int(np.prod(dims, dtype=np.int64)) * 4)
        if name in state:
            raise FormatError(f"duplicate entry {name!r} in weights file")
        state[name] = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(dims)
    if r.pos != len(r.buf):
        raise FormatError(f"{len(r.buf) - r.pos} trailing bytes after weights")
    return state


def save_weights(path, net: Network) -> None:
    """Parameters and batch-norm running statistics, in registry order."""
    atomic_write(path, state_to_bytes(net.state_dict()))


def load_weights(path, net: Network) -> None:
    state = state_from_bytes(Path(path).read_bytes())
    params, buffers = net.named_params(), net.named_buffers()
    expected = {k: t.shape for k, t in params.items()} | {k: b.shape for k, b in buffers.items()}
    problems = [f"missing {k}" for k in expected if k not in state]
    problems += [f"unexpected {k}" for k in state if k not in expected]
    problems += [
        f"{k}: file shape {state[k].shape} vs network {tuple(expected[k])}"
        for k in state
        if k in expected and state[k].shape != tuple(expected[k])
    ]
    if problems:
        raise WeightsMismatchError("weights do not fit the network: " + "; ".join(problems))
    net.load_state_dict(state)


# ------------------------------------------------------------------------- log


def format_f32(value) -> str:
    """Shortest decimal that parses back to the same float32."""
    if value is None:
        return ""
    return np.format_float_positional(np.float32(value), unique=True, trim="-")


def log_to_csv(log: TrainLog) -> str:
    out = _io.StringIO()
    wr = csv.writer(out, lineterminator="\n")
    wr.writerow(TRAIN_HEADER)
    for r in log.records:
        wr.writerow([r.iteration, format_f32(r.lr), format_f32(r.sup_loss), format_f32(r.adv_loss), format_f32(r.disc_loss)])
    if log.evals:
        wr.writerow(EVAL_HEADER)
        for it, m in log.evals:
            wr.writerow([it, format_f32(m.iou), format_f32(m.class_recall), format_f32(m.global_precision)])
    return out.getvalue()


def emit_log(log: TrainLog, path) -> None:
    if not log.records:
        raise ValueError("refusing to write an empty training log")
    atomic_write(path, log_to_csv(log).encode("ascii"))


def read_log(path) -> tuple[list[dict], list[dict]]:
    """Parse a log CSV into (training rows, eval rows); empty fields become None."""
    train_rows, eval_rows = [], []
    header, target = None, None
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if tuple(row) == TRAIN_HEADER:
                header, target = TRAIN_HEADER, train_rows
                continue
            if tuple(row) == EVAL_HEADER:
                header, target = EVAL_HEADER, eval_rows
                continue
            if header is None:
                raise FormatError("log row before any header")
            rec = {}
            for key, val in zip(header, row):
                if key == "iteration":
                    rec[key] = int(val)
                else:
                    rec[key] = None if val == "" else float(np.float32(val))
            target.append(rec)
    return train_rows, eval_rows


# ---------------------------------------------------------------------- config

_MANDATORY = ("seed", "train.alpha")
_TRAIN_KEYS = {
    "mode": str, "k": int, "batch_baseline": int, "batch_labelled": int,
    "batch_unlabelled": int, "momentum": float, "weight_decay": float,
    "disc_lr_scale": float, "jitter_max": int, "jitter_unlabelled": "bool",
    "disc_input": str, "eval_every": int, "eval_batch": int,
}


def _parse_bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _config_keys() -> dict[str, object]:
    keys: dict[str, object] = {"seed": int, "train.alpha": float,
                               "train.schedule_divisor": int, "train.schedule": str}
    keys.update({f"train.{k}": t for k, t in _TRAIN_KEYS.items()})
    for prefix, cls in (("model", SegNetConfig), ("disc", DiscConfig)):
        for f in fields(cls):
            keys[f"{prefix}.{f.name}"] = "bool" if f.type in (bool, "bool") else {"int": int, "float": float}.get(f.type, f.type)
    return keys


CONFIG_KEYS = _config_keys()


def parse_config_text(text: str) -> dict[str, object]:
    """Parse ``key = value`` lines; every problem is collected before raising."""
    values: dict[str, object] = {}
    errors = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            errors.append(f"line {lineno}: expected 'key = value'")
            continue
        key, val = (s.strip() for s in line.split("=", 1))
        kind = CONFIG_KEYS.get(key)
        if kind is None:
            errors.append(f"line {lineno}: unknown key {key!r}")
            continue
        if key in values:
            errors.append(f"line {lineno}: duplicate key {key!r}")
            continue
        try:
            values[key] = _parse_bool(val) if kind == "bool" else kind(val)
        except ValueError:
            errors.append(f"line {lineno}: bad value {val!r} for {key}")
    for key in _MANDATORY:
        if key not in values:
            errors.append(f"missing mandatory key {key!r}")
    if errors:
        raise ConfigError("\n".join(errors))
    return values


def parse_schedule(text: str) -> LrSchedule:
    """``"200:0.1,80:0.05"`` -> stages."""
    stages = []
    for part in text.split(","):
        iters, lr = part.split(":")
        stages.append((int(iters), float(lr)))
    return LrSchedule(tuple(stages))


def config_from_values(values: dict[str, object]) -> TrainConfig:
    train_kw = {k.split(".", 1)[1]: v for k, v in values.items() if k.startswith("train.") and k[6:] in _TRAIN_KEYS}
    model_kw = {k.split(".", 1)[1]: v for k, v in values.items() if k.startswith("model.")}
    disc_kw = {k.split(".", 1)[1]: v for k, v in values.items() if k.startswith("disc.")}
    try:
        if "train.schedule" in values:
            schedule = parse_schedule(values["train.schedule"])
        else:
            schedule = LrSchedule(FULL_SCHEDULE).scaled(int(values.get("train.schedule_divisor", 50)))
        cfg = TrainConfig(
            seed=int(values["seed"]), alpha=float(values["train.alpha"]), schedule=schedule,
            segnet=SegNetConfig(**model_kw), disc=DiscConfig(**disc_kw), **train_kw,
        )
        cfg.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def load_config(path) -> TrainConfig:
    return config_from_values(parse_config_text(Path(path).read_text()))


def config_to_text(cfg: TrainConfig) -> str:
    """Resolved config in the same ``key = value`` syntax; parses back to ``cfg``."""
    lines = [f"seed = {cfg.seed}", f"train.alpha = {cfg.alpha!r}"]
    for key in _TRAIN_KEYS:
        lines.append(f"train.{key} = {getattr(cfg, key)}")
    lines.append("train.schedule = " + ",".join(f"{it}:{lr!r}" for it, lr in cfg.schedule.stages))
    for prefix, sub in (("model", cfg.segnet), ("disc", cfg.disc)):
        for f in fields(sub):
            lines.append(f"{prefix}.{f.name} = {getattr(sub, f.name)}")
    return "\n".join(lines) + "\n"


def fraction_text(frac) -> str:
    return str(Fraction(frac).limit_denominator(64))
