"""Synthetic segmentation data, labelled/unlabelled splits, batching and jitter."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .autograd import ContractError, Rng

logger = logging.getLogger(__name__)

ALLOWED_FRACTIONS = (Fraction(1), Fraction(1, 2), Fraction(1, 4), Fraction(1, 8))
SHAPE_KINDS = ("rectangle", "disc", "stripes", "triangle", "ring", "cross")


@dataclass
class Dataset:
    """Images N x C x H x W (float32) with label maps N x H x W (uint8)."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.uint8)
        if self.images.ndim != 4 or self.labels.ndim != 3:
            raise ContractError("dataset expects N x C x H x W images and N x H x W labels")
        if self.images.shape[0] != self.labels.shape[0] or self.images.shape[2:] != self.labels.shape[1:]:
            raise ContractError(f"images {self.images.shape} and labels {self.labels.shape} disagree")

    def __len__(self) -> int:
        return self.images.shape[0]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.num_classes)


# ------------------------------------------------------------------- generator


def _shape_mask(kind: str, hw: int, rng: Rng, yy: np.ndarray, xx: np.ndarray):
    """Boolean mask of one shape plus a 0/1 stripe pattern (all ones if plain)."""
    cy, cx = rng.uniform(2, hw - 2, size=2)
    plain = np.ones((hw, hw), dtype=bool)
    if kind == "rectangle":
        h, w = rng.uniform(5, 13, size=2)
        mask = (np.abs(yy - cy) <= h / 2) & (np.abs(xx - cx) <= w / 2)
        return mask, plain
    if kind == "disc":
        r = rng.uniform(3, 7)
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r, plain
    if kind == "stripes":
        h, w = rng.uniform(7, 14, size=2)
        mask = (np.abs(yy - cy) <= h / 2) & (np.abs(xx - cx) <= w / 2)
        theta = rng.uniform(0, np.pi)
        phase = rng.uniform(0, 4)
        u = (yy * np.sin(theta) + xx * np.cos(theta) + phase) % 4.0
        return mask, u < 2.0
    if kind == "triangle":
        r = rng.uniform(4, 8)
        rot = rng.uniform(0, 2 * np.pi)
        angles = rot + np.array([0, 2 * np.pi / 3, 4 * np.pi / 3])
        vy, vx = cy + r * np.sin(angles), cx + r * np.cos(angles)
        mask = np.ones((hw, hw), dtype=bool)
        for a in range(3):
            b = (a + 1) % 3
            cross = (vx[b] - vx[a]) * (yy - vy[a]) - (vy[b] - vy[a]) * (xx - vx[a])
            mask &= cross >= 0
        return mask, plain
    if kind == "ring":
        r = rng.uniform(4, 8)
        d2 = (yy - cy) ** 2 + (xx - cx) ** 2
        return (d2 <= r * r) & (d2 >= (r - 2) ** 2), plain
    if kind == "cross":
        arm, width = rng.uniform(4, 8), rng.uniform(1, 2)
        dy, dx = np.abs(yy - cy), np.abs(xx - cx)
        return ((dy <= width) & (dx <= arm)) | ((dx <= width) & (dy <= arm)), plain
    raise ContractError(f"unknown shape kind {kind!r}")


def _sample(hw: int, num_classes: int, channels: int, rng: Rng, noise: float, grain: float):
    yy, xx = np.mgrid[0:hw, 0:hw].astype(np.float64)
    # grainy background with a slow colour gradient; shapes are flat
    base = rng.uniform(0, 1, size=channels)
    tilt = rng.uniform(-0.2, 0.2, size=(channels, 2)) / hw
    image = base[:, None, None] + tilt[:, 0, None, None] * yy + tilt[:, 1, None, None] * xx
    image = image + rng.normal(0, grain, size=image.shape)
    labels = np.zeros((hw, hw), dtype=np.uint8)
    kinds = SHAPE_KINDS[: num_classes - 1]
    n_shapes = int(rng.integers(2, 6))
    for _ in range(n_shapes):
        c = int(rng.integers(0, len(kinds)))
        mask, pattern = _shape_mask(kinds[c], hw, rng, yy, xx)
        color = rng.uniform(0, 1, size=channels)
        alt = rng.uniform(0, 1, size=channels)
        fill = np.where(pattern[None], color[:, None, None], alt[:, None, None])
        image = np.where(mask[None], fill, image)
        labels[mask] = c + 1
    image += rng.normal(0, noise, size=image.shape)
    return image.astype(np.float32), labels


def generate_synthetic_dataset(
    n: int, hw: int, num_classes: int, seed: int, channels: int = 3,
    noise: float = 0.03, grain: float = 0.2,
) -> Dataset:
    """Random flat-coloured shapes over a grainy background; label = shape kind.

    Class 0 is background; classes 1.. follow ``SHAPE_KINDS``.  Colours are
    drawn independently of the kind, so only geometry and texture identify
    a class.
    """
    if not 2 <= num_classes <= len(SHAPE_KINDS) + 1:
        raise ContractError(f"num_classes must lie in [2, {len(SHAPE_KINDS) + 1}]")
    if hw < 8:
        raise ContractError("hw must be at least 8")
    rng = Rng(seed)
    images = np.empty((n, channels, hw, hw), dtype=np.float32)
    labels = np.empty((n, hw, hw), dtype=np.uint8)
    for i in range(n):
        images[i], labels[i] = _sample(hw, num_classes, channels, rng, noise, grain)
    return Dataset(images, labels, num_classes)


def class_histogram(labels: np.ndarray, num_classes: int) -> np.ndarray:
    """Fraction of pixels per class."""
    counts = np.bincount(np.asarray(labels).reshape(-1), minlength=num_classes)[:num_classes]
    return counts / counts.sum()


# ----------------------------------------------------------------------- split


@dataclass
class DatasetSplit:
    labelled: Dataset
    unlabelled: np.ndarray  # images only
    fraction: Fraction
    seed: int
    labelled_idx: np.ndarray
    unlabelled_idx: np.ndarray


def as_fraction(value) -> Fraction:
    frac = Fraction(value).limit_denominator(64)
    if frac not in ALLOWED_FRACTIONS:
        raise ContractError(f"fraction must be one of 1, 1/2, 1/4, 1/8; got {value}")
    return frac


def split_dataset(data: Dataset, fraction, seed: int) -> DatasetSplit:
    """Shuffle once per seed and take a prefix as the labelled set.

    Prefixes make the splits nested: the 1/8 labelled set is contained in the
    1/4 set, which is contained in the 1/2 set.
    """
    frac = as_fraction(fraction)
    n = len(data)
    n_lab = int(round(float(frac) * n))
    if n_lab == 0:
        raise ContractError(f"fraction {frac} of {n} samples leaves no labelled data")
    perm = Rng(seed).permutation(n)
    lab, unlab = np.sort(perm[:n_lab]), np.sort(perm[n_lab:])
    return DatasetSplit(data.subset(lab), data.images[unlab], frac, seed, lab, unlab)


# --------------------------------------------------------------------- batches


class CyclicSampler:
    """Visits every index once per epoch in a fresh random order."""

    def __init__(self, n: int, rng: Rng):
        if n <= 0:
            raise ContractError("cannot sample from an empty set")
        self.n = n
        self.rng = rng
        self._order = rng.permutation(n)
        self._pos = 0
        self._warned = False

    def next(self, batch_size: int) -> np.ndarray:
        if batch_size > self.n and not self._warned:
            logger.warning("batch size %d exceeds set size %d; sampling with replacement", batch_size, self.n)
            self._warned = True
        out = np.empty(batch_size, dtype=np.int64)
        for i in range(batch_size):
            if self._pos == self.n:
                self._order = self.rng.permutation(self.n)
                self._pos = 0
            out[i] = self._order[self._pos]
            self._pos += 1
        return out


def pick_batch(images: np.ndarray, batch_size: int, sampler: CyclicSampler, labels: np.ndarray | None = None):
    idx = sampler.next(batch_size)
    if labels is None:
        return images[idx], None
    return images[idx], labels[idx]


def jitter(image: np.ndarray, label: np.ndarray | None, rng: Rng, jitter_max: int):
    """Circularly shift one C x H x W image (and its label) by (dy, dx) in [0, jitter_max]^2."""
    h, w = image.shape[-2:]
    if jitter_max >= min(h, w):
        raise ContractError(f"jitter_max {jitter_max} must be below min(H, W) = {min(h, w)}")
    if jitter_max <= 0:
        return image, label
    dy, dx = (int(v) for v in rng.integers(0, jitter_max + 1, size=2))
    return shift(image, label, dy, dx)


def shift(image: np.ndarray, label: np.ndarray | None, dy: int, dx: int):
    image = np.roll(image, (dy, dx), axis=(-2, -1))
    if label is not None:
        label = np.roll(label, (dy, dx), axis=(-2, -1))
    return image, label


def jitter_batch(images: np.ndarray, labels: np.ndarray | None, rng: Rng, jitter_max: int):
    out_img = np.empty_like(images)
    out_lab = None if labels is None else np.empty_like(labels)
    for i in range(images.shape[0]):
        img, lab = jitter(images[i], None if labels is None else labels[i], rng, jitter_max)
        out_img[i] = img
        if out_lab is not None:
            out_lab[i] = lab
    return out_img, out_lab
