"""Input checks shared by the estimator and the command line."""

from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array

from .objectives import IGNORE_ID


def check_images(X, channels: int | None = None, min_side: int = 1) -> np.ndarray:
    """Return ``X`` as a finite float32 N x C x H x W array."""
    X = check_array(X, allow_nd=True, dtype=np.float32, ensure_min_samples=1, input_name="X")
    if X.ndim != 4:
        raise ValueError(f"X must be N x C x H x W, got {X.ndim} dimensions")
    if channels is not None and X.shape[1] != channels:
        raise ValueError(f"X has {X.shape[1]} channels, expected {channels}")
    if min(X.shape[2:]) < min_side:
        raise ValueError(f"images {X.shape[2]}x{X.shape[3]} are smaller than {min_side}")
    return np.ascontiguousarray(X)


def check_label_maps(y, X: np.ndarray, num_classes: int | None = None) -> np.ndarray:
    """Return ``y`` as uint8 N x H x W aligned with ``X``.

    Every value must be a class id below ``num_classes`` or the ignore id.
    """
    y = np.asarray(y)
    if y.ndim != 3 or y.shape[0] != X.shape[0] or y.shape[1:] != X.shape[2:]:
        raise ValueError(f"y must be N x H x W matching X {X.shape}, got {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.isfinite(y)) or np.any(y != np.round(y)):
            raise ValueError("y must hold integer class ids")
    if y.min() < 0:
        raise ValueError("class ids must be non-negative")
    bad = (y != IGNORE_ID) & (y >= (num_classes if num_classes is not None else IGNORE_ID))
    if bad.any():
        raise ValueError(f"class ids must lie below {num_classes} (or equal {IGNORE_ID})")
    return np.ascontiguousarray(y, dtype=np.uint8)


def infer_num_classes(y: np.ndarray) -> int:
    valid = y[y != IGNORE_ID]
    if valid.size == 0:
        raise ValueError("y has no labelled pixels")
    return max(2, int(valid.max()) + 1)


def check_divisible(X: np.ndarray, num_blocks: int) -> None:
    step = 2**num_blocks
    if X.shape[2] % step or X.shape[3] % step:
        raise ValueError(f"image sides {X.shape[2:]} must be divisible by {step} for {num_blocks} pooling blocks")
