"""Losses (supervised, discriminator, adversarial) and segmentation metrics.

The discriminator emits a logit ``z`` with ``D = sigmoid(z)``.  Both
discriminator-side costs are written with softplus in logit space:
``-log(sigmoid(z)) == softplus(-z)`` and ``-log(1 - sigmoid(z)) == softplus(z)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autograd import ContractError, Tensor, log_softmax, mean, mul, neg, scale, softplus, sum_

IGNORE_ID = 255


def supervised_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean per-pixel softmax cross-entropy over non-ignored pixels."""
    labels = np.asarray(labels)
    n, k, h, w = logits.shape
    if labels.shape != (n, h, w):
        raise ContractError(f"labels {labels.shape} do not match logits {logits.shape}")
    valid = labels != IGNORE_ID
    count = int(valid.sum())
    if count == 0:
        raise ContractError("supervised_loss: every pixel is ignored")
    if np.any(labels[valid] >= k) or np.any(labels[valid] < 0):
        raise ContractError(f"label ids must lie in [0, {k}) or equal {IGNORE_ID}")
    onehot = np.zeros((n, k, h, w), dtype=logits.dtype)
    nn_, hh, ww = np.nonzero(valid)
    onehot[nn_, labels[valid].astype(np.int64), hh, ww] = 1
    picked = sum_(mul(log_softmax(logits, axis=1), Tensor(onehot, dtype=logits.dtype)))
    return scale(picked, -1.0 / count)


def _check_logits(z: Tensor, what: str) -> None:
    if z.ndim != 2 or z.shape[1] != 1 or z.shape[0] == 0:
        raise ContractError(f"{what}: expected nonempty N x 1 logits, got {z.shape}")


def discriminator_loss(logit_t: Tensor, logit_u: Tensor) -> Tensor:
    """Cross-entropy of the labelled-vs-unlabelled classifier."""
    _check_logits(logit_t, "discriminator_loss")
    _check_logits(logit_u, "discriminator_loss")
    return mean(softplus(neg(logit_t))) + mean(softplus(logit_u))


def adversarial_loss(logit_u: Tensor) -> Tensor:
    """Mean of -log D over the unlabelled batch."""
    _check_logits(logit_u, "adversarial_loss")
    return mean(softplus(neg(logit_u)))


def total_cost(sup, adv, alpha: float):
    """Supervised cost plus alpha times the adversarial cost."""
    if alpha < 0:
        raise ContractError("alpha must be non-negative")
    if isinstance(adv, Tensor):
        return sup + scale(adv, alpha)
    return sup + alpha * adv


# --------------------------------------------------------------------- metrics


def predict_labels(logits: np.ndarray) -> np.ndarray:
    """Per-pixel argmax over the class axis; ties resolve to the smallest id."""
    return np.asarray(logits).argmax(axis=1).astype(np.int64)


@dataclass
class MetricsReport:
    iou: float
    class_recall: float
    global_precision: float
    intersection: np.ndarray = field(repr=False)
    union: np.ndarray = field(repr=False)
    true_positive: np.ndarray = field(repr=False)
    false_negative: np.ndarray = field(repr=False)

    @property
    def num_classes(self) -> int:
        return len(self.intersection)

    def per_class_rows(self) -> list[dict]:
        rows = []
        for c in range(self.num_classes):
            u, gt = self.union[c], self.true_positive[c] + self.false_negative[c]
            rows.append({
                "class": c,
                "intersection": int(self.intersection[c]),
                "union": int(u),
                "tp": int(self.true_positive[c]),
                "fn": int(self.false_negative[c]),
                "iou": float(self.intersection[c] / u) if u else float("nan"),
                "recall": float(self.true_positive[c] / gt) if gt else float("nan"),
            })
        return rows


def metrics_from_counts(intersection, union, tp, fn) -> MetricsReport:
    intersection, union = np.asarray(intersection), np.asarray(union)
    tp, fn = np.asarray(tp), np.asarray(fn)
    present = union > 0
    iou = float(np.mean(intersection[present] / union[present])) if present.any() else 0.0
    in_gt = (tp + fn) > 0
    recall = float(np.mean(tp[in_gt] / (tp + fn)[in_gt])) if in_gt.any() else 0.0
    total = int((tp + fn).sum())
    if total == 0:
        raise ContractError("no valid pixels to evaluate")
    return MetricsReport(iou, recall, float(tp.sum() / total), intersection, union, tp, fn)


def evaluate_metrics(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> MetricsReport:
    """Mean IoU, mean per-class recall and global pixel accuracy.

    Pixels whose ground truth is the ignore id are skipped.  Classes with an
    empty union are left out of the IoU mean, classes absent from ``gt`` out
    of the recall mean.
    """
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ContractError(f"pred {pred.shape} and gt {gt.shape} differ in shape")
    valid = gt != IGNORE_ID
    if not valid.any():
        raise ContractError("no valid pixels to evaluate")
    p = pred[valid].astype(np.int64)
    g = gt[valid].astype(np.int64)
    if g.max() >= num_classes or p.min() < 0 or p.max() >= num_classes:
        raise ContractError(f"class ids must lie in [0, {num_classes})")
    confusion = np.bincount(g * num_classes + p, minlength=num_classes**2).reshape(num_classes, num_classes)
    tp = np.diag(confusion)
    gt_count = confusion.sum(axis=1)
    pred_count = confusion.sum(axis=0)
    union = gt_count + pred_count - tp
    return metrics_from_counts(tp, union, tp, gt_count - tp)
