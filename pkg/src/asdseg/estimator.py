"""scikit-learn style wrapper around the trainer."""

from __future__ import annotations

from fractions import Fraction

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from . import autograd as ad
from .data import Dataset, DatasetSplit
from .models import DiscConfig, SegNetConfig
from .objectives import evaluate_metrics, predict_labels
from .trainer import Trainer, TrainConfig, desk_schedule, predict_logits
from .validation import check_divisible, check_images, check_label_maps, infer_num_classes


class AdversarialSegmenter(ClassifierMixin, BaseEstimator):
    """Per-pixel classifier trained with an optional adversarial term on unlabelled images.

    ``fit(X, y)`` trains fully supervised.  ``fit(X, y, X_unlabelled=U)`` with
    ``mode="semi"`` also trains a discriminator to tell outputs on ``X`` from
    outputs on ``U`` and adds ``alpha`` times its adversarial loss.

    Parameters
    ----------
    mode : {"semi", "baseline"}
    alpha : float
        Weight of the adversarial term.
    num_classes : int or None
        Inferred from ``y`` when None.
    schedule_divisor : int
        The four-stage learning-rate schedule is shortened by this factor.
    random_state : int
        Seeds initialisation, batch order and jitter.

    Attributes
    ----------
    classes_ : ndarray of shape (num_classes,)
    net_ : SegNet
    log_ : TrainLog
    """

    def __init__(
        self,
        mode: str = "semi",
        alpha: float = 0.1,
        k: int = 1,
        num_classes: int | None = None,
        num_blocks: int = 2,
        channels: int = 16,
        kernel: int = 3,
        disc_blocks: int = 2,
        disc_channels: int = 16,
        schedule_divisor: int = 50,
        batch_baseline: int = 16,
        batch_labelled: int = 8,
        batch_unlabelled: int = 8,
        momentum: float = 0.9,
        weight_decay: float = 1e-3,
        jitter_max: int = 4,
        random_state: int = 0,
    ):
        self.mode = mode
        self.alpha = alpha
        self.k = k
        self.num_classes = num_classes
        self.num_blocks = num_blocks
        self.channels = channels
        self.kernel = kernel
        self.disc_blocks = disc_blocks
        self.disc_channels = disc_channels
        self.schedule_divisor = schedule_divisor
        self.batch_baseline = batch_baseline
        self.batch_labelled = batch_labelled
        self.batch_unlabelled = batch_unlabelled
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.jitter_max = jitter_max
        self.random_state = random_state

    def _train_config(self, n_classes: int, in_channels: int) -> TrainConfig:
        return TrainConfig(
            seed=int(self.random_state), alpha=float(self.alpha), mode=self.mode, k=self.k,
            batch_baseline=self.batch_baseline, batch_labelled=self.batch_labelled,
            batch_unlabelled=self.batch_unlabelled, schedule=desk_schedule(self.schedule_divisor),
            momentum=self.momentum, weight_decay=self.weight_decay, jitter_max=self.jitter_max,
            segnet=SegNetConfig(self.num_blocks, self.channels, self.kernel, n_classes, in_channels),
            disc=DiscConfig(self.disc_blocks, self.disc_channels),
        )

    def fit(self, X, y, X_unlabelled=None):
        X = check_images(X)
        check_divisible(X, self.num_blocks)
        n_classes = self.num_classes or infer_num_classes(np.asarray(y))
        y = check_label_maps(y, X, n_classes)
        if self.mode == "semi":
            if X_unlabelled is None:
                raise ValueError("mode='semi' needs X_unlabelled")
            U = check_images(X_unlabelled, channels=X.shape[1])
            if U.shape[2:] != X.shape[2:]:
                raise ValueError("X_unlabelled images must match the size of X")
        else:
            U = np.zeros((0,) + X.shape[1:], np.float32)
        cfg = self._train_config(n_classes, X.shape[1])
        n_lab, n_unlab = len(X), len(U)
        split = DatasetSplit(
            Dataset(X, y, n_classes), U, Fraction(n_lab, n_lab + n_unlab), int(self.random_state),
            np.arange(n_lab), np.arange(n_lab, n_lab + n_unlab),
        )
        ad.reset_tape()
        self.net_, self.log_ = Trainer(cfg, split).run()
        self.classes_ = np.arange(n_classes)
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        self.input_channels_ = X.shape[1]
        return self

    def predict_proba(self, X) -> np.ndarray:
        """Softmax class probabilities, N x num_classes x H x W."""
        check_is_fitted(self, "net_")
        X = check_images(X, channels=self.input_channels_)
        check_divisible(X, self.num_blocks)
        z = predict_logits(self.net_, X).astype(np.float64)
        z -= z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        """Label maps, N x H x W."""
        check_is_fitted(self, "net_")
        X = check_images(X, channels=self.input_channels_)
        check_divisible(X, self.num_blocks)
        return predict_labels(predict_logits(self.net_, X))

    def score(self, X, y, sample_weight=None) -> float:
        """Mean intersection-over-union of ``predict(X)`` against ``y``."""
        if sample_weight is not None:
            raise ValueError("sample_weight is not supported")
        X = check_images(X, channels=getattr(self, "input_channels_", None))
        pred = self.predict(X)
        y = check_label_maps(y, X, len(self.classes_))
        return evaluate_metrics(pred, y, len(self.classes_)).iou
