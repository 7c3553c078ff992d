"""Adversarial semi-supervised training of segmentation networks, on numpy."""

from .autograd import ContractError, Rng, Tensor, UsageError
from .data import Dataset, generate_synthetic_dataset, split_dataset
from .estimator import AdversarialSegmenter
from .models import DiscConfig, SegNetConfig, build_discriminator, build_segnet
from .objectives import MetricsReport, evaluate_metrics
from .trainer import TrainConfig, Trainer, train

__version__ = "0.1.0"

__all__ = [
    "AdversarialSegmenter", "ContractError", "Dataset", "DiscConfig", "MetricsReport", "Rng",
    "SegNetConfig", "Tensor", "TrainConfig", "Trainer", "UsageError", "build_discriminator",
    "build_segnet", "evaluate_metrics", "generate_synthetic_dataset", "split_dataset", "train",
]
