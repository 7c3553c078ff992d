"""Alternating discriminator / segmentation-network training.

Each outer iteration performs ``k`` discriminator updates followed by one
update of the segmentation network on ``supervised + alpha * adversarial``.
The adversarial term is evaluated on the unlabelled batch only; the
discriminator never sends gradient back through labelled outputs.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import autograd as ad
from .autograd import ContractError, Rng, Tensor
from .data import CyclicSampler, Dataset, DatasetSplit, jitter_batch, pick_batch
from .models import DiscConfig, Discriminator, SegNet, SegNetConfig, build_discriminator, build_segnet
from .objectives import (
    MetricsReport,
    adversarial_loss,
    discriminator_loss,
    evaluate_metrics,
    predict_labels,
    supervised_loss,
    total_cost,
)
from .optim import FULL_SCHEDULE, LrSchedule, SgdState, lr_at, step

logger = logging.getLogger(__name__)

MODES = ("baseline", "semi")
DISC_INPUTS = ("probs", "logits")

# independent random streams derived from the run seed
_STREAMS = ("init_f", "init_d", "net_lab", "net_unlab", "disc_lab", "disc_unlab",
            "jit_net_lab", "jit_net_unlab", "jit_disc")


class DivergenceError(RuntimeError):
    """A loss became non-finite; carries the partial log and a state summary."""

    def __init__(self, message: str, log: "TrainLog", state: dict):
        super().__init__(message)
        self.log = log
        self.state = state


def desk_schedule(divisor: int = 50) -> LrSchedule:
    return LrSchedule(FULL_SCHEDULE).scaled(divisor)


@dataclass
class TrainConfig:
    seed: int
    alpha: float
    mode: str = "semi"
    k: int = 1
    batch_baseline: int = 16
    batch_labelled: int = 8
    batch_unlabelled: int = 8
    schedule: LrSchedule = field(default_factory=desk_schedule)
    momentum: float = 0.9
    weight_decay: float = 1e-3
    disc_lr_scale: float = 1.0
    jitter_max: int = 4
    jitter_unlabelled: bool = True
    disc_input: str = "probs"
    eval_every: int = 0
    eval_batch: int = 64
    segnet: SegNetConfig = field(default_factory=SegNetConfig)
    disc: DiscConfig = field(default_factory=DiscConfig)

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ContractError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.k < 1:
            raise ContractError("k must be >= 1")
        if self.alpha < 0:
            raise ContractError("alpha must be non-negative")
        if min(self.batch_baseline, self.batch_labelled, self.batch_unlabelled) < 1:
            raise ContractError("batch sizes must be positive")
        if self.disc_input not in DISC_INPUTS:
            raise ContractError(f"disc_input must be one of {DISC_INPUTS}")
        if self.jitter_max < 0:
            raise ContractError("jitter_max must be non-negative")
        self.segnet.validate()
        self.disc.validate()


@dataclass
class StepRecord:
    iteration: int
    lr: float
    sup_loss: float
    adv_loss: Optional[float]
    disc_loss: Optional[float]


@dataclass
class TrainLog:
    mode: str
    records: list[StepRecord] = field(default_factory=list)
    evals: list[tuple[int, MetricsReport]] = field(default_factory=list)
    disc_updates: int = 0
    net_updates: int = 0

    @property
    def final_metrics(self) -> Optional[MetricsReport]:
        return self.evals[-1][1] if self.evals else None


def disc_features(logits: Tensor, disc_input: str) -> Tensor:
    """What the discriminator sees of the segmentation output."""
    return ad.softmax(logits, axis=1) if disc_input == "probs" else logits


def discriminator_step(
    f: SegNet,
    D: Discriminator,
    x_t: np.ndarray,
    x_u: np.ndarray,
    opt: SgdState,
    disc_input: str = "probs",
) -> float:
    """One update of the discriminator; the segmentation net is read-only here.

    ``f`` runs with batch statistics but without touching its running stats.
    Both populations pass through ``D`` as one batch so its batch norm cannot
    separate them by batch statistics alone.
    """
    if len(x_t) == 0 or len(x_u) == 0:
        raise ContractError("discriminator_step needs nonempty labelled and unlabelled batches")
    was_training = f.training
    f.train()
    with ad.no_grad():
        y_t = disc_features(f(Tensor(x_t), update_stats=False), disc_input)
        y_u = disc_features(f(Tensor(x_u), update_stats=False), disc_input)
    f.train() if was_training else f.eval()
    ad.reset_tape()
    D.train()
    D.zero_grad()
    joint = Tensor(np.concatenate([y_t.data, y_u.data]))
    z = D(joint)
    n_t = len(x_t)
    loss = discriminator_loss(ad.rows(z, 0, n_t), ad.rows(z, n_t, z.shape[0]))
    ad.backward(loss)
    step(D.named_params(), opt)
    return loss.item()


def network_step(
    f: SegNet,
    D: Optional[Discriminator],
    x_t: np.ndarray,
    lab_t: np.ndarray,
    x_u: Optional[np.ndarray],
    alpha: float,
    opt: SgdState,
    disc_input: str = "probs",
) -> tuple[float, Optional[float]]:
    """One update of ``f`` on the supervised loss plus alpha times the adversarial loss.

    The discriminator is frozen and evaluated with its running statistics,
    on the unlabelled outputs only.  With ``x_u=None`` this is a plain
    supervised step.
    """
    ad.reset_tape()
    f.train()
    f.zero_grad()
    sup = supervised_loss(f(Tensor(x_t)), lab_t)
    adv = None
    if x_u is not None:
        if D is None:
            raise ContractError("semi-supervised step needs a discriminator")
        logits_u = f(Tensor(x_u), update_stats=False)
        D.eval()
        with D.frozen():
            adv = adversarial_loss(D(disc_features(logits_u, disc_input)))
        D.train()
    cost = total_cost(sup, adv, alpha) if adv is not None else sup
    ad.backward(cost)
    step(f.named_params(), opt)
    return sup.item(), (adv.item() if adv is not None else None)


def predict_logits(f: SegNet, images: np.ndarray, batch: int = 64) -> np.ndarray:
    """Eval-mode forward without recording; leaves f's mode as it was."""
    was_training = f.training
    f.eval()
    out = []
    try:
        with ad.no_grad():
            for i in range(0, len(images), batch):
                out.append(f(Tensor(images[i : i + batch])).data)
    finally:
        f.train() if was_training else f.eval()
    if not out:
        return np.zeros((0, f.cfg.num_classes) + images.shape[2:], np.float32)
    return np.concatenate(out)


def evaluate(f: SegNet, test: Dataset, batch: int = 64) -> MetricsReport:
    pred = predict_labels(predict_logits(f, test.images, batch))
    return evaluate_metrics(pred, test.labels, f.cfg.num_classes)


class Trainer:
    """Holds the networks, optimiser states, samplers and random streams of one run."""

    def __init__(self, cfg: TrainConfig, split: DatasetSplit):
        cfg.validate()
        self.cfg = cfg
        self.split = split
        if cfg.mode == "semi" and len(split.unlabelled) == 0:
            raise ContractError("semi-supervised mode needs unlabelled data (fraction < 1)")
        if split.labelled.images.shape[1] != cfg.segnet.input_channels:
            raise ContractError("image channels do not match model.input_channels")
        if split.labelled.num_classes > cfg.segnet.num_classes:
            raise ContractError("dataset has more classes than model.num_classes")
        self.rng = dict(zip(_STREAMS, Rng(cfg.seed).spawn(len(_STREAMS))))
        self.f = build_segnet(cfg.segnet, self.rng["init_f"])
        self.opt_f = SgdState.for_params(self.f.named_params(), mu=cfg.momentum, beta_wd=cfg.weight_decay)
        n_lab = len(split.labelled)
        self.net_lab = CyclicSampler(n_lab, self.rng["net_lab"])
        self.D: Optional[Discriminator] = None
        if cfg.mode == "semi":
            self.D = build_discriminator(cfg.disc, self.rng["init_d"], cfg.segnet.num_classes)
            self.opt_d = SgdState.for_params(self.D.named_params(), mu=cfg.momentum, beta_wd=cfg.weight_decay)
            n_unlab = len(split.unlabelled)
            self.net_unlab = CyclicSampler(n_unlab, self.rng["net_unlab"])
            self.disc_lab = CyclicSampler(n_lab, self.rng["disc_lab"])
            self.disc_unlab = CyclicSampler(n_unlab, self.rng["disc_unlab"])
        self.log = TrainLog(cfg.mode)
        self.iteration = 0

    def _labelled(self, sampler, size, jit_rng):
        img, lab = pick_batch(self.split.labelled.images, size, sampler, self.split.labelled.labels)
        return jitter_batch(img, lab, jit_rng, self.cfg.jitter_max)

    def _unlabelled(self, sampler, size, jit_rng):
        img, _ = pick_batch(self.split.unlabelled, size, sampler)
        if self.cfg.jitter_unlabelled:
            img, _ = jitter_batch(img, None, jit_rng, self.cfg.jitter_max)
        return img

    def _diverged(self, what: str, value: float):
        state = {
            "iteration": self.iteration,
            "quantity": what,
            "value": value,
            "param_norms": {k: float(np.linalg.norm(t.data)) for k, t in self.f.named_params().items()},
        }
        raise DivergenceError(f"non-finite {what} at iteration {self.iteration}", self.log, state)

    def step(self) -> StepRecord:
        cfg = self.cfg
        lr = lr_at(cfg.schedule, self.iteration)
        self.opt_f.lr = lr
        disc_loss = None
        adv = None
        if cfg.mode == "semi":
            self.opt_d.lr = lr * cfg.disc_lr_scale
            losses = []
            for _ in range(cfg.k):
                x_t, _ = self._labelled(self.disc_lab, cfg.batch_labelled, self.rng["jit_disc"])
                x_u = self._unlabelled(self.disc_unlab, cfg.batch_unlabelled, self.rng["jit_disc"])
                losses.append(discriminator_step(self.f, self.D, x_t, x_u, self.opt_d, cfg.disc_input))
                self.log.disc_updates += 1
            disc_loss = float(np.mean(losses))
            if not np.isfinite(disc_loss):
                self._diverged("disc_loss", disc_loss)
            x_t, lab_t = self._labelled(self.net_lab, cfg.batch_labelled, self.rng["jit_net_lab"])
            x_u = self._unlabelled(self.net_unlab, cfg.batch_unlabelled, self.rng["jit_net_unlab"])
            sup, adv = network_step(self.f, self.D, x_t, lab_t, x_u, cfg.alpha, self.opt_f, cfg.disc_input)
        else:
            x_t, lab_t = self._labelled(self.net_lab, cfg.batch_baseline, self.rng["jit_net_lab"])
            sup, _ = network_step(self.f, None, x_t, lab_t, None, 0.0, self.opt_f)
        self.log.net_updates += 1
        for what, value in (("sup_loss", sup), ("adv_loss", adv)):
            if value is not None and not np.isfinite(value):
                self._diverged(what, value)
        rec = StepRecord(
            self.iteration, lr, float(np.float32(sup)),
            None if adv is None else float(np.float32(adv)),
            None if disc_loss is None else float(np.float32(disc_loss)),
        )
        self.log.records.append(rec)
        self.iteration += 1
        return rec

    def run(self, test: Optional[Dataset] = None, callback: Optional[Callable] = None):
        total = self.cfg.schedule.total
        while self.iteration < total:
            rec = self.step()
            done = self.iteration
            if test is not None and (
                done == total or (self.cfg.eval_every and done % self.cfg.eval_every == 0)
            ):
                self.log.evals.append((done, evaluate(self.f, test, self.cfg.eval_batch)))
            if callback is not None:
                callback(self, rec)
        return self.f, self.log


def train(cfg: TrainConfig, split: DatasetSplit, test: Optional[Dataset] = None):
    """Run the full schedule and return the final network (no model selection) and its log."""
    return Trainer(cfg, split).run(test)
