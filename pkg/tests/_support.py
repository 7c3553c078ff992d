"""Fixtures shared by the unit and acceptance tests."""

import numpy as np

from asdseg.autograd import Rng, Tensor
from asdseg.models import DiscConfig, build_discriminator
from asdseg.optim import SgdState
from asdseg.trainer import discriminator_step


class FixedOutputs:
    """Stand-in for a frozen segmentation net: its "input" already is the logit map."""

    training = True

    def train(self):
        self.training = True

    def eval(self):
        self.training = False

    def __call__(self, x, update_stats=True):
        return Tensor(x.data)


def separable_populations(rng, n=64, k=4, hw=32):
    """Label-like logit maps; the labelled population is four times more confident."""
    def maps(scale):
        lab = rng.integers(0, k, size=(n, hw, hw))
        return np.eye(k, dtype=np.float32)[lab].transpose(0, 3, 1, 2) * np.float32(scale)
    return maps(4.0), maps(1.0)


def disc_losses(seed, steps, lr=0.05, fixed_batch=False, batch=8):
    rng = np.random.default_rng(seed)
    t, u = separable_populations(rng)
    D = build_discriminator(DiscConfig(), Rng(seed), t.shape[1])
    opt = SgdState.for_params(D.named_params(), lr=lr)
    f = FixedOutputs()
    losses = []
    for _ in range(steps):
        if fixed_batch:
            xt, xu = t[:batch], u[:batch]
        else:
            xt, xu = t[rng.integers(0, len(t), batch)], u[rng.integers(0, len(u), batch)]
        losses.append(discriminator_step(f, D, xt, xu, opt))
    return losses


# acceptance verdicts, printed by the terminal-summary hook in conftest.py
ACCEPTANCE_LINES: list[str] = []
