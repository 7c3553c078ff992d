"""SGD with momentum and weight decay, plus the staged learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autograd import ContractError, Tensor

FULL_SCHEDULE = ((10_000, 0.1), (4_000, 0.05), (4_000, 0.025), (2_000, 0.0125))


@dataclass(frozen=True)
class LrSchedule:
    stages: tuple[tuple[int, float], ...] = FULL_SCHEDULE

    def __post_init__(self):
        if not self.stages:
            raise ContractError("schedule needs at least one stage")
        for iters, lr in self.stages:
            if iters <= 0 or lr <= 0:
                raise ContractError(f"invalid schedule stage ({iters}, {lr})")

    @property
    def total(self) -> int:
        return sum(it for it, _ in self.stages)

    def scaled(self, divisor: int) -> "LrSchedule":
        """Same learning rates, iteration counts divided by ``divisor``."""
        return LrSchedule(tuple((max(1, it // divisor), lr) for it, lr in self.stages))


def lr_at(schedule: LrSchedule, iteration: int) -> float:
    if iteration < 0:
        raise ContractError("iteration must be non-negative")
    end = 0
    for iters, lr in schedule.stages:
        end += iters
        if iteration < end:
            return lr
    raise ContractError(f"iteration {iteration} beyond schedule length {schedule.total}")


def decays(name: str) -> bool:
    """Weight decay applies to conv/linear weights only."""
    return name.endswith(".weight")


@dataclass
class SgdState:
    """Momentum buffers keyed by parameter name."""

    mu: float = 0.9
    beta_wd: float = 1e-3
    lr: float = 0.1
    momentum_buffers: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: dict[str, Tensor], **kw) -> "SgdState":
        st = cls(**kw)
        st.momentum_buffers = {k: np.zeros_like(t.data) for k, t in params.items()}
        return st


def update(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: SgdState) -> None:
    """One step of g += beta*w (weights only); buf = mu*buf + g; w -= lr*buf."""
    missing = [k for k in params if grads.get(k) is None]
    if missing:
        raise ContractError(f"missing gradient for {', '.join(missing)}")
    for name, p in params.items():
        dt = p.dtype.type
        g = np.asarray(grads[name], dtype=p.dtype)
        if state.beta_wd and decays(name):
            g = g + dt(state.beta_wd) * p.data
        buf = state.momentum_buffers.get(name)
        if buf is None:
            buf = state.momentum_buffers[name] = np.zeros_like(p.data)
        buf *= dt(state.mu)
        buf += g
        p.data = p.data - dt(state.lr) * buf


def step(params: dict[str, Tensor], state: SgdState) -> None:
    """Apply :func:`update` with gradients read from ``.grad`` (absent grads count as zero)."""
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in params.items()}
    update(params, grads, state)
