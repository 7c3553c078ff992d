"""Central finite-difference checks of every backward rule, in float64."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autograd as ad
from . import layers as L
from .autograd import Rng, Tensor
from .models import DiscConfig, SegNetConfig, build_discriminator, build_segnet
from .objectives import adversarial_loss, discriminator_loss, supervised_loss

STEP = 1e-3
PRIMITIVE_TOL = 1e-5
MODEL_TOL = 1e-4


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """||a - b|| / max(||a||, ||b||), 0 when both vanish."""
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    if denom == 0:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)


def numeric_grad(fn: Callable[[], float], arr: np.ndarray, h: float = STEP) -> np.ndarray:
    """Central differences of ``fn`` w.r.t. every element of ``arr`` (mutated in place, then restored)."""
    grad = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = fn()
        flat[i] = orig - h
        fm = fn()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def check(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray], h: float = STEP) -> float:
    """Max relative error between reverse-mode and finite-difference gradients.

    ``fn`` receives one float64 Tensor per array and returns a scalar Tensor.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    tensors = [Tensor(a, requires_grad=True, dtype=np.float64) for a in arrays]
    for t, a in zip(tensors, arrays):
        t.data = a  # share storage so numeric_grad perturbations are seen
    ad.reset_tape()
    ad.backward(fn(*tensors))
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]

    def value() -> float:
        with ad.no_grad():
            return fn(*tensors).item()

    return max(relative_error(g, numeric_grad(value, a, h)) for g, a in zip(analytic, arrays))


def projected(op: Callable[..., Tensor], out_shape_rng: Rng) -> Callable[..., Tensor]:
    """Turn a tensor-valued op into a scalar via a fixed random projection."""
    cache = {}

    def fn(*ts):
        out = op(*ts)
        if out.shape not in cache:
            cache[out.shape] = out_shape_rng.normal(size=out.shape)
        return ad.sum_(ad.mul(out, Tensor(cache[out.shape], dtype=np.float64)))

    return fn


@dataclass
class CheckResult:
    name: str
    error: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.error) and self.error < self.tol)


def _away_from_zero(rng: Rng, shape, scale: float = 1.0) -> np.ndarray:
    """Unit-magnitude values kept clear of kinks at 0."""
    mag = rng.uniform(0.2, 1.0, size=shape)
    sign = np.where(rng.uniform(size=shape) < 0.5, -1.0, 1.0)
    return scale * mag * sign


def _distinct(rng: Rng, shape, scale: float = 1.0) -> np.ndarray:
    """Values with a minimum spacing well above the finite-difference step."""
    n = int(np.prod(shape))
    return scale * (rng.permutation(n).reshape(shape) / n * 2 - 1 + 0.01)


def primitive_cases(rng: Rng, scale: float = 1.0):
    u = lambda *s: rng.uniform(-scale, scale, size=s)  # noqa: E731
    pos = lambda *s: rng.uniform(0.5, 1.5, size=s) * scale  # noqa: E731
    P = lambda op: projected(op, rng)  # noqa: E731
    yield "add", P(ad.add), [u(3, 4), u(1, 4)]
    yield "sub", P(ad.sub), [u(3, 4), u(3, 1)]
    yield "mul", P(ad.mul), [u(2, 3, 4), u(2, 1, 4)]
    yield "scale", P(lambda a: ad.scale(a, -1.7)), [u(5)]
    yield "neg", P(ad.neg), [u(5)]
    yield "exp", P(ad.exp), [u(6)]
    yield "log", P(ad.log), [pos(6)]
    yield "softplus", P(ad.softplus), [u(6)]
    yield "sigmoid", P(ad.sigmoid), [u(6)]
    yield "relu", P(ad.relu), [_away_from_zero(rng, (8,), scale)]
    yield "leaky_relu", P(lambda a: ad.leaky_relu(a, 0.2)), [_away_from_zero(rng, (8,), scale)]
    yield "sum", P(lambda a: ad.sum_(a, axis=1)), [u(3, 4)]
    yield "mean", P(lambda a: ad.mean(a, axis=(0, 2))), [u(3, 4, 2)]
    yield "max", P(lambda a: ad.max_(a, axis=1)), [_distinct(rng, (3, 5), scale)]
    yield "reshape", P(lambda a: ad.reshape(a, (6, 2))), [u(3, 4)]
    yield "concat", P(lambda a, b: ad.concat([a, b], axis=0)), [u(2, 3), u(1, 3)]
    yield "rows", P(lambda a: ad.rows(a, 1, 3)), [u(4, 2)]
    yield "log_softmax", P(lambda a: ad.log_softmax(a, axis=1)), [u(2, 4, 3)]
    yield "softmax", P(lambda a: ad.softmax(a, axis=1)), [u(2, 4, 3)]


def layer_cases(rng: Rng, scale: float = 1.0):
    u = lambda *s: rng.uniform(-scale, scale, size=s)  # noqa: E731
    P = lambda op: projected(op, rng)  # noqa: E731
    yield "conv2d", P(lambda x, w, b: L.conv2d(x, w, b, 1, 1)), [u(1, 2, 5, 5), u(3, 2, 3, 3), u(3)]
    yield "conv2d_stride2", P(lambda x, w, b: L.conv2d(x, w, b, 2, 1)), [u(2, 2, 6, 6), u(3, 2, 3, 3), u(3)]
    rm, rv = np.zeros(3), np.ones(3)
    yield "batch_norm_train", P(lambda x, g, b: L.batch_norm(x, g, b, rm, rv, True, update_stats=False)), [
        u(4, 3, 2, 2), rng.uniform(0.5, 1.5, size=3), u(3)]
    rm2, rv2 = rng.normal(size=3) * 0.1, rng.uniform(0.5, 1.5, size=3)
    yield "batch_norm_eval", P(lambda x, g, b: L.batch_norm(x, g, b, rm2, rv2, False)), [
        u(2, 3, 2, 2), rng.uniform(0.5, 1.5, size=3), u(3)]
    yield "maxpool2d", P(lambda x: L.maxpool2d(x, 2)[0]), [_distinct(rng, (1, 2, 4, 4), scale)]
    idx_src = _distinct(rng, (1, 2, 4, 4))
    _, idx = L.maxpool2d(Tensor(idx_src), 2)
    yield "maxunpool2d", P(lambda y: L.maxunpool2d(y, idx, 2)), [u(1, 2, 2, 2)]
    yield "global_avg_pool", P(L.global_avg_pool), [u(2, 3, 4, 4)]
    yield "linear", P(L.linear), [u(4, 5), u(3, 5), u(3)]
    labels = rng.integers(0, 3, size=(2, 2, 2))
    yield "supervised_loss", lambda z: supervised_loss(z, labels), [u(2, 3, 2, 2)]
    yield "discriminator_loss", discriminator_loss, [u(3, 1) * 3, u(4, 1) * 3]
    yield "adversarial_loss", adversarial_loss, [u(3, 1) * 3]


def _model_check(net, make_loss, rng: Rng, h: float = STEP) -> float:
    """Gradient check over all parameters of ``net`` (cast to float64)."""
    net.astype(np.float64)
    params = list(net.named_params().values())
    for p in params:
        p.data = np.array(p.data, dtype=np.float64)
    ad.reset_tape()
    net.zero_grad()
    ad.backward(make_loss())
    analytic = [p.grad.copy() for p in params]

    def value():
        with ad.no_grad():
            return make_loss().item()

    numeric = [numeric_grad(value, p.data, h) for p in params]
    # whole-vector error: conv biases ahead of batch norm have an exactly zero gradient
    return relative_error(
        np.concatenate([g.ravel() for g in analytic]), np.concatenate([g.ravel() for g in numeric])
    )


def model_cases(rng: Rng, scale: float = 1.0):
    seg_cfg = SegNetConfig(num_blocks=1, channels=2, kernel=3, num_classes=3, input_channels=2)
    x = Tensor(rng.uniform(-scale, scale, size=(2, 2, 8, 8)), dtype=np.float64)
    labels = rng.integers(0, 3, size=(2, 8, 8))

    def segnet_check():
        net = build_segnet(seg_cfg, rng)
        return _model_check(net, lambda: supervised_loss(net(x, update_stats=False), labels), rng)

    disc_cfg = DiscConfig(num_blocks=1, channels=2, kernel=3, stride=2)
    y = Tensor(rng.uniform(0, scale, size=(4, 3, 8, 8)), dtype=np.float64)

    def disc_check():
        net = build_discriminator(disc_cfg, rng, 3)
        return _model_check(
            net, lambda: discriminator_loss(*_split(net(y, update_stats=False))), rng
        )

    yield "segnet_tiny", segnet_check
    yield "discriminator_tiny", disc_check


def _split(z: Tensor):
    n = z.shape[0] // 2
    return ad.rows(z, 0, n), ad.rows(z, n, z.shape[0])


def run_suite(seed: int = 0, scale: float = 1.0) -> list[CheckResult]:
    rng = Rng(seed)
    results = []
    for name, fn, arrays in list(primitive_cases(rng, scale)) + list(layer_cases(rng, scale)):
        results.append(CheckResult(name, check(fn, arrays), PRIMITIVE_TOL))
    for name, run in model_cases(rng, scale):
        results.append(CheckResult(name, run(), MODEL_TOL))
    return results


def format_report(results: list[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'check':<{width}}  max_rel_err  tol      status"]
    for r in results:
        lines.append(f"{r.name:<{width}}  {r.error:.3e}    {r.tol:.0e}    {'PASS' if r.passed else 'FAIL'}")
    n_pass = sum(r.passed for r in results)
    lines.append(f"{n_pass}/{len(results)} checks passed")
    return "\n".join(lines)
