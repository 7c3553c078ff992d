"""Differentiable layers: convolution, batch norm, coupled max-pool/unpool,
global average pooling and fully connected maps.

Functional forms (``conv2d``, ``maxpool2d`` ...) do the numerics and record
backward rules on the tape.  The classes below only own parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autograd import ContractError, Rng, Tensor, leaky_relu, make_result, relu

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


# ------------------------------------------------------------------ functional


def _out_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """(C*K*K) x (N*Ho*Wo) column matrix of a padded N x C x Hp x Wp input."""
    n, c = xp.shape[:2]
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride]
    # N C Ho Wo K K -> C K K N Ho Wo
    return np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3)).reshape(c * k * k, n * ho * wo)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of an N x C x H x W input with O x C x K x K filters."""
    if x.ndim != 4:
        raise ContractError(f"conv2d expects N x C x H x W input, got {x.shape}")
    n, c, h, w = x.shape
    o, ci, k, k2 = weight.shape
    if ci != c or k != k2:
        raise ContractError(f"conv2d channel mismatch: input {x.shape}, weight {weight.shape}")
    if h + 2 * padding < k or w + 2 * padding < k:
        raise ContractError(f"input {x.shape} smaller than kernel {k} with padding {padding}")
    ho, wo = _out_size(h, k, stride, padding), _out_size(w, k, stride, padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(xp, k, stride, ho, wo)
    w2 = weight.data.reshape(o, -1)
    y2 = w2 @ cols
    y2 += bias.data.reshape(o, 1)
    y = np.ascontiguousarray(y2.reshape(o, n, ho, wo).transpose(1, 0, 2, 3))

    def bw(g):
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(o, n * ho * wo)
        gw = (g2 @ cols.T).reshape(weight.shape)
        gb = g2.sum(axis=1)
        gx = None
        if x.requires_grad:
            gcols = (w2.T @ g2).reshape(c, k, k, n, ho, wo)
            gxp = np.zeros((c, n) + xp.shape[2:], dtype=x.dtype)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[:, i, j]
            gx = gxp.transpose(1, 0, 2, 3)
            if padding:
                gx = gx[:, :, padding : padding + h, padding : padding + w]
        return gx, gw, gb

    return make_result("conv2d", y, (x, weight, bias), bw)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    update_stats: bool = True,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> Tensor:
    """Per-channel normalisation over all axes but 1 (biased variance).

    In training mode the running statistics are blended in place unless
    ``update_stats`` is false.
    """
    if x.ndim < 2 or x.shape[1] != gamma.shape[0]:
        raise ContractError(f"batch_norm channel mismatch: {x.shape} vs {gamma.shape}")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, -1) + (1,) * (x.ndim - 2)
    dt = x.dtype.type
    if training:
        count = x.size // x.shape[1]
        if count < 2:
            raise ContractError("batch_norm in training mode needs at least 2 values per channel")
        mu = x.data.mean(axis=axes)
        xc = x.data - mu.reshape(bshape)
        var = (xc * xc).mean(axis=axes)
        if update_stats:
            running_mean *= 1 - momentum
            running_mean += momentum * mu.astype(running_mean.dtype)
            running_var *= 1 - momentum
            running_var += momentum * var.astype(running_var.dtype)
    else:
        mu = running_mean.astype(x.dtype)
        var = running_var.astype(x.dtype)
        xc = x.data - mu.reshape(bshape)
    inv_std = (1.0 / np.sqrt(var + dt(eps))).astype(x.dtype)
    xhat = xc * inv_std.reshape(bshape)
    y = gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape)

    def bw(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        gxhat = g * gamma.data.reshape(bshape)
        if training:
            m = dt(x.size // x.shape[1])
            gx = (inv_std.reshape(bshape) / m) * (
                m * gxhat
                - gxhat.sum(axis=axes).reshape(bshape)
                - xhat * (gxhat * xhat).sum(axis=axes).reshape(bshape)
            )
        else:
            gx = gxhat * inv_std.reshape(bshape)
        return gx, ggamma, gbeta

    return make_result("batch_norm", y, (x, gamma, beta), bw)


@dataclass(frozen=True)
class PoolIndices:
    """Flat H*W offset of each pooled cell's maximum, per (sample, channel)."""

    offsets: np.ndarray  # int64, N x C x H/k x W/k
    input_shape: tuple
    k: int


def maxpool2d(x: Tensor, k: int) -> tuple[Tensor, PoolIndices]:
    """Non-overlapping k x k max pooling; ties go to the smallest row-major offset."""
    n, c, h, w = x.shape
    if h % k or w % k:
        raise ContractError(f"maxpool2d: extent {h}x{w} not divisible by {k}")
    ho, wo = h // k, w // k
    win = x.data.reshape(n, c, ho, k, wo, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, k * k)
    arg = win.argmax(axis=-1)
    y = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    di, dj = np.divmod(arg, k)
    rows = np.arange(ho).reshape(1, 1, ho, 1) * k + di
    cols = np.arange(wo).reshape(1, 1, 1, wo) * k + dj
    offsets = (rows * w + cols).astype(np.int64)
    idx = PoolIndices(offsets, (n, c, h, w), k)

    def bw(g):
        gx = np.zeros((n, c, h * w), dtype=x.dtype)
        np.put_along_axis(gx, offsets.reshape(n, c, -1), g.reshape(n, c, -1), axis=-1)
        return (gx.reshape(n, c, h, w),)

    return make_result("maxpool2d", np.ascontiguousarray(y), (x,), bw), idx


def maxunpool2d(y: Tensor, idx: PoolIndices, k: int) -> Tensor:
    """Write each value back at its recorded argmax position, zeros elsewhere."""
    n, c, h, w = idx.input_shape
    if k != idx.k or y.shape != idx.offsets.shape:
        raise ContractError(
            f"maxunpool2d geometry mismatch: values {y.shape}, k={k}; "
            f"indices {idx.offsets.shape}, k={idx.k}"
        )
    flat_idx = idx.offsets.reshape(n, c, -1)
    out = np.zeros((n, c, h * w), dtype=y.dtype)
    np.put_along_axis(out, flat_idx, y.data.reshape(n, c, -1), axis=-1)

    def bw(g):
        gy = np.take_along_axis(g.reshape(n, c, -1), flat_idx, axis=-1)
        return (gy.reshape(y.shape),)

    return make_result("maxunpool2d", out.reshape(n, c, h, w), (y,), bw)


def global_avg_pool(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    inv = x.dtype.type(1.0 / (h * w))
    y = x.data.mean(axis=(2, 3), dtype=x.dtype)
    return make_result(
        "global_avg_pool", y, (x,),
        lambda g: (np.broadcast_to((g * inv)[:, :, None, None], x.shape),),
    )


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1] or bias.shape != (weight.shape[0],):
        raise ContractError(f"linear shape mismatch: x {x.shape}, weight {weight.shape}, bias {bias.shape}")
    xd, wd = x.data, weight.data
    y = xd @ wd.T + bias.data
    return make_result(
        "linear", y, (x, weight, bias),
        lambda g: (g @ wd, g.T @ xd, g.sum(axis=0)),
    )


# ---------------------------------------------------------------------- layers


def he_uniform(shape: tuple, fan_in: int, rng: Rng) -> np.ndarray:
    """Uniform on [-b, b] with variance 2 / fan_in."""
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class Layer:
    """Owns named parameter tensors and (optionally) non-trainable buffers."""

    def params(self) -> dict[str, Tensor]:
        return {}

    def buffers(self) -> dict[str, np.ndarray]:
        return {}

    def init(self, rng: Rng) -> None:
        pass


class Conv2d(Layer):
    def __init__(self, c_in: int, c_out: int, k: int, stride: int = 1, padding: int | None = None):
        self.c_in, self.c_out, self.k, self.stride = c_in, c_out, k, stride
        self.padding = k // 2 if padding is None else padding
        self.weight = Tensor(np.zeros((c_out, c_in, k, k), np.float32), requires_grad=True)
        self.bias = Tensor(np.zeros(c_out, np.float32), requires_grad=True)

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def init(self, rng):
        self.weight.data = he_uniform(self.weight.shape, self.c_in * self.k * self.k, rng)
        self.bias.data = np.zeros_like(self.bias.data)

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm2d(Layer):
    def __init__(self, channels: int, eps: float = BN_EPS, momentum: float = BN_MOMENTUM):
        self.eps, self.momentum = eps, momentum
        self.gamma = Tensor(np.ones(channels, np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, np.float32), requires_grad=True)
        self.running_mean = np.zeros(channels, np.float32)
        self.running_var = np.ones(channels, np.float32)
        self.training = True

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def init(self, rng):
        self.gamma.data = np.ones_like(self.gamma.data)
        self.beta.data = np.zeros_like(self.beta.data)
        self.running_mean[...] = 0
        self.running_var[...] = 1

    def __call__(self, x: Tensor, update_stats: bool = True) -> Tensor:
        return batch_norm(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            self.training, update_stats, self.momentum, self.eps,
        )


class Linear(Layer):
    def __init__(self, f_in: int, f_out: int):
        self.f_in = f_in
        self.weight = Tensor(np.zeros((f_out, f_in), np.float32), requires_grad=True)
        self.bias = Tensor(np.zeros(f_out, np.float32), requires_grad=True)

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def init(self, rng):
        self.weight.data = he_uniform(self.weight.shape, self.f_in, rng)
        self.bias.data = np.zeros_like(self.bias.data)

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


__all__ = [
    "BN_EPS", "BN_MOMENTUM", "PoolIndices", "conv2d", "batch_norm", "maxpool2d",
    "maxunpool2d", "global_avg_pool", "linear", "he_uniform", "Layer", "Conv2d",
    "BatchNorm2d", "Linear", "relu", "leaky_relu",
]
