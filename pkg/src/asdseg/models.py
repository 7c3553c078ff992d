"""Encoder-decoder segmentation network and the binary output discriminator."""

from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np

from .autograd import ContractError, Rng, Tensor, leaky_relu, relu
from .layers import BatchNorm2d, Conv2d, Layer, Linear, global_avg_pool, maxpool2d, maxunpool2d


@dataclass
class SegNetConfig:
    num_blocks: int = 2
    channels: int = 16
    kernel: int = 3
    num_classes: int = 4
    input_channels: int = 3
    decoder_relu: bool = False

    def validate(self) -> None:
        if self.num_blocks < 1 or self.channels < 1 or self.input_channels < 1:
            raise ContractError(f"invalid segnet config {self}")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ContractError(f"segnet kernel must be odd, got {self.kernel}")
        if self.num_classes < 2:
            raise ContractError("segnet needs at least 2 classes")


@dataclass
class DiscConfig:
    num_blocks: int = 2
    channels: int = 16
    kernel: int = 3
    stride: int = 2
    lrelu_slope: float = 0.2

    def validate(self) -> None:
        if self.num_blocks < 1 or self.channels < 1:
            raise ContractError(f"invalid discriminator config {self}")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ContractError(f"discriminator kernel must be odd, got {self.kernel}")
        if self.stride < 2:
            raise ContractError("discriminator stride must be >= 2")
        if not 0 < self.lrelu_slope < 1:
            raise ContractError("lrelu_slope must lie in (0, 1)")


class Network:
    """Ordered named layers plus the parameter/buffer registry built from them."""

    def __init__(self):
        self.layers: dict[str, Layer] = {}
        self.training = True

    def add(self, name: str, layer: Layer) -> Layer:
        if name in self.layers:
            raise ContractError(f"duplicate layer name {name!r}")
        self.layers[name] = layer
        return layer

    def named_params(self) -> dict[str, Tensor]:
        return {
            f"{lname}.{pname}": t
            for lname, layer in self.layers.items()
            for pname, t in layer.params().items()
        }

    def named_buffers(self) -> dict[str, np.ndarray]:
        return {
            f"{lname}.{bname}": b
            for lname, layer in self.layers.items()
            for bname, b in layer.buffers().items()
        }

    def parameters(self) -> list[Tensor]:
        return list(self.named_params().values())

    def num_params(self) -> int:
        return sum(t.size for t in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        """Copies of every parameter and buffer, in registry order."""
        state = {k: t.data.copy() for k, t in self.named_params().items()}
        state.update({k: b.copy() for k, b in self.named_buffers().items()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params, buffers = self.named_params(), self.named_buffers()
        expected = {k: t.shape for k, t in params.items()} | {k: b.shape for k, b in buffers.items()}
        problems = [f"missing {k}" for k in expected if k not in state]
        problems += [f"unexpected {k}" for k in state if k not in expected]
        problems += [
            f"{k}: shape {tuple(state[k].shape)} != {tuple(expected[k])}"
            for k in state
            if k in expected and tuple(state[k].shape) != tuple(expected[k])
        ]
        if problems:
            raise ContractError("state mismatch: " + "; ".join(problems))
        for k, t in params.items():
            t.data = np.array(state[k], dtype=t.dtype)
        for k, b in buffers.items():
            b[...] = state[k]

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.grad = None

    def train(self) -> "Network":
        self._set_mode(True)
        return self

    def eval(self) -> "Network":
        self._set_mode(False)
        return self

    def _set_mode(self, training: bool) -> None:
        self.training = training
        for layer in self.layers.values():
            if isinstance(layer, BatchNorm2d):
                layer.training = training

    @contextlib.contextmanager
    def frozen(self):
        """Temporarily exclude the parameters from gradient recording."""
        params = self.parameters()
        flags = [t.requires_grad for t in params]
        for t in params:
            t.requires_grad = False
        try:
            yield self
        finally:
            for t, f in zip(params, flags):
                t.requires_grad = f

    def astype(self, dtype) -> "Network":
        """Cast parameters (not buffers) in place; used by gradient checks."""
        for t in self.parameters():
            t.data = t.data.astype(dtype)
        return self

    def init_params(self, rng: Rng) -> None:
        for layer in self.layers.values():
            layer.init(rng)


def init_params(net: Network, rng: Rng) -> None:
    """He fan-in uniform weights, zero biases, unit BN scale and zero shift."""
    net.init_params(rng)


class SegNet(Network):
    """num_blocks x [conv-BN-ReLU-MP(2)] then num_blocks x [MU(2)-conv-BN], 1x1 conv head."""

    def __init__(self, cfg: SegNetConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        c_in = cfg.input_channels
        for i in range(cfg.num_blocks):
            self.add(f"enc{i}.conv", Conv2d(c_in, cfg.channels, cfg.kernel))
            self.add(f"enc{i}.bn", BatchNorm2d(cfg.channels))
            c_in = cfg.channels
        for j in range(cfg.num_blocks):
            self.add(f"dec{j}.conv", Conv2d(cfg.channels, cfg.channels, cfg.kernel))
            self.add(f"dec{j}.bn", BatchNorm2d(cfg.channels))
        self.add("head", Conv2d(cfg.channels, cfg.num_classes, 1))

    def __call__(self, x: Tensor, update_stats: bool = True) -> Tensor:
        nb = self.cfg.num_blocks
        if x.ndim != 4 or x.shape[1] != self.cfg.input_channels:
            raise ContractError(f"expected N x {self.cfg.input_channels} x H x W input, got {x.shape}")
        if x.shape[2] % 2**nb or x.shape[3] % 2**nb:
            raise ContractError(f"input extent {x.shape[2:]} not divisible by 2^{nb}")
        indices = []
        h = x
        for i in range(nb):
            h = self.layers[f"enc{i}.conv"](h)
            h = relu(self.layers[f"enc{i}.bn"](h, update_stats))
            h, idx = maxpool2d(h, 2)
            indices.append(idx)
        for j in range(nb):
            h = maxunpool2d(h, indices[nb - 1 - j], 2)
            h = self.layers[f"dec{j}.conv"](h)
            h = self.layers[f"dec{j}.bn"](h, update_stats)
            if self.cfg.decoder_relu:
                h = relu(h)
        return self.layers["head"](h)


class Discriminator(Network):
    """num_blocks x [strided conv-BN-LReLU], global average pooling, linear to one logit."""

    def __init__(self, cfg: DiscConfig, in_channels: int):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        c_in = in_channels
        for i in range(cfg.num_blocks):
            self.add(f"block{i}.conv", Conv2d(c_in, cfg.channels, cfg.kernel, stride=cfg.stride))
            self.add(f"block{i}.bn", BatchNorm2d(cfg.channels))
            c_in = cfg.channels
        self.add("fc", Linear(cfg.channels, 1))
        self.in_channels = in_channels

    def features(self, y: Tensor, update_stats: bool = True) -> Tensor:
        """Output of the last conv block, before pooling."""
        if y.ndim != 4 or y.shape[1] != self.in_channels:
            raise ContractError(f"expected N x {self.in_channels} x H x W input, got {y.shape}")
        h = y
        for i in range(self.cfg.num_blocks):
            h = self.layers[f"block{i}.conv"](h)
            h = leaky_relu(self.layers[f"block{i}.bn"](h, update_stats), self.cfg.lrelu_slope)
        return h

    def head(self, feats: Tensor) -> Tensor:
        return self.layers["fc"](global_avg_pool(feats))

    def __call__(self, y: Tensor, update_stats: bool = True) -> Tensor:
        return self.head(self.features(y, update_stats))


def build_segnet(cfg: SegNetConfig, rng: Rng) -> SegNet:
    net = SegNet(cfg)
    init_params(net, rng)
    return net


def build_discriminator(cfg: DiscConfig, rng: Rng, in_channels: int) -> Discriminator:
    net = Discriminator(cfg, in_channels)
    init_params(net, rng)
    return net
