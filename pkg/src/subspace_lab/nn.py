"""Layers and autoencoder builders on top of the tensor engine."""

from __future__ import annotations

import math
from collections.abc import Iterator
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .errors import ConfigError, DimensionError
from .tensor import Tensor


class Module:
    training = True

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        return iter(())

    def named_buffers(self) -> Iterator[tuple[str, np.ndarray]]:
        return iter(())

    def train(self, mode: bool = True):
        self.training = mode
        return self

    def eval(self):
        return self.train(False)

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)

    def forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {k: v.data.copy() for k, v in self.named_parameters()}
        state.update({k: v.copy() for k, v in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        for key, value in state.items():
            if key in params:
                target = params[key].data
            elif key in buffers:
                target = buffers[key]
            else:
                raise KeyError(f"unexpected state key {key!r}")
            if target.shape != value.shape:
                raise DimensionError(f"{key}: stored shape {value.shape} != {target.shape}")
            target[...] = value
        missing = (set(params) | set(buffers)) - set(state)
        if missing:
            raise KeyError(f"missing state keys {sorted(missing)}")


def _glorot(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, bias: bool = True, init: str = "glorot"):
        if init == "glorot":
            w = _glorot(rng, (out_features, in_features), in_features, out_features)
        elif init == "identity":
            w = np.eye(out_features, in_features)
        else:
            raise ConfigError(f"unknown init {init!r}")
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(out_features), requires_grad=True) if bias else None

    def named_parameters(self):
        yield "weight", self.weight
        if self.bias is not None:
            yield "bias", self.bias

    def forward(self, x):
        return ops.linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, stride: int, rng: np.random.Generator, bias: bool = True):
        fan_in = in_channels * kernel_size**2
        fan_out = out_channels * kernel_size**2
        self.weight = Tensor(
            _glorot(rng, (out_channels, in_channels, kernel_size, kernel_size), fan_in, fan_out), requires_grad=True
        )
        self.bias = Tensor(np.zeros(out_channels), requires_grad=True) if bias else None
        self.stride = stride

    def named_parameters(self):
        yield "weight", self.weight
        if self.bias is not None:
            yield "bias", self.bias

    def forward(self, x):
        out = ops.conv2d(x, self.weight, self.stride)
        return out if self.bias is None else ops.add_bias(out, self.bias)


class Deconv2d(Module):
    """Transposed convolution mapping ``in_channels`` to ``out_channels`` at ``output_hw``."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int,
        stride: int,
        output_hw: tuple[int, int],
        rng: np.random.Generator,
        bias: bool = True,
    ):
        fan_in = in_channels * kernel_size**2
        fan_out = out_channels * kernel_size**2
        self.weight = Tensor(
            _glorot(rng, (in_channels, out_channels, kernel_size, kernel_size), fan_in, fan_out), requires_grad=True
        )
        self.bias = Tensor(np.zeros(out_channels), requires_grad=True) if bias else None
        self.stride = stride
        self.output_hw = tuple(output_hw)

    def named_parameters(self):
        yield "weight", self.weight
        if self.bias is not None:
            yield "bias", self.bias

    def forward(self, x):
        out = ops.deconv2d(x, self.weight, self.stride, self.output_hw)
        return out if self.bias is None else ops.add_bias(out, self.bias)


class BatchNorm(Module):
    def __init__(self, num_features: int, eps: float = 1e-5, momentum: float = 0.9):
        self.gamma = Tensor(np.ones(num_features), requires_grad=True)
        self.beta = Tensor(np.zeros(num_features), requires_grad=True)
        self.running_mean = np.zeros(num_features)
        self.running_var = np.ones(num_features)
        self.eps = eps
        self.momentum = momentum

    def named_parameters(self):
        yield "gamma", self.gamma
        yield "beta", self.beta

    def named_buffers(self):
        yield "running_mean", self.running_mean
        yield "running_var", self.running_var

    def forward(self, x):
        return ops.batchnorm(
            x,
            self.gamma,
            self.beta,
            self.running_mean,
            self.running_var,
            eps=self.eps,
            mode="train" if self.training else "eval",
            momentum=self.momentum,
        )


class Activation(Module):
    def __init__(self, kind: str):
        ops.activation(Tensor(0.0), kind)  # validates kind
        self.kind = kind

    def forward(self, x):
        return ops.activation(x, self.kind)


class Flatten(Module):
    def forward(self, x):
        return ops.flatten(x)


class Reshape(Module):
    def __init__(self, shape: tuple[int, ...]):
        self.shape = tuple(shape)

    def forward(self, x):
        return ops.reshape(x, (x.shape[0], *self.shape))


class Sequential(Module):
    def __init__(self, *layers: Module):
        self.layers = list(layers)

    def named_parameters(self):
        for i, layer in enumerate(self.layers):
            for name, p in layer.named_parameters():
                yield f"{i}.{name}", p

    def named_buffers(self):
        for i, layer in enumerate(self.layers):
            for name, b in layer.named_buffers():
                yield f"{i}.{name}", b

    def train(self, mode: bool = True):
        self.training = mode
        for layer in self.layers:
            layer.train(mode)
        return self

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x


@dataclass
class Autoencoder(Module):
    """Encoder/decoder pair; the encoder output is flat [n, latent_dim]."""

    encoder: Sequential
    decoder: Sequential
    input_shape: tuple[int, ...]
    latent_dim: int
    spec: dict = field(default_factory=dict)

    def named_parameters(self):
        for name, p in self.encoder.named_parameters():
            yield f"encoder.{name}", p
        for name, p in self.decoder.named_parameters():
            yield f"decoder.{name}", p

    def named_buffers(self):
        for name, b in self.encoder.named_buffers():
            yield f"encoder.{name}", b
        for name, b in self.decoder.named_buffers():
            yield f"decoder.{name}", b

    def train(self, mode: bool = True):
        self.training = mode
        self.encoder.train(mode)
        self.decoder.train(mode)
        return self

    def encode(self, x: Tensor) -> Tensor:
        return self.encoder(x)

    def decode(self, z: Tensor) -> Tensor:
        return self.decoder(z)

    def forward(self, x):
        return self.decode(self.encode(x))


def build_dense_autoencoder(
    input_dim: int,
    widths: list[int],
    activation: str = "relu",
    batchnorm: bool = False,
    bias: bool = True,
    latent_activation: bool = False,
    init: str = "glorot",
    seed: int = 0,
) -> Autoencoder:
    """Fully connected autoencoder; ``widths`` ends with the latent width.

    Hidden layers get (batchnorm +) activation; the latent layer gets the
    activation only if ``latent_activation``. The decoder mirrors the
    encoder without batchnorm and ends in a plain linear layer.
    """
    if not widths:
        raise ConfigError("widths must contain at least the latent width")
    rng = np.random.default_rng(seed)
    enc: list[Module] = []
    sizes = [input_dim, *widths]
    for i in range(len(widths)):
        enc.append(Linear(sizes[i], sizes[i + 1], rng, bias=bias, init=init))
        last = i == len(widths) - 1
        if batchnorm and not last:
            enc.append(BatchNorm(sizes[i + 1]))
        if not last or latent_activation:
            enc.append(Activation(activation))
    dec: list[Module] = []
    back = sizes[::-1]
    for i in range(len(widths)):
        dec.append(Linear(back[i], back[i + 1], rng, bias=bias, init=init))
        if i < len(widths) - 1:
            dec.append(Activation(activation))
    spec = dict(kind="dense", input_dim=input_dim, widths=list(widths), activation=activation,
                batchnorm=batchnorm, bias=bias, latent_activation=latent_activation, init=init, seed=seed)
    return Autoencoder(Sequential(*enc), Sequential(*dec), (input_dim,), widths[-1], spec)


def build_conv_autoencoder(
    input_shape: tuple[int, int, int],
    channels: list[int],
    kernel_size: int = 3,
    stride: int = 2,
    activation: str = "gelu",
    batchnorm: bool = True,
    seed: int = 0,
) -> Autoencoder:
    """Conv encoder (conv, batchnorm, activation per layer) + mirrored deconv decoder."""
    if not channels:
        raise ConfigError("channels must be non-empty")
    rng = np.random.default_rng(seed)
    c, h, w = input_shape
    hw = [(h, w)]
    enc: list[Module] = []
    in_c = c
    for li, out_c in enumerate(channels):
        enc.append(Conv2d(in_c, out_c, kernel_size, stride, rng))
        if batchnorm:
            enc.append(BatchNorm(out_c))
        enc.append(Activation(activation))
        h, w = -(-h // stride), -(-w // stride)
        if min(h, w) < kernel_size and li < len(channels) - 1:
            raise ConfigError(f"feature map {h}x{w} too small for kernel {kernel_size}")
        hw.append((h, w))
        in_c = out_c
    enc.append(Flatten())
    latent_shape = (channels[-1], h, w)
    dec: list[Module] = [Reshape(latent_shape)]
    chans = [c, *channels][::-1]
    sizes = hw[::-1]
    for i in range(len(channels)):
        dec.append(Deconv2d(chans[i], chans[i + 1], kernel_size, stride, sizes[i + 1], rng))
        if i < len(channels) - 1:
            dec.append(Activation(activation))
    spec = dict(kind="conv", input_shape=list(input_shape), channels=list(channels), kernel_size=kernel_size,
                stride=stride, activation=activation, batchnorm=batchnorm, seed=seed)
    return Autoencoder(Sequential(*enc), Sequential(*dec), tuple(input_shape), int(np.prod(latent_shape)), spec)


def build_autoencoder(spec: dict) -> Autoencoder:
    spec = dict(spec)
    kind = spec.pop("kind")
    if kind == "dense":
        return build_dense_autoencoder(**spec)
    if kind == "conv":
        spec["input_shape"] = tuple(spec["input_shape"])
        return build_conv_autoencoder(**spec)
    raise ConfigError(f"unknown autoencoder kind {kind!r}")
