"""Network building blocks: parameter containers, the U-Net double conv,
squeeze-and-excitation, and the SE-connection fusion module."""

from __future__ import annotations

import numpy as np

from .errors import ConfigurationError
from .tensor import (
    Parameter,
    Tensor,
    channel_scale,
    concat_channels,
    conv2d,
    default_dtype,
    global_avg_pool,
    linear,
    relu,
    sigmoid,
    upsample_bilinear2x,
)


class Module:
    """Minimal parameter container.

    Parameters and child modules are discovered from instance attributes in
    assignment order, so names and ordering are stable across builds.
    """

    def named_parameters(self, prefix: str = ""):
        for attr, value in vars(self).items():
            path = f"{prefix}.{attr}" if prefix else attr
            if isinstance(value, Parameter):
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path)
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}")
                    elif isinstance(item, Parameter):
                        yield f"{path}.{i}", item

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def freeze(self) -> None:
        for p in self.parameters():
            p.frozen = True
            p.grad = None

    def unfreeze(self) -> None:
        for p in self.parameters():
            p.frozen = False

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _he_normal(rng, shape, fan_in):
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


class Conv2d(Module):
    """Square odd-kernel convolution with "same" padding and stride 1."""

    def __init__(self, cin: int, cout: int, kernel: int = 3, rng=None):
        if kernel % 2 == 0:
            raise ConfigurationError(f"kernel size must be odd, got {kernel}")
        rng = rng if rng is not None else np.random.default_rng(0)
        dtype = default_dtype()
        self.weight = Parameter(_he_normal(rng, (cout, cin, kernel, kernel), cin * kernel * kernel).astype(dtype))
        self.bias = Parameter(np.zeros(cout, dtype=dtype))
        self.kernel = kernel

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, stride=1, padding=self.kernel // 2)


class Linear(Module):
    def __init__(self, fin: int, fout: int, rng=None, gain: float = 2.0):
        rng = rng if rng is not None else np.random.default_rng(0)
        dtype = default_dtype()
        self.weight = Parameter((rng.standard_normal((fout, fin)) * np.sqrt(gain / fin)).astype(dtype))
        self.bias = Parameter(np.zeros(fout, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


class DoubleConv(Module):
    """(3x3 conv -> relu) twice; the first conv changes the width."""

    def __init__(self, cin: int, cout: int, rng=None):
        self.conv1 = Conv2d(cin, cout, 3, rng)
        self.conv2 = Conv2d(cout, cout, 3, rng)

    def forward(self, x: Tensor) -> Tensor:
        return relu(self.conv2(relu(self.conv1(x))))


def effective_se_ratio(channels: int, ratio: int, min_hidden: int = 4) -> int:
    """Largest divisor of ``channels`` not above ``ratio`` that keeps at least
    ``min_hidden`` units in the squeeze layer (1 for very narrow inputs)."""
    if ratio < 1:
        raise ConfigurationError(f"SE ratio must be positive, got {ratio}")
    best = 1
    for r in range(1, ratio + 1):
        if channels % r == 0 and channels // r >= min_hidden:
            best = r
    return best


class SEBlock(Module):
    """Squeeze-and-excitation: gate each channel by
    ``sigmoid(expand(relu(reduce(global_avg_pool(x)))))``."""

    def __init__(self, channels: int, ratio: int, rng=None):
        if ratio < 1 or channels % ratio:
            raise ConfigurationError(f"SE ratio {ratio} must divide channel count {channels}")
        self.ratio = ratio
        self.reduce = Linear(channels, channels // ratio, rng, gain=2.0)
        self.expand = Linear(channels // ratio, channels, rng, gain=1.0)

    @property
    def channels(self) -> int:
        return self.expand.weight.shape[0]

    def scale(self, x: Tensor) -> Tensor:
        """Per-(sample, channel) gate in (0, 1), shape (N, C)."""
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ConfigurationError(f"SE block built for {self.channels} channels, got input {x.shape}")
        return sigmoid(self.expand(relu(self.reduce(global_avg_pool(x)))))

    def forward(self, x: Tensor) -> Tensor:
        return channel_scale(x, self.scale(x))


class SECFuse(Module):
    """SE-connection: fuse a shallow map (level 1) with the next deeper
    fused map (level 2) and re-weight channels.

    level2 -> 1x1 conv to C1 -> bilinear 2x -> concat with level1 (2*C1)
    -> 3x3 conv to C1 -> relu -> SE gate.
    """

    def __init__(self, c1: int, c2: int, se_ratio: int, rng=None):
        self.match = Conv2d(c2, c1, 1, rng)
        self.fuse = Conv2d(2 * c1, c1, 3, rng)
        self.se = SEBlock(c1, se_ratio, rng)

    def forward(self, level1: Tensor, level2: Tensor) -> Tensor:
        if level1.ndim != 4 or level2.ndim != 4:
            raise ConfigurationError("SEC inputs must be NCHW")
        h1, w1 = level1.shape[2:]
        h2, w2 = level2.shape[2:]
        if (2 * h2, 2 * w2) != (h1, w1):
            raise ConfigurationError(
                f"level2 extents {h2}x{w2} are not half of level1 extents {h1}x{w1}"
            )
        if level1.shape[1] != self.match.out_channels:
            raise ConfigurationError(
                f"SEC built for {self.match.out_channels} level1 channels, got {level1.shape[1]}"
            )
        lifted = upsample_bilinear2x(self.match(level2))
        fused = relu(self.fuse(concat_channels(level1, lifted)))
        return self.se(fused)
