"""The six model variants: plain U-Net, U-Net with SE-connection pyramid,
and their two-stage cascades (plain concat or auto-context)."""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np

from .blocks import Conv2d, DoubleConv, Module, SEBlock, SECFuse, effective_se_ratio
from .errors import ConfigurationError
from .tensor import Tensor, concat_channels, max_pool2x2, no_grad, softmax_channels, upsample_bilinear2x


class VariantId(enum.IntEnum):
    Baseline = 0
    BaselineConcat = 1
    BaselineAutoConcat = 2
    BaselineSEC = 3
    BaselineSECConcat = 4
    SECPNet = 5

    @property
    def has_sec(self) -> bool:
        return self in (VariantId.BaselineSEC, VariantId.BaselineSECConcat, VariantId.SECPNet)

    @property
    def is_cascade(self) -> bool:
        return self not in (VariantId.Baseline, VariantId.BaselineSEC)

    @property
    def auto_context(self) -> bool:
        return self in (VariantId.BaselineAutoConcat, VariantId.SECPNet)

    @property
    def label(self) -> str:
        return _LABELS[self]

    @classmethod
    def parse(cls, text: str) -> "VariantId":
        key = text.strip().replace("-", "").replace("+", "").replace("_", "").lower()
        for v in cls:
            if key in (v.name.lower(), str(int(v))):
                return v
        raise ConfigurationError(f"unknown variant {text!r}; choose from {[v.name for v in cls]}")


_LABELS = {
    VariantId.Baseline: "Baseline",
    VariantId.BaselineConcat: "Baseline+concat",
    VariantId.BaselineAutoConcat: "Baseline+auto-concat",
    VariantId.BaselineSEC: "Baseline+SEC",
    VariantId.BaselineSECConcat: "Baseline+SEC-concat",
    VariantId.SECPNet: "SECP-Net",
}


@dataclass(frozen=True)
class NetworkConfig:
    in_channels: int = 1
    num_classes: int = 14
    base_width: int = 64
    depth: int = 4
    se_ratio: int = 16

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ConfigurationError(f"NetworkConfig.{name} must be a positive int, got {value!r}")
        if self.num_classes < 2:
            raise ConfigurationError("num_classes must be at least 2")

    @property
    def widths(self) -> list:
        return [self.base_width * 2**i for i in range(self.depth + 1)]

    @property
    def bottleneck_channels(self) -> int:
        return self.base_width * 2**self.depth

    def check_extent(self, h: int, w: int) -> None:
        step = 2**self.depth
        if h % step or w % step:
            raise ConfigurationError(f"input extents {h}x{w} must be divisible by 2**depth = {step}")

    def to_dict(self) -> dict:
        return asdict(self)


class UNet(Module):
    """U-Net with bilinear upsampling and "same" convolutions.

    With ``se_ratio`` set, an SE block gates the bottleneck and every skip is
    replaced by an SEC module, chained from the deepest stage upward.
    """

    def __init__(self, in_channels, num_classes, base_width, depth, se_ratio=None, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        widths = [base_width * 2**i for i in range(depth + 1)]
        self.depth = depth
        self.encoders = [
            DoubleConv(in_channels if i == 0 else widths[i - 1], widths[i], rng) for i in range(depth)
        ]
        self.bottleneck = DoubleConv(widths[depth - 1], widths[depth], rng)
        self.decoders = [DoubleConv(widths[i + 1] + widths[i], widths[i], rng) for i in range(depth)]
        self.head = Conv2d(widths[0], num_classes, 1, rng)
        self.has_sec = se_ratio is not None
        if self.has_sec:
            self.bottleneck_se = SEBlock(widths[depth], effective_se_ratio(widths[depth], se_ratio), rng)
            self.secs = [
                SECFuse(widths[i], widths[i + 1], effective_se_ratio(widths[i], se_ratio), rng)
                for i in range(depth)
            ]

    @property
    def in_channels(self) -> int:
        return self.encoders[0].conv1.in_channels

    def sec_modules(self) -> list:
        return [self.bottleneck_se, *self.secs] if self.has_sec else []

    def forward(self, x: Tensor, use_sec: bool = True) -> Tensor:
        skips = []
        h = x
        for enc in self.encoders:
            h = enc(h)
            skips.append(h)
            h = max_pool2x2(h)
        h = self.bottleneck(h)
        if self.has_sec and use_sec:
            h = self.bottleneck_se(h)
            level2 = h
            fused = [None] * self.depth
            for i in reversed(range(self.depth)):
                level2 = self.secs[i](skips[i], level2)
                fused[i] = level2
            skips = fused
        for i in reversed(range(self.depth)):
            h = self.decoders[i](concat_channels(upsample_bilinear2x(h), skips[i]))
        return self.head(h)


class Outputs(NamedTuple):
    primary: Tensor
    final: Tensor


class Network(Module):
    """A built variant. ``forward`` always returns primary and final logits;
    they are the same tensor for single-stage variants."""

    def __init__(self, variant: VariantId, cfg: NetworkConfig, seed: int = 0):
        self.variant = VariantId(variant)
        self.config = cfg
        self.sec_enabled = True
        rng = np.random.default_rng(seed)
        k = cfg.num_classes
        self.primary = UNet(
            cfg.in_channels, k, cfg.base_width, cfg.depth,
            se_ratio=cfg.se_ratio if self.variant.has_sec else None, rng=rng,
        )
        if self.variant.is_cascade:
            sec_in = k + (cfg.in_channels if self.variant.auto_context else 0)
            self.secondary = UNet(sec_in, k, cfg.base_width, cfg.depth, se_ratio=None, rng=rng)
        for name, p in self.named_parameters():
            p.name = name

    @property
    def secondary_in_channels(self):
        return self.secondary.in_channels if self.variant.is_cascade else None

    def state_dict(self) -> dict:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict) -> None:
        own = dict(self.named_parameters())
        if set(own) != set(state):
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            raise ConfigurationError(f"state mismatch: missing {missing[:3]}, unexpected {extra[:3]}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ConfigurationError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def forward(self, images) -> Outputs:
        x = images if isinstance(images, Tensor) else Tensor(np.asarray(images))
        if x.ndim != 4:
            raise ConfigurationError(f"images must be NCHW, got shape {x.shape}")
        if x.shape[1] != self.config.in_channels:
            raise ConfigurationError(f"expected {self.config.in_channels} image channels, got {x.shape[1]}")
        self.config.check_extent(*x.shape[2:])
        primary = self.primary(x, use_sec=self.sec_enabled)
        if not self.variant.is_cascade:
            return Outputs(primary, primary)
        probs = softmax_channels(primary)
        second_in = concat_channels(x, probs) if self.variant.auto_context else probs
        return Outputs(primary, self.secondary(second_in))


def build_variant(variant: VariantId, cfg: NetworkConfig, seed: int = 0) -> Network:
    return Network(VariantId(variant), cfg, seed)


def forward(net: Network, images) -> Outputs:
    return net.forward(images)


def predict_mask(net: Network, images) -> np.ndarray:
    """Per-pixel argmax of the final logits; ties go to the lowest class."""
    with no_grad():
        logits = net.forward(images).final.data
    return logits.argmax(axis=1).astype(np.uint8)
