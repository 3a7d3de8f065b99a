"""EdgeCNN network construction.

This module defines:
- the generative architecture description (`ModelConfig`)
- a builder interface (`ModelBuilder`)
- the standard EdgeCNN / EdgeCNN-G builder (`EdgeCNNBuilder`)
- the `build` helper used everywhere else
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass, field, fields, replace
from enum import StrEnum
from typing import Any

import numpy as np
import numpy.typing as npt

from edgecnn.config import format_key_values, parse_int_tuple, parse_key_values
from edgecnn.errors import ChannelPlanError, validate_count
from edgecnn.lgc import LearnedGroupConvState
from edgecnn.model import (
    AvgPool,
    BatchNorm,
    BlockConv,
    Conv2d,
    EdgeLayer,
    Flatten,
    GlobalAvgPool,
    Layer,
    LearnedGroupConv,
    Linear,
    MaxPool,
    Model,
    ReLU,
    Stage,
)
from edgecnn.nnops import BatchNormState, ConvSpec, he_normal, he_uniform
from edgecnn.tensor import Tensor

PUBLISHED_CHANNEL_PLAN = (64, 96, 152)
BOTTLENECK_WIDTH = 4


class Variant(StrEnum):
    DENSE = "dense"
    GROUPED = "grouped"

    @property
    def arch(self) -> str:
        return "edgecnn" if self is Variant.DENSE else "edgecnn-g"

    @classmethod
    def from_arch(cls, arch: str) -> Variant:
        for variant in cls:
            if variant.arch == arch or variant.value == arch:
                return variant
        raise ValueError(f"arch must be 'edgecnn' or 'edgecnn-g': {arch!r}")


@dataclass(frozen=True, slots=True)
class LGCParams:
    """Output group count ``G`` and condensation factor ``C``."""

    G: int
    C: int

    def __post_init__(self) -> None:
        validate_count("G", self.G)
        validate_count("C", self.C)

    def to_text(self) -> str:
        return f"{self.G},{self.C}"

    @classmethod
    def from_text(cls, value: str, *, key: str) -> LGCParams:
        parts = parse_int_tuple(value, key=key)
        if len(parts) != 2:
            raise ValueError(f"{key} must be 'G,C': {value!r}")
        return cls(G=parts[0], C=parts[1])


@dataclass(frozen=True, slots=True)
class ModelConfig:
    """Generative description of an EdgeCNN network.

    ``channel_plan`` pins the expected block exit widths; ``None`` accepts any
    plan the growth rate and block lengths produce.
    """

    growth_rate: int = 8
    stem_channels: int = 32
    block_lengths: tuple[int, ...] = (4, 4, 7)
    num_classes: int = 7
    variant: Variant = Variant.DENSE
    conv1_lgc: LGCParams = field(default_factory=lambda: LGCParams(G=4, C=4))
    conv2_lgc: LGCParams = field(default_factory=lambda: LGCParams(G=8, C=8))
    input_size: tuple[int, int, int] = (44, 44, 3)
    channel_plan: tuple[int, ...] | None = PUBLISHED_CHANNEL_PLAN

    def __post_init__(self) -> None:
        validate_count("growth_rate", self.growth_rate)
        validate_count("stem_channels", self.stem_channels)
        validate_count("num_classes", self.num_classes)
        if not self.block_lengths:
            raise ValueError("block_lengths must not be empty")
        for length in self.block_lengths:
            validate_count("block length", length)
        if len(self.input_size) != 3:
            raise ValueError(f"input_size must be (h, w, c): {self.input_size!r}")
        for dim in self.input_size:
            validate_count("input dimension", dim)
        if not isinstance(self.variant, Variant):
            raise TypeError(f"variant must be a Variant: {self.variant!r}")
        exits = self.block_exits()
        if self.channel_plan is not None and tuple(self.channel_plan) != exits:
            raise ChannelPlanError(
                f"channel plan {tuple(self.channel_plan)} disagrees with derived exits {exits}: "
                f"stem={self.stem_channels}, growth={self.growth_rate}, "
                f"blocks={self.block_lengths}"
            )
        if self.variant is Variant.GROUPED:
            self._validate_grouped()

    @classmethod
    def for_arch(cls, arch: str, **overrides: Any) -> ModelConfig:
        return cls(variant=Variant.from_arch(arch), **overrides)

    @property
    def arch(self) -> str:
        return self.variant.arch

    @property
    def bottleneck_channels(self) -> int:
        return BOTTLENECK_WIDTH * self.growth_rate

    def block_inputs(self) -> tuple[int, ...]:
        widths = [self.stem_channels]
        for length in self.block_lengths[:-1]:
            widths.append(widths[-1] + length * self.growth_rate)
        return tuple(widths)

    def block_exits(self) -> tuple[int, ...]:
        return tuple(
            start + length * self.growth_rate
            for start, length in zip(self.block_inputs(), self.block_lengths, strict=True)
        )

    def with_overrides(self, **changes: Any) -> ModelConfig:
        """Copy with ``changes``; a changed plan drops the pinned exit widths."""
        if {"growth_rate", "stem_channels", "block_lengths"} & changes.keys():
            changes.setdefault("channel_plan", None)
        return replace(self, **changes)

    def to_text(self) -> str:
        values = {
            "arch": self.arch,
            "growth_rate": str(self.growth_rate),
            "stem_channels": str(self.stem_channels),
            "block_lengths": ",".join(map(str, self.block_lengths)),
            "num_classes": str(self.num_classes),
            "conv1_lgc": self.conv1_lgc.to_text(),
            "conv2_lgc": self.conv2_lgc.to_text(),
            "input_size": ",".join(map(str, self.input_size)),
            "channel_plan": (
                "none" if self.channel_plan is None else ",".join(map(str, self.channel_plan))
            ),
        }
        return format_key_values(values)

    @classmethod
    def from_text(cls, text: str, *, source: str = "<config>") -> ModelConfig:
        values = parse_key_values(text, source=source)
        known = {f.name for f in fields(cls)} | {"arch"}
        unknown = sorted(set(values).difference(known))
        if unknown:
            raise ValueError(f"{source}: unknown model config keys: {unknown}")
        kwargs: dict[str, Any] = {}
        if "arch" in values:
            kwargs["variant"] = Variant.from_arch(values["arch"])
        if "variant" in values:
            kwargs["variant"] = Variant(values["variant"])
        for key in ("growth_rate", "stem_channels", "num_classes"):
            if key in values:
                kwargs[key] = int(values[key])
        if "block_lengths" in values:
            kwargs["block_lengths"] = parse_int_tuple(values["block_lengths"], key="block_lengths")
        for key in ("conv1_lgc", "conv2_lgc"):
            if key in values:
                kwargs[key] = LGCParams.from_text(values[key], key=key)
        if "input_size" in values:
            size = parse_int_tuple(values["input_size"], key="input_size")
            if len(size) != 3:
                raise ValueError(f"input_size must be 'h,w,c': {values['input_size']!r}")
            kwargs["input_size"] = (size[0], size[1], size[2])
        if "channel_plan" in values:
            plan = values["channel_plan"]
            kwargs["channel_plan"] = (
                None if plan.lower() == "none" else parse_int_tuple(plan, key="channel_plan")
            )
        return cls(**kwargs)

    def _validate_grouped(self) -> None:
        bottleneck = self.bottleneck_channels
        for start, length in zip(self.block_inputs(), self.block_lengths, strict=True):
            for index in range(length):
                width = start + index * self.growth_rate
                if width % self.conv1_lgc.G or bottleneck % self.conv1_lgc.G:
                    raise ChannelPlanError(
                        f"conv1 groups G={self.conv1_lgc.G} must divide in={width} "
                        f"and out={bottleneck}"
                    )
        if bottleneck % self.conv2_lgc.G or self.growth_rate % self.conv2_lgc.G:
            raise ChannelPlanError(
                f"conv2 groups G={self.conv2_lgc.G} must divide in={bottleneck} "
                f"and out={self.growth_rate}"
            )


class ModelBuilder(ABC):
    """Build a Model from a configuration."""

    @abstractmethod
    def from_config(self, config: ModelConfig) -> Model:
        """Construct and return a freshly initialized model."""


class EdgeCNNBuilder(ModelBuilder):
    """Standard builder for both variants.

    Layout: stem conv + BN + ReLU, max pool, then one EdgeBlock per entry of
    ``block_lengths`` separated by 2x2 average pools, then global average
    pool, flatten and the classifier.
    """

    def __init__(self, rng: np.random.Generator, dtype: npt.DTypeLike = np.float32) -> None:
        self._rng = rng
        self._dtype = np.dtype(dtype)

    def from_config(self, config: ModelConfig) -> Model:
        h, w, c = config.input_size
        stem_spec = ConvSpec(c, config.stem_channels)
        stages = [
            Stage(
                "convolution",
                "3x3 conv, pad=1, bias",
                [
                    self._conv("stem.conv", stem_spec),
                    self._batchnorm("stem.bn", config.stem_channels),
                    ReLU("stem.relu"),
                ],
            ),
            Stage("pooling", "3x3 max pool, stride=2", [MaxPool("pool.max", 3, 2, 1)]),
        ]
        h, w = (h + 2 - 3) // 2 + 1, (w + 2 - 3) // 2 + 1
        block_name = "EdgeBlock-G" if config.variant is Variant.GROUPED else "EdgeBlock"
        blocks = list(zip(config.block_inputs(), config.block_lengths, strict=True))
        for number, (start, length) in enumerate(blocks, start=1):
            prefix = f"edgeblock{number}"
            units: list[Layer] = [
                self._edge_layer(f"{prefix}.layer{i + 1}", start + i * config.growth_rate, config)
                for i in range(length)
            ]
            stages.append(Stage(prefix, f"{block_name} x{length}", units))
            if number < len(blocks):
                stages.append(
                    Stage(
                        f"transition{number}",
                        "2x2 average pool, stride=2",
                        [AvgPool(f"transition{number}.avg", 2, 2)],
                    )
                )
                h, w = h // 2, w // 2
        features = config.block_exits()[-1]
        stages.append(
            Stage(
                "classification",
                f"{h}x{w} global average pool, {features}D fully-connected, softmax",
                [
                    GlobalAvgPool("classifier.pool"),
                    Flatten("classifier.flatten"),
                    self._linear("classifier.fc", features, config.num_classes),
                ],
            )
        )
        return Model(config=config, stages=stages, dtype=self._dtype)

    def _conv(self, name: str, spec: ConvSpec) -> Conv2d:
        kh, kw = spec.kernel
        fan_in = (spec.in_channels // spec.groups) * kh * kw
        weight = he_normal(spec.weight_shape, fan_in, self._rng, self._dtype)
        return Conv2d(
            name,
            spec,
            Tensor(weight, requires_grad=True, dtype=self._dtype),
            Tensor(np.zeros(spec.out_channels), requires_grad=True, dtype=self._dtype),
        )

    def _lgc(self, name: str, spec: ConvSpec, params: LGCParams) -> LearnedGroupConv:
        grouped = replace(spec, groups=params.G)
        return LearnedGroupConv(
            name, LearnedGroupConvState.create(grouped, params.C, self._rng, self._dtype)
        )

    def _batchnorm(self, name: str, channels: int) -> BatchNorm:
        return BatchNorm(name, BatchNormState.create(channels, self._dtype))

    def _linear(self, name: str, in_features: int, out_features: int) -> Linear:
        weight = he_uniform((out_features, in_features), in_features, self._rng, self._dtype)
        return Linear(
            name,
            Tensor(weight, requires_grad=True, dtype=self._dtype),
            Tensor(np.zeros(out_features), requires_grad=True, dtype=self._dtype),
        )

    def _edge_layer(self, name: str, in_channels: int, config: ModelConfig) -> EdgeLayer:
        bottleneck = config.bottleneck_channels
        spec1 = ConvSpec(in_channels, bottleneck)
        spec2 = ConvSpec(bottleneck, config.growth_rate)
        conv1: BlockConv
        conv2: BlockConv
        if config.variant is Variant.GROUPED:
            conv1 = self._lgc(f"{name}.conv1", spec1, config.conv1_lgc)
            conv2 = self._lgc(f"{name}.conv2", spec2, config.conv2_lgc)
        else:
            conv1 = self._conv(f"{name}.conv1", spec1)
            conv2 = self._conv(f"{name}.conv2", spec2)
        return EdgeLayer(
            name,
            conv1,
            self._batchnorm(f"{name}.bn1", bottleneck),
            conv2,
            self._batchnorm(f"{name}.bn2", config.growth_rate),
        )


def build(
    config: ModelConfig | None = None,
    *,
    seed: int = 0,
    rng: np.random.Generator | None = None,
    dtype: npt.DTypeLike = np.float32,
) -> Model:
    """Build a freshly initialized model; all randomness comes from ``seed``."""
    generator = rng if rng is not None else np.random.default_rng(seed)
    return EdgeCNNBuilder(generator, dtype).from_config(config or ModelConfig())
