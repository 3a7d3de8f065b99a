"""EdgeCNN network model.

A :class:`Model` is an ordered list of :class:`Stage` objects, each holding the
layers of one row of the architecture table:

    convolution -> pooling -> edgeblock1 -> transition1 -> edgeblock2
    -> transition2 -> edgeblock3 -> classification

Every EdgeBlock is a stack of :class:`EdgeLayer` units. One unit computes

    branch = BN(conv3x3(ReLU(BN(conv3x3(x)))))
    output = concat_channels(x, branch)

so the block input grows by ``growth_rate`` channels per unit. The second
batch norm is not followed by an activation. Transitions are pooling only.

Example:
    Build the default network and check the shape trace::

        from edgecnn.builder import ModelConfig, build
        from edgecnn.model import shape_trace

        model = build(ModelConfig())
        rows = shape_trace(model)
        assert [row.table_shape for row in rows][-1] == "1x1x152"
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from collections.abc import Callable, Iterator, Mapping
from dataclasses import dataclass, field
from enum import StrEnum
from typing import TYPE_CHECKING, Any

import numpy as np
import numpy.typing as npt

from edgecnn.errors import CheckpointMismatchError, ShapeError
from edgecnn.lgc import GroupedExport, LearnedGroupConvState, export_grouped, lgc_forward
from edgecnn.nnops import (
    BatchNormState,
    ConvSpec,
    Mode,
    avgpool2d,
    batchnorm,
    conv2d,
    global_avgpool,
    linear,
    maxpool2d,
    relu,
)
from edgecnn.tensor import FloatArray, Tensor, concat_channels, flatten

if TYPE_CHECKING:
    from edgecnn.builder import ModelConfig

type Shape = tuple[int, ...]
type LayerObserver = Callable[[str, "Layer", Tensor], None]


class LayerKind(StrEnum):
    CONV = "conv"
    LGCONV = "lgconv"
    BATCHNORM = "batchnorm"
    RELU = "relu"
    MAXPOOL = "maxpool"
    AVGPOOL = "avgpool"
    GLOBAL_AVGPOOL = "global_avgpool"
    FLATTEN = "flatten"
    LINEAR = "linear"
    EDGE_LAYER = "edge_layer"


class ParamKind(StrEnum):
    WEIGHT = "weight"
    BIAS = "bias"
    NORM = "norm"


@dataclass(frozen=True, slots=True)
class Parameter:
    """A trainable tensor as the optimizer sees it."""

    name: str
    tensor: Tensor
    kind: ParamKind
    mask: FloatArray | None = None

    @property
    def trainable_elements(self) -> int:
        if self.mask is None:
            return int(self.tensor.data.size)
        return int(np.broadcast_to(self.mask, self.tensor.data.shape).sum())


class Layer(ABC):
    """One node of the layer list."""

    kind: LayerKind

    def __init__(self, name: str) -> None:
        self.name = name

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self.name!r})"

    @abstractmethod
    def forward(self, x: Tensor, mode: Mode) -> Tensor:
        """Apply the layer to a batch."""

    @abstractmethod
    def output_shape(self, shape: Shape) -> Shape:
        """Per-sample output shape for a per-sample input shape."""

    def parameters(self) -> Iterator[Parameter]:
        yield from ()

    def buffers(self) -> dict[str, npt.NDArray[Any]]:
        return {}

    def children(self) -> list[Layer]:
        return []


class Conv2d(Layer):
    kind = LayerKind.CONV

    def __init__(self, name: str, spec: ConvSpec, weight: Tensor, bias: Tensor | None) -> None:
        super().__init__(name)
        self.spec = spec
        self.weight = weight
        self.bias = bias

    def forward(self, x: Tensor, mode: Mode) -> Tensor:
        return conv2d(x, self.spec, self.weight, self.bias)

    def output_shape(self, shape: Shape) -> Shape:
        _, h, w = _feature_shape(shape, self.name)
        return (self.spec.out_channels, *self.spec.output_hw(h, w))

    def parameters(self) -> Iterator[Parameter]:
        yield Parameter(f"{self.name}.weight", self.weight, ParamKind.WEIGHT)
        if self.bias is not None:
            yield Parameter(f"{self.name}.bias", self.bias, ParamKind.BIAS)


class LearnedGroupConv(Layer):
    """Masked dense kernel in training; packed grouped kernel once condensed."""

    kind = LayerKind.LGCONV

    def __init__(self, name: str, state: LearnedGroupConvState) -> None:
        super().__init__(name)
        self.state = state

    @property
    def spec(self) -> ConvSpec:
        return self.state.spec

    def export(self) -> GroupedExport:
        return export_grouped(self.state)

    def forward(self, x: Tensor, mode: Mode) -> Tensor:
        if mode is Mode.INFER and self.state.fully_condensed:
            return self.state.packed_export().forward(x)
        if mode is Mode.TRAIN:
            self.state.invalidate_packed()
        return lgc_forward(x, self.state)

    def output_shape(self, shape: Shape) -> Shape:
        _, h, w = _feature_shape(shape, self.name)
        return (self.spec.out_channels, *self.spec.output_hw(h, w))

    def parameters(self) -> Iterator[Parameter]:
        yield Parameter(
            f"{self.name}.weight", self.state.weight, ParamKind.WEIGHT, self.state.weight_mask()
        )
        yield Parameter(f"{self.name}.bias", self.state.bias, ParamKind.BIAS)

    def buffers(self) -> dict[str, npt.NDArray[Any]]:
        return {
            f"{self.name}.mask": self.state.mask,
            f"{self.name}.stage": np.array([self.state.stage], dtype=np.int64),
        }


class BatchNorm(Layer):
    kind = LayerKind.BATCHNORM

    def __init__(self, name: str, state: BatchNormState) -> None:
        super().__init__(name)
        self.state = state

    def forward(self, x: Tensor, mode: Mode) -> Tensor:
        return batchnorm(x, self.state, mode)

    def output_shape(self, shape: Shape) -> Shape:
        return _feature_shape(shape, self.name)

    def parameters(self) -> Iterator[Parameter]:
        yield Parameter(f"{self.name}.gamma", self.state.gamma, ParamKind.NORM)
        yield Parameter(f"{self.name}.beta", self.state.beta, ParamKind.NORM)

    def buffers(self) -> dict[str, npt.NDArray[Any]]:
        return {
            f"{self.name}.running_mean": self.state.running_mean,
            f"{self.name}.running_var": self.state.running_var,
        }


class ReLU(Layer):
    kind = LayerKind.RELU

    def forward(self, x: Tensor, mode: Mode) -> Tensor:
        return relu(x)

    def output_shape(self, shape: Shape) -> Shape:
        return shape


class MaxPool(Layer):
    kind = LayerKind.MAXPOOL

    def __init__(self, name: str, window: int = 3, stride: int = 2, pad: int = 1) -> None:
        super().__init__(name)
        self.window = window
        self.stride = stride
        self.pad = pad

    def forward(self, x: Tensor, mode: Mode) -> Tensor:
        return maxpool2d(x, self.window, self.stride, self.pad)

    def output_shape(self, shape: Shape) -> Shape:
        c, h, w = _feature_shape(shape, self.name)
        return (
            c,
            _pooled(h, self.window, self.stride, self.pad),
            _pooled(w, self.window, self.stride, self.pad),
        )


class AvgPool(Layer):
    kind = LayerKind.AVGPOOL

    def __init__(self, name: str, window: int = 2, stride: int = 2) -> None:
        super().__init__(name)
        self.window = window
        self.stride = stride

    def forward(self, x: Tensor, mode: Mode) -> Tensor:
        return avgpool2d(x, self.window, self.stride)

    def output_shape(self, shape: Shape) -> Shape:
        c, h, w = _feature_shape(shape, self.name)
        return (c, _pooled(h, self.window, self.stride, 0), _pooled(w, self.window, self.stride, 0))


class GlobalAvgPool(Layer):
    kind = LayerKind.GLOBAL_AVGPOOL

    def forward(self, x: Tensor, mode: Mode) -> Tensor:
        return global_avgpool(x)

    def output_shape(self, shape: Shape) -> Shape:
        c, _, _ = _feature_shape(shape, self.name)
        return (c, 1, 1)


class Flatten(Layer):
    kind = LayerKind.FLATTEN

    def forward(self, x: Tensor, mode: Mode) -> Tensor:
        return flatten(x)

    def output_shape(self, shape: Shape) -> Shape:
        c, h, w = _feature_shape(shape, self.name)
        return (c * h * w,)


class Linear(Layer):
    kind = LayerKind.LINEAR

    def __init__(self, name: str, weight: Tensor, bias: Tensor) -> None:
        super().__init__(name)
        self.weight = weight
        self.bias = bias

    @property
    def in_features(self) -> int:
        return self.weight.shape[1]

    @property
    def out_features(self) -> int:
        return self.weight.shape[0]

    def forward(self, x: Tensor, mode: Mode) -> Tensor:
        return linear(x, self.weight, self.bias)

    def output_shape(self, shape: Shape) -> Shape:
        if shape != (self.in_features,):
            raise ShapeError(f"{self.name} expects ({self.in_features},) features: {shape}")
        return (self.out_features,)

    def parameters(self) -> Iterator[Parameter]:
        yield Parameter(f"{self.name}.weight", self.weight, ParamKind.WEIGHT)
        yield Parameter(f"{self.name}.bias", self.bias, ParamKind.BIAS)


type BlockConv = Conv2d | LearnedGroupConv


class EdgeLayer(Layer):
    """One dense-connectivity unit of an EdgeBlock."""

    kind = LayerKind.EDGE_LAYER

    def __init__(
        self,
        name: str,
        conv1: BlockConv,
        bn1: BatchNorm,
        conv2: BlockConv,
        bn2: BatchNorm,
    ) -> None:
        super().__init__(name)
        self.conv1 = conv1
        self.bn1 = bn1
        self.relu1 = ReLU(f"{name}.relu1")
        self.conv2 = conv2
        self.bn2 = bn2

    @property
    def in_channels(self) -> int:
        return self.conv1.spec.in_channels

    @property
    def growth(self) -> int:
        return self.conv2.spec.out_channels

    def children(self) -> list[Layer]:
        return [self.conv1, self.bn1, self.relu1, self.conv2, self.bn2]

    def forward(self, x: Tensor, mode: Mode) -> Tensor:
        return edgeblock_forward(x, self, mode)

    def output_shape(self, shape: Shape) -> Shape:
        c, h, w = _feature_shape(shape, self.name)
        return (c + self.growth, h, w)

    def parameters(self) -> Iterator[Parameter]:
        for child in self.children():
            yield from child.parameters()

    def buffers(self) -> dict[str, npt.NDArray[Any]]:
        merged: dict[str, npt.NDArray[Any]] = {}
        for child in self.children():
            merged.update(child.buffers())
        return merged


def edgeblock_forward(x: Tensor, layer: EdgeLayer, mode: Mode) -> Tensor:
    """conv -> BN -> ReLU -> conv -> BN, concatenated behind the input."""
    if x.shape[1] != layer.in_channels:
        raise ShapeError(
            f"{layer.name} expects {layer.in_channels} input channels: x={x.shape}"
        )
    branch = layer.conv1.forward(x, mode)
    branch = layer.bn1.forward(branch, mode)
    branch = layer.relu1.forward(branch, mode)
    branch = layer.conv2.forward(branch, mode)
    branch = layer.bn2.forward(branch, mode)
    return concat_channels([x, branch])


@dataclass(slots=True)
class Stage:
    """One row of the architecture table."""

    name: str
    operator: str
    layers: list[Layer]


@dataclass(frozen=True, slots=True)
class TraceRow:
    name: str
    operator: str
    shape: Shape

    @property
    def table_shape(self) -> str:
        """``HxWxC`` for feature maps, ``F`` for feature vectors."""
        if len(self.shape) == 3:
            c, h, w = self.shape
            return f"{h}x{w}x{c}"
        return "x".join(str(dim) for dim in self.shape)


@dataclass(slots=True)
class Model:
    """Ordered stages plus the configuration that generated them."""

    config: ModelConfig
    stages: list[Stage]
    dtype: np.dtype[Any] = field(default_factory=lambda: np.dtype(np.float32))

    def __post_init__(self) -> None:
        self._validate_layer_list()

    def iter_layers(self, *, expand: bool = True) -> Iterator[Layer]:
        """Layers in execution order; ``expand`` descends into EdgeLayers."""
        for stage in self.stages:
            for layer in stage.layers:
                if expand and layer.children():
                    yield from layer.children()
                else:
                    yield layer

    def edge_layers(self) -> Iterator[EdgeLayer]:
        for stage in self.stages:
            for layer in stage.layers:
                if isinstance(layer, EdgeLayer):
                    yield layer

    def convolutions(self) -> Iterator[BlockConv]:
        for layer in self.iter_layers():
            if isinstance(layer, Conv2d | LearnedGroupConv):
                yield layer

    def learned_group_convs(self) -> Iterator[LearnedGroupConv]:
        for layer in self.iter_layers():
            if isinstance(layer, LearnedGroupConv):
                yield layer

    def parameters(self) -> list[Parameter]:
        return [
            param for stage in self.stages for layer in stage.layers for param in layer.parameters()
        ]

    def buffers(self) -> dict[str, npt.NDArray[Any]]:
        merged: dict[str, npt.NDArray[Any]] = {}
        for stage in self.stages:
            for layer in stage.layers:
                merged.update(layer.buffers())
        return merged

    def zero_grad(self) -> None:
        for param in self.parameters():
            param.tensor.zero_grad()

    def state_dict(self) -> dict[str, npt.NDArray[Any]]:
        """Every parameter and buffer keyed by qualified name."""
        state: dict[str, npt.NDArray[Any]] = {p.name: p.tensor.data for p in self.parameters()}
        state.update(self.buffers())
        return state

    def load_state_dict(self, state: Mapping[str, npt.NDArray[Any]]) -> None:
        """Copy arrays in place; names and shapes must match exactly."""
        targets = self.state_dict()
        missing = sorted(set(targets).difference(state))
        unexpected = sorted(set(state).difference(targets))
        if missing or unexpected:
            raise CheckpointMismatchError(
                f"state names disagree with architecture: missing={missing[:5]}, "
                f"unexpected={unexpected[:5]}"
            )
        for name, target in targets.items():
            source = state[name]
            if source.shape != target.shape:
                raise CheckpointMismatchError(
                    f"shape mismatch for {name}: checkpoint={source.shape}, model={target.shape}"
                )
            target[...] = source
        for layer in self.learned_group_convs():
            layer.state.stage = int(state[f"{layer.name}.stage"][0])
            layer.state.invalidate_packed()
            if not 0 <= layer.state.stage <= layer.state.C - 1:
                raise CheckpointMismatchError(
                    f"stage out of range for {layer.name}: {layer.state.stage}"
                )

    def _validate_layer_list(self) -> None:
        """Enforce the structural rules of the architecture.

        1. No convolution is 1x1.
        2. Every convolution carries a bias.
        3. The second convolution of every EdgeLayer is followed by batch norm,
           and no ReLU follows that batch norm.
        4. Inside a block, unit ``i`` reads ``block input + i * growth`` channels.
        """
        for conv in self.convolutions():
            if conv.spec.is_pointwise:
                raise ShapeError(f"1x1 convolutions are not allowed: {conv.name}")
            if not conv.spec.bias_enabled:
                raise ShapeError(f"every convolution must carry a bias: {conv.name}")
        flat = list(self.iter_layers())
        second_norms = {id(unit.bn2): unit for unit in self.edge_layers()}
        for position, layer in enumerate(flat):
            owner = second_norms.get(id(layer))
            if owner is None:
                continue
            if position == 0 or flat[position - 1] is not owner.conv2:
                raise ShapeError(f"second convolution of {owner.name} must end in batch norm")
            following = flat[position + 1] if position + 1 < len(flat) else None
            if isinstance(following, ReLU):
                raise ShapeError(
                    f"{following.name} must not follow the second batch norm of {owner.name}"
                )
        for stage in self.stages:
            units = [layer for layer in stage.layers if isinstance(layer, EdgeLayer)]
            for index, unit in enumerate(units):
                if unit.bn2.state.channels != unit.growth:
                    raise ShapeError(f"second convolution of {unit.name} must end in batch norm")
                expected = units[0].in_channels + index * units[0].growth
                if unit.in_channels != expected:
                    raise ShapeError(
                        f"{unit.name} must read {expected} channels: got {unit.in_channels}"
                    )


def _feature_shape(shape: Shape, name: str) -> tuple[int, int, int]:
    if len(shape) != 3:
        raise ShapeError(f"{name} expects a (c, h, w) input: {shape}")
    return shape[0], shape[1], shape[2]


def _pooled(size: int, window: int, stride: int, pad: int) -> int:
    out = (size + 2 * pad - window) // stride + 1
    if out <= 0:
        raise ShapeError(f"pooling output must be positive: size={size}, window={window}")
    return out


def input_shape(model: Model) -> tuple[int, int, int]:
    h, w, c = model.config.input_size
    return (c, h, w)


def forward(
    model: Model,
    batch: Tensor,
    mode: Mode,
    *,
    observer: LayerObserver | None = None,
) -> Tensor:
    """Logits ``(n, num_classes)`` for a ``(n, 3, 44, 44)`` batch."""
    expected = input_shape(model)
    if batch.data.ndim != 4 or batch.shape[1:] != expected:
        raise ShapeError(f"forward expects (n, {', '.join(map(str, expected))}): {batch.shape}")
    x = batch
    for stage in model.stages:
        for layer in stage.layers:
            x = layer.forward(x, mode)
            if observer is not None:
                observer(stage.name, layer, x)
    return x


def shape_trace(model: Model, *, detailed: bool = False) -> list[TraceRow]:
    """Symbolic per-sample output shapes; no data is run.

    Stage rows report the last feature-map shape of the stage, so the
    classification row shows the pooled ``1x1xC`` features entering the
    classifier. ``detailed`` lists every layer instead.
    """
    rows: list[TraceRow] = []
    shape: Shape = input_shape(model)
    for stage in model.stages:
        last_map = shape
        for layer in stage.layers:
            if detailed:
                unit_input = shape
                for child in layer.children() or [layer]:
                    shape = child.output_shape(shape)
                    rows.append(TraceRow(child.name, child.kind.value, shape))
                if layer.children():
                    shape = layer.output_shape(unit_input)
                    rows.append(TraceRow(layer.name, "concat", shape))
            else:
                shape = layer.output_shape(shape)
            if len(shape) == 3:
                last_map = shape
        if not detailed:
            rows.append(TraceRow(stage.name, stage.operator, last_map))
    return rows
