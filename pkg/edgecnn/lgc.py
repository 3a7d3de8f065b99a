"""Learned group convolution.

A learned group convolution trains as a dense convolution under a binary
connection mask. Output channels are split into ``G`` groups; within a group
every output filter reads the same input channels. Condensation runs in
``C - 1`` stages; each stage drops the weakest input channels of every group
(importance is the L1 norm of the group's kernel slices for that channel)
until ``1/C`` of the inputs survive. A fully condensed layer lowers to an
index-select followed by a standard grouped convolution.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import numpy.typing as npt

from edgecnn.errors import CondensationError, ShapeError
from edgecnn.nnops import ConvSpec, conv2d, he_normal
from edgecnn.tensor import FloatArray, Tensor, index_select_channels

logger = logging.getLogger(__name__)

type MaskArray = npt.NDArray[np.uint8]


def alive_target(in_channels: int, stage: int, C: int) -> int:
    """Alive input channels per group after ``stage`` completed stages."""
    return max(1, in_channels * (C - stage) // C)


@dataclass(slots=True)
class LearnedGroupConvState:
    """Masked dense weights plus group/condensation bookkeeping.

    ``spec.groups`` is the output group count ``G``; the weights are stored
    dense, shaped like a ``groups=1`` convolution.
    """

    spec: ConvSpec
    weight: Tensor
    bias: Tensor
    mask: MaskArray
    C: int
    stage: int = 0
    packed: GroupedExport | None = field(default=None, repr=False, compare=False)

    def __post_init__(self) -> None:
        if isinstance(self.C, bool) or not isinstance(self.C, int) or self.C < 1:
            raise ValueError(f"condensation factor C must be an int >= 1: {self.C!r}")
        if not 0 <= self.stage <= self.C - 1:
            raise ValueError(f"stage must lie in [0, {self.C - 1}]: {self.stage!r}")
        if not self.spec.bias_enabled:
            raise ValueError("learned group convolutions always carry a bias")
        dense_shape = self.spec.dense().weight_shape
        if self.weight.shape != dense_shape:
            raise ShapeError(f"weight must have shape {dense_shape}: {self.weight.shape}")
        if self.bias.shape != (self.spec.out_channels,):
            raise ShapeError(f"bias must have shape ({self.spec.out_channels},): {self.bias.shape}")
        expected_mask = (self.spec.out_channels, self.spec.in_channels)
        if self.mask.shape != expected_mask:
            raise ShapeError(f"mask must have shape {expected_mask}: {self.mask.shape}")
        for g in range(self.G):
            rows = self.mask[self.group_rows(g)]
            if not (rows == rows[0]).all():
                raise CondensationError(f"mask rows of group {g} must be identical")

    @classmethod
    def create(
        cls,
        spec: ConvSpec,
        C: int,
        rng: np.random.Generator,
        dtype: npt.DTypeLike = np.float32,
    ) -> LearnedGroupConvState:
        dense = spec.dense()
        kh, kw = spec.kernel
        weight = he_normal(dense.weight_shape, spec.in_channels * kh * kw, rng, dtype)
        return cls(
            spec=spec,
            weight=Tensor(weight, requires_grad=True, dtype=dtype),
            bias=Tensor(np.zeros(spec.out_channels), requires_grad=True, dtype=dtype),
            mask=np.ones((spec.out_channels, spec.in_channels), dtype=np.uint8),
            C=C,
        )

    @property
    def G(self) -> int:
        return self.spec.groups

    @property
    def fully_condensed(self) -> bool:
        return self.stage == self.C - 1

    def group_rows(self, g: int) -> slice:
        size = self.spec.out_channels // self.G
        return slice(g * size, (g + 1) * size)

    def alive_channels(self, g: int) -> npt.NDArray[np.intp]:
        return np.flatnonzero(self.mask[g * (self.spec.out_channels // self.G)])

    def alive_counts(self) -> list[int]:
        return [int(self.alive_channels(g).size) for g in range(self.G)]

    def weight_mask(self) -> FloatArray:
        """Mask broadcastable against the ``(out, in, kh, kw)`` weights."""
        return self.mask[:, :, None, None].astype(self.weight.dtype)

    def packed_export(self) -> GroupedExport:
        """Packed form of a fully condensed layer, rebuilt after any invalidation."""
        if self.packed is None:
            self.packed = export_grouped(self)
        return self.packed

    def invalidate_packed(self) -> None:
        self.packed = None


def _masked_weight(weight: Tensor, mask: FloatArray) -> Tensor:
    data = weight.data * mask

    def backward(grad: FloatArray) -> None:
        weight.accumulate_grad(grad * mask)

    return Tensor.from_op(data, (weight,), backward, op="lgc_mask")


def lgc_forward(x: Tensor, state: LearnedGroupConvState) -> Tensor:
    """Dense convolution over ``weight * mask``; pruned entries get no gradient."""
    weight = _masked_weight(state.weight, state.weight_mask())
    return conv2d(x, state.spec.dense(), weight, state.bias)


def condensation_stage_for_epoch(epoch: int, total_epochs: int, C: int) -> int:
    """Stage index reached at ``epoch`` (0-based).

    The ``C - 1`` stages are spread uniformly over the first half of training;
    the second half runs fully condensed.
    """
    if C < 1:
        raise ValueError(f"condensation factor C must be >= 1: {C!r}")
    if C == 1:
        return 0
    if total_epochs < 2 * (C - 1):
        raise CondensationError(
            f"total_epochs must be >= 2*(C-1) for a condensation schedule: "
            f"total_epochs={total_epochs}, C={C}"
        )
    if epoch < 0:
        raise ValueError(f"epoch must be non-negative: {epoch!r}")
    return min(C - 1, epoch * 2 * (C - 1) // total_epochs)


def condense(state: LearnedGroupConvState) -> LearnedGroupConvState:
    """Advance one condensing stage in place and return ``state``."""
    if state.fully_condensed:
        raise CondensationError(f"layer already fully condensed: stage={state.stage}, C={state.C}")
    target = alive_target(state.spec.in_channels, state.stage + 1, state.C)
    weights = state.weight.data
    for g in range(state.G):
        rows = state.group_rows(g)
        alive = state.alive_channels(g)
        excess = alive.size - target
        if excess <= 0:
            continue
        importance = np.abs(weights[rows][:, alive]).sum(axis=(0, 2, 3))
        pruned = alive[np.argsort(importance, kind="stable")[:excess]]
        state.mask[rows, pruned] = 0
        weights[rows, pruned] = 0
    state.stage += 1
    state.invalidate_packed()
    logger.info(
        "condensed to stage %d/%d: %d of %d input channels alive per group",
        state.stage,
        state.C - 1,
        target,
        state.spec.in_channels,
    )
    return state


@dataclass(frozen=True, slots=True)
class GroupedExport:
    """Inference form of a condensed layer: gather indices plus a grouped conv."""

    indices: tuple[tuple[int, ...], ...]
    spec: ConvSpec
    weight: FloatArray
    bias: FloatArray

    @property
    def flat_indices(self) -> list[int]:
        return [index for group in self.indices for index in group]

    def forward(self, x: Tensor) -> Tensor:
        gathered = index_select_channels(x, self.flat_indices)
        return conv2d(
            gathered,
            self.spec,
            Tensor(self.weight, dtype=self.weight.dtype),
            Tensor(self.bias, dtype=self.bias.dtype),
        )


def export_grouped(state: LearnedGroupConvState) -> GroupedExport:
    """Pack a fully condensed layer into index lists and a grouped convolution."""
    if not state.fully_condensed:
        raise CondensationError(
            f"export needs a fully condensed layer: stage={state.stage}, C={state.C}"
        )
    counts = state.alive_counts()
    if len(set(counts)) != 1:
        raise CondensationError(f"groups must keep equal alive counts to pack: {counts}")
    per_group = counts[0]
    indices = tuple(tuple(int(i) for i in state.alive_channels(g)) for g in range(state.G))
    spec = ConvSpec(
        in_channels=state.G * per_group,
        out_channels=state.spec.out_channels,
        kernel=state.spec.kernel,
        stride=state.spec.stride,
        pad=state.spec.pad,
        groups=state.G,
        bias_enabled=True,
    )
    packed = np.concatenate(
        [state.weight.data[state.group_rows(g)][:, list(indices[g])] for g in range(state.G)],
        axis=0,
    )
    return GroupedExport(
        indices=indices,
        spec=spec,
        weight=np.ascontiguousarray(packed),
        bias=state.bias.data.copy(),
    )


def from_export(
    export: GroupedExport, in_channels: int, C: int, dtype: npt.DTypeLike = np.float32
) -> LearnedGroupConvState:
    """Rebuild a fully condensed masked layer from its packed form."""
    G = export.spec.groups
    out = export.spec.out_channels
    kh, kw = export.spec.kernel
    weight = np.zeros((out, in_channels, kh, kw), dtype=dtype)
    mask = np.zeros((out, in_channels), dtype=np.uint8)
    size = out // G
    for g, group in enumerate(export.indices):
        rows = slice(g * size, (g + 1) * size)
        weight[rows, list(group)] = export.weight[rows]
        mask[rows, list(group)] = 1
    spec = ConvSpec(
        in_channels=in_channels,
        out_channels=out,
        kernel=export.spec.kernel,
        stride=export.spec.stride,
        pad=export.spec.pad,
        groups=G,
    )
    return LearnedGroupConvState(
        spec=spec,
        weight=Tensor(weight, requires_grad=True, dtype=dtype),
        bias=Tensor(export.bias, requires_grad=True, dtype=dtype),
        mask=mask,
        C=C,
        stage=C - 1,
    )
