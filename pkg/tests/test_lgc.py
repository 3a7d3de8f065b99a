"""Tests for learned group convolution: condensation, schedule and export."""

from __future__ import annotations

from itertools import combinations

import numpy as np
import pytest

from edgecnn.errors import CondensationError
from edgecnn.lgc import (
    LearnedGroupConvState,
    alive_target,
    condensation_stage_for_epoch,
    condense,
    export_grouped,
    from_export,
    lgc_forward,
)
from edgecnn.model import LearnedGroupConv
from edgecnn.nnops import ConvSpec, conv2d
from edgecnn.tensor import Tensor
from edgecnn.train import OptimizerState, TrainConfig, sgd_step

LAYER_SHAPES = [
    pytest.param(ConvSpec(64, 32, groups=4), 4, id="conv1-G4-C4"),
    pytest.param(ConvSpec(32, 8, groups=8), 8, id="conv2-G8-C8"),
]


def _state(spec: ConvSpec, C: int, seed: int = 0) -> LearnedGroupConvState:
    return LearnedGroupConvState.create(spec, C, np.random.default_rng(seed), np.float64)


@pytest.mark.parametrize(("spec", "C"), LAYER_SHAPES)
def test_condensation_keeps_floor_fraction_alive_per_stage(spec: ConvSpec, C: int) -> None:
    state = _state(spec, C)

    for stage in range(1, C):
        condense(state)
        expected = spec.in_channels * (C - stage) // C
        assert state.alive_counts() == [expected] * spec.groups
        assert state.stage == stage

    assert state.fully_condensed
    assert state.alive_counts() == [spec.in_channels // C] * spec.groups


@pytest.mark.parametrize(("spec", "C"), LAYER_SHAPES)
def test_condensation_masks_are_group_shared_and_monotone(spec: ConvSpec, C: int) -> None:
    state = _state(spec, C, seed=5)
    previous = state.mask.copy()

    for _ in range(C - 1):
        condense(state)
        for g in range(spec.groups):
            rows = state.mask[state.group_rows(g)]
            assert (rows == rows[0]).all()
        assert not (state.mask > previous).any()
        previous = state.mask.copy()


@pytest.mark.parametrize(("spec", "C"), LAYER_SHAPES)
def test_pruned_weights_stay_zero_across_sgd_steps(spec: ConvSpec, C: int) -> None:
    rng = np.random.default_rng(9)
    layer = LearnedGroupConv("unit.conv", _state(spec, C))
    state = layer.state
    optimizer = OptimizerState()
    config = TrainConfig()
    condense_at = {int(step) for step in np.linspace(0, 100, C, endpoint=False)[1:]}

    for step in range(100):
        if step in condense_at:
            condense(state)
        grads = {
            "unit.conv.weight": rng.standard_normal(state.weight.shape),
            "unit.conv.bias": rng.standard_normal(state.bias.shape),
        }
        sgd_step(list(layer.parameters()), optimizer, 1e-2, config, grads)
        pruned = np.broadcast_to(state.weight_mask(), state.weight.shape) == 0
        assert not state.weight.data[pruned].any()

    assert state.fully_condensed


def test_condense_prunes_channels_with_smallest_l1_importance() -> None:
    spec = ConvSpec(4, 2, groups=2)
    state = _state(spec, 2)
    magnitudes = np.array([3.0, 1.0, 4.0, 2.0])
    state.weight.data[:] = magnitudes[None, :, None, None]
    state.weight.data[1] = magnitudes[::-1][:, None, None]

    condense(state)

    np.testing.assert_array_equal(state.alive_channels(0), [0, 2])
    np.testing.assert_array_equal(state.alive_channels(1), [1, 3])


def test_condense_rejects_fully_condensed_layer() -> None:
    state = _state(ConvSpec(4, 2, groups=2), 2)
    condense(state)

    with pytest.raises(CondensationError, match=r"already fully condensed"):
        condense(state)


def test_alive_target_never_drops_below_one() -> None:
    assert alive_target(3, 3, 4) == 1
    assert alive_target(152, 0, 4) == 152


@pytest.mark.parametrize(
    ("epoch", "expected"),
    [(0, 0), (19, 0), (20, 1), (39, 1), (40, 2), (59, 2), (60, 3), (119, 3)],
)
def test_condensation_stage_spreads_over_first_half(epoch: int, expected: int) -> None:
    assert condensation_stage_for_epoch(epoch, 120, 4) == expected


def test_condensation_stage_requires_enough_epochs() -> None:
    with pytest.raises(CondensationError, match=r"total_epochs must be >= 2\*\(C-1\)"):
        condensation_stage_for_epoch(0, 13, 8)


def test_condensation_stage_is_zero_without_condensation() -> None:
    assert condensation_stage_for_epoch(5, 1, 1) == 0


@pytest.mark.parametrize(("spec", "C"), LAYER_SHAPES)
def test_exported_layer_matches_masked_dense_layer(spec: ConvSpec, C: int) -> None:
    rng = np.random.default_rng(21)
    state = _state(spec, C)
    for _ in range(C - 1):
        condense(state)
    state.bias.data[:] = rng.standard_normal(spec.out_channels)
    x = Tensor(rng.standard_normal((2, spec.in_channels, 6, 5)), dtype=np.float64)

    export = export_grouped(state)

    assert export.spec.groups == spec.groups
    assert export.spec.in_channels == spec.groups * (spec.in_channels // C)
    np.testing.assert_allclose(
        export.forward(x).data, lgc_forward(x, state).data, rtol=1e-6, atol=1e-9
    )


def test_export_rejects_partially_condensed_layer() -> None:
    state = _state(ConvSpec(8, 4, groups=2), 4)
    condense(state)

    with pytest.raises(CondensationError, match=r"export needs a fully condensed layer"):
        export_grouped(state)


def test_from_export_rebuilds_the_masked_layer() -> None:
    state = _state(ConvSpec(16, 8, groups=4), 4)
    for _ in range(3):
        condense(state)

    rebuilt = from_export(export_grouped(state), 16, 4, np.float64)

    np.testing.assert_array_equal(rebuilt.mask, state.mask)
    np.testing.assert_array_equal(rebuilt.weight.data, state.weight.data)
    assert rebuilt.fully_condensed


def test_state_rejects_mask_rows_that_differ_within_a_group() -> None:
    state = _state(ConvSpec(4, 4, groups=2), 2)
    mask = state.mask.copy()
    mask[1, 0] = 0

    with pytest.raises(CondensationError, match=r"mask rows of group 0 must be identical"):
        LearnedGroupConvState(state.spec, state.weight, state.bias, mask, C=2)


def test_all_ones_mask_matches_plain_convolution(rng: np.random.Generator) -> None:
    state = _state(ConvSpec(8, 8, groups=2), 2)
    state.bias.data[:] = rng.standard_normal(8)
    x = Tensor(rng.standard_normal((2, 8, 5, 5)), dtype=np.float64)

    np.testing.assert_array_equal(
        lgc_forward(x, state).data,
        conv2d(x, state.spec.dense(), state.weight, state.bias).data,
    )


def test_all_zeros_mask_leaves_only_the_bias(rng: np.random.Generator) -> None:
    state = _state(ConvSpec(8, 4, groups=2), 2)
    state.mask[:] = 0
    state.bias.data[:] = rng.standard_normal(4)
    x = Tensor(rng.standard_normal((2, 8, 5, 5)), dtype=np.float64)

    out = lgc_forward(x, state).data

    expected = np.broadcast_to(state.bias.data[None, :, None, None], out.shape)
    np.testing.assert_array_equal(out, expected)


@pytest.mark.parametrize("seed", range(5))
def test_condense_keeps_the_highest_l1_channel_set(seed: int) -> None:
    state = _state(ConvSpec(8, 8, groups=2), 2, seed=seed)
    weights = state.weight.data.copy()

    condense(state)

    for g in range(2):
        importance = np.abs(weights[state.group_rows(g)]).sum(axis=(0, 2, 3))
        best = max(combinations(range(8), 4), key=lambda kept: importance[list(kept)].sum())
        assert tuple(int(i) for i in state.alive_channels(g)) == best


def test_condense_prunes_all_zero_kernels_first() -> None:
    state = _state(ConvSpec(8, 4, groups=2), 4, seed=3)
    state.weight.data[:, 6] = 0.0

    condense(state)

    assert all(6 not in state.alive_channels(g) for g in range(2))


def test_condensation_of_a_176_channel_layer_follows_quarter_steps() -> None:
    state = _state(ConvSpec(176, 32, groups=4), 4)
    alive = []

    for _ in range(3):
        condense(state)
        alive.append(state.alive_counts())

    assert alive == [[132] * 4, [88] * 4, [44] * 4]
    assert state.alive_counts()[0] / 176 == pytest.approx(1 / 4)


def test_export_without_condensation_keeps_every_input(rng: np.random.Generator) -> None:
    state = _state(ConvSpec(6, 4, groups=2), 1)
    state.bias.data[:] = rng.standard_normal(4)
    x = Tensor(rng.standard_normal((2, 6, 5, 4)), dtype=np.float64)

    export = export_grouped(state)

    assert state.fully_condensed
    assert export.indices == (tuple(range(6)), tuple(range(6)))
    np.testing.assert_allclose(
        export.forward(x).data,
        conv2d(x, state.spec.dense(), state.weight, state.bias).data,
        rtol=1e-6,
        atol=1e-12,
    )
