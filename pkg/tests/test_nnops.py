"""Forward behavior of the layer kernels against direct oracles."""

from __future__ import annotations

import numpy as np
import pytest

from edgecnn.errors import ShapeError
from edgecnn.nnops import (
    BatchNormState,
    ConvSpec,
    Mode,
    avgpool2d,
    batchnorm,
    conv2d,
    conv2d_reference,
    get_num_threads,
    global_avgpool,
    linear,
    maxpool2d,
    relu,
    set_num_threads,
    softmax_cross_entropy,
)
from edgecnn.tensor import FloatArray, Tensor
from tests._gradcheck import weighted_sum

ORACLE_SHAPES = 20


def _random_conv_case(
    rng: np.random.Generator,
) -> tuple[ConvSpec, FloatArray, FloatArray, FloatArray]:
    groups = int(rng.choice([1, 2, 4]))
    in_channels = groups * int(rng.integers(1, 4))
    out_channels = groups * int(rng.integers(1, 4))
    k = int(rng.choice([1, 3, 5]))
    spec = ConvSpec(
        in_channels,
        out_channels,
        kernel=(k, k),
        stride=int(rng.integers(1, 3)),
        pad=int(rng.integers(0, k // 2 + 1)),
        groups=groups,
    )
    n = int(rng.integers(1, 3))
    h = int(rng.integers(k, k + 5))
    w = int(rng.integers(k, k + 5))
    x = rng.standard_normal((n, in_channels, h, w))
    weight = rng.standard_normal(spec.weight_shape)
    bias = rng.standard_normal(out_channels)
    return spec, x, weight, bias


@pytest.mark.parametrize("case", range(ORACLE_SHAPES))
def test_conv2d_matches_direct_loop_reference(case: int) -> None:
    rng = np.random.default_rng(100 + case)
    spec, x, weight, bias = _random_conv_case(rng)

    fast = conv2d(Tensor(x, dtype=np.float64), spec, Tensor(weight, dtype=np.float64), Tensor(bias))
    slow = conv2d_reference(x, spec, weight, bias)

    np.testing.assert_allclose(fast.data, slow, rtol=1e-6, atol=1e-9)


def test_grouped_conv_equals_slab_wise_dense_conv(rng: np.random.Generator) -> None:
    spec = ConvSpec(8, 12, groups=4)
    x = rng.standard_normal((2, 8, 6, 6))
    weight = rng.standard_normal(spec.weight_shape)
    bias = rng.standard_normal(12)

    grouped = conv2d(
        Tensor(x, dtype=np.float64), spec, Tensor(weight, dtype=np.float64), Tensor(bias)
    )

    slab_spec = ConvSpec(2, 3)
    for g in range(4):
        slab = conv2d(
            Tensor(x[:, 2 * g : 2 * g + 2], dtype=np.float64),
            slab_spec,
            Tensor(weight[3 * g : 3 * g + 3], dtype=np.float64),
            Tensor(bias[3 * g : 3 * g + 3], dtype=np.float64),
        )
        np.testing.assert_allclose(
            grouped.data[:, 3 * g : 3 * g + 3], slab.data, rtol=1e-12, atol=1e-12
        )


def test_conv2d_output_is_independent_of_thread_count(rng: np.random.Generator) -> None:
    spec = ConvSpec(4, 6)
    x = Tensor(rng.standard_normal((5, 4, 7, 7)), dtype=np.float32)
    weight = Tensor(rng.standard_normal(spec.weight_shape), dtype=np.float32)
    bias = Tensor(np.zeros(6), dtype=np.float32)
    previous = get_num_threads()
    try:
        set_num_threads(1)
        single = conv2d(x, spec, weight, bias).data
        set_num_threads(3)
        threaded = conv2d(x, spec, weight, bias).data
    finally:
        set_num_threads(previous)

    np.testing.assert_array_equal(single, threaded)


@pytest.mark.parametrize(
    ("kwargs", "message"),
    [
        ({"in_channels": 6, "out_channels": 4, "groups": 4}, r"groups must divide"),
        ({"in_channels": 0, "out_channels": 4}, r"in_channels must be >= 1"),
        ({"in_channels": 4, "out_channels": 4, "pad": -1}, r"pad must be a non-negative int"),
    ],
)
def test_conv_spec_rejects_invalid_configuration(kwargs: dict[str, int], message: str) -> None:
    with pytest.raises(ValueError, match=message):
        ConvSpec(**kwargs)


def test_conv_spec_rejects_non_int_channels() -> None:
    with pytest.raises(TypeError, match=r"in_channels must be int"):
        ConvSpec(2.0, 4)  # type: ignore[arg-type]


def test_conv2d_rejects_wrong_weight_shape() -> None:
    spec = ConvSpec(2, 4)
    with pytest.raises(ShapeError, match=r"conv2d weight shape must be \(4, 2, 3, 3\)"):
        conv2d(Tensor(np.zeros((1, 2, 5, 5))), spec, Tensor(np.zeros((4, 2, 1, 1))), None)


def test_conv2d_requires_bias_when_enabled() -> None:
    spec = ConvSpec(2, 4)
    with pytest.raises(ShapeError, match=r"conv2d bias must have shape \(4,\)"):
        conv2d(Tensor(np.zeros((1, 2, 5, 5))), spec, Tensor(np.zeros(spec.weight_shape)), None)


def test_conv_spec_macs_of_stem_layer() -> None:
    assert ConvSpec(3, 32).macs(44, 44) == 1_672_704


def test_maxpool_uses_padding_and_floor_output_size(rng: np.random.Generator) -> None:
    x = Tensor(rng.standard_normal((1, 2, 44, 44)))

    out = maxpool2d(x, 3, 2, 1)

    assert out.shape == (1, 2, 22, 22)
    np.testing.assert_array_equal(out.data[0, :, 0, 0], x.data[0, :, :2, :2].max(axis=(1, 2)))


def _window_scan_max(x: FloatArray, window: int, stride: int, pad: int) -> FloatArray:
    n, c, h, w = x.shape
    oh = (h + 2 * pad - window) // stride + 1
    ow = (w + 2 * pad - window) // stride + 1
    out = np.full((n, c, oh, ow), -np.inf)
    for b, ch, i, j in np.ndindex(n, c, oh, ow):
        for di, dj in np.ndindex(window, window):
            r, s = i * stride + di - pad, j * stride + dj - pad
            if 0 <= r < h and 0 <= s < w:
                out[b, ch, i, j] = max(out[b, ch, i, j], x[b, ch, r, s])
    return out


@pytest.mark.parametrize(
    ("shape", "window", "stride", "pad"),
    [
        ((1, 1, 5, 5), 3, 2, 1),
        ((2, 3, 7, 6), 3, 2, 1),
        ((1, 2, 6, 6), 2, 2, 0),
        ((1, 1, 5, 4), 3, 1, 0),
    ],
)
def test_maxpool_matches_window_scan(
    rng: np.random.Generator, shape: tuple[int, int, int, int], window: int, stride: int, pad: int
) -> None:
    x = rng.standard_normal(shape)

    out = maxpool2d(Tensor(x, dtype=np.float64), window, stride, pad)

    np.testing.assert_array_equal(out.data, _window_scan_max(x, window, stride, pad))


def test_maxpool_of_constant_input_never_selects_padding() -> None:
    out = maxpool2d(Tensor(np.full((1, 2, 6, 6), -5.0), dtype=np.float64), 3, 2, 1)

    np.testing.assert_array_equal(out.data, np.full((1, 2, 3, 3), -5.0))


def test_maxpool_routes_tied_gradient_to_first_element() -> None:
    x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True, dtype=np.float64)

    weighted_sum(maxpool2d(x, 2, 2, 0), np.ones((1, 1, 1, 1))).backward()

    assert x.grad is not None
    np.testing.assert_array_equal(x.grad[0, 0], [[1.0, 0.0], [0.0, 0.0]])


def test_maxpool_rejects_padding_wider_than_half_window() -> None:
    with pytest.raises(ValueError, match=r"pad must lie in \[0, window // 2\]"):
        maxpool2d(Tensor(np.zeros((1, 1, 4, 4))), 3, 2, 2)


def test_avgpool_drops_trailing_row_and_column() -> None:
    data = np.arange(25, dtype=np.float64).reshape(1, 1, 5, 5)

    out = avgpool2d(Tensor(data), 2, 2)

    assert out.shape == (1, 1, 2, 2)
    assert out.data[0, 0, 0, 0] == pytest.approx((0 + 1 + 5 + 6) / 4)
    assert out.data[0, 0, 1, 1] == pytest.approx((12 + 13 + 17 + 18) / 4)


def test_global_avgpool_keeps_channel_axis(rng: np.random.Generator) -> None:
    data = rng.standard_normal((2, 3, 5, 5))

    out = global_avgpool(Tensor(data, dtype=np.float64))

    assert out.shape == (2, 3, 1, 1)
    np.testing.assert_allclose(out.data[..., 0, 0], data.mean(axis=(2, 3)))


def test_batchnorm_train_normalizes_and_updates_running_stats(rng: np.random.Generator) -> None:
    x = Tensor(rng.normal(3.0, 2.0, size=(8, 4, 5, 5)), dtype=np.float64)
    state = BatchNormState.create(4, np.float64)

    out = batchnorm(x, state, Mode.TRAIN)

    np.testing.assert_allclose(out.data.mean(axis=(0, 2, 3)), 0.0, atol=1e-10)
    np.testing.assert_allclose(out.data.std(axis=(0, 2, 3)), 1.0, atol=1e-4)
    count = 8 * 5 * 5
    expected_var = 0.9 + 0.1 * x.data.var(axis=(0, 2, 3)) * count / (count - 1)
    np.testing.assert_allclose(state.running_mean, 0.1 * x.data.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(state.running_var, expected_var)


def test_batchnorm_infer_uses_running_stats_without_updating(rng: np.random.Generator) -> None:
    state = BatchNormState.create(2, np.float64)
    state.running_mean[:] = [1.0, -1.0]
    state.running_var[:] = [4.0, 1.0]
    x = Tensor(rng.standard_normal((1, 2, 3, 3)), dtype=np.float64)

    out = batchnorm(x, state, Mode.INFER)

    expected = (x.data - np.array([1.0, -1.0])[None, :, None, None]) / np.sqrt(
        np.array([4.0, 1.0])[None, :, None, None] + state.eps
    )
    np.testing.assert_allclose(out.data, expected)
    np.testing.assert_array_equal(state.running_mean, [1.0, -1.0])


def test_batchnorm_train_rejects_single_sample_batch() -> None:
    state = BatchNormState.create(2)
    with pytest.raises(ShapeError, match=r"batch size >= 2"):
        batchnorm(Tensor(np.zeros((1, 2, 3, 3))), state, Mode.TRAIN)


def test_relu_zeroes_negative_entries() -> None:
    out = relu(Tensor(np.array([[-1.0, 0.0, 2.0]])))

    np.testing.assert_array_equal(out.data, [[0.0, 0.0, 2.0]])


def test_linear_rejects_feature_mismatch() -> None:
    with pytest.raises(ShapeError, match=r"linear input features must be 3"):
        linear(Tensor(np.zeros((1, 4))), Tensor(np.zeros((2, 3))), None)


def test_softmax_cross_entropy_matches_log_softmax(rng: np.random.Generator) -> None:
    logits = rng.standard_normal((4, 7))
    labels = np.array([0, 3, 6, 2])

    loss, probs = softmax_cross_entropy(Tensor(logits, dtype=np.float64), labels)

    log_probs = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
    assert loss.item() == pytest.approx(-log_probs[np.arange(4), labels].mean())
    np.testing.assert_allclose(probs.sum(axis=1), 1.0)


def test_softmax_cross_entropy_rejects_label_out_of_range() -> None:
    with pytest.raises(ValueError, match=r"label out of range \[0, 7\): 7"):
        softmax_cross_entropy(Tensor(np.zeros((1, 7))), [7])


def test_softmax_cross_entropy_of_uniform_logits_is_log_k() -> None:
    loss, probs = softmax_cross_entropy(Tensor(np.zeros((3, 7)), dtype=np.float64), [0, 4, 6])

    assert loss.item() == pytest.approx(np.log(7))
    np.testing.assert_allclose(probs, 1 / 7)


def test_softmax_cross_entropy_saturates_on_dominant_true_logit() -> None:
    logits = np.zeros((2, 7))
    logits[0, 2] = 1000.0
    logits[1, 5] = 1000.0

    loss, probs = softmax_cross_entropy(Tensor(logits, dtype=np.float64), [2, 5])

    assert 0.0 <= loss.item() < 1e-6
    assert np.isfinite(probs).all()
