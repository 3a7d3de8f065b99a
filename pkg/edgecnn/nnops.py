"""Forward and backward kernels for every layer type EdgeCNN uses.

Convolution is cross-correlation with zero padding. Two paths exist:

- :func:`conv2d` lowers the input to a patch matrix (im2col) and multiplies it
  with the reshaped weights; this is the path the network runs on.
- :func:`conv2d_reference` is a direct loop over output elements. It is slow
  and only serves as the oracle for the fast path.

Pooling uses floor-mode output sizing. Batch norm normalizes with the biased
batch variance and tracks running statistics with ``momentum`` (running
variance uses the unbiased estimate).
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from enum import StrEnum

import numpy as np
import numpy.typing as npt
from numpy.lib.stride_tricks import sliding_window_view

from edgecnn.errors import ShapeError, validate_count
from edgecnn.tensor import FloatArray, Tensor, require_rank

logger = logging.getLogger(__name__)

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class Mode(StrEnum):
    TRAIN = "train"
    INFER = "infer"


@dataclass(slots=True)
class _KernelSettings:
    threads: int = 1


_settings = _KernelSettings()


def set_num_threads(threads: int) -> None:
    """Cap the worker threads used by the fast convolution path."""
    validate_count("threads", threads)
    _settings.threads = threads
    logger.debug("convolution kernels capped at %d thread(s)", threads)


def get_num_threads() -> int:
    return _settings.threads


@dataclass(frozen=True, slots=True)
class ConvSpec:
    """Static description of one 2-D convolution."""

    in_channels: int
    out_channels: int
    kernel: tuple[int, int] = (3, 3)
    stride: int = 1
    pad: int = 1
    groups: int = 1
    bias_enabled: bool = True

    def __post_init__(self) -> None:
        validate_count("in_channels", self.in_channels)
        validate_count("out_channels", self.out_channels)
        validate_count("kernel height", self.kernel[0])
        validate_count("kernel width", self.kernel[1])
        validate_count("stride", self.stride)
        validate_count("groups", self.groups)
        if isinstance(self.pad, bool) or not isinstance(self.pad, int) or self.pad < 0:
            raise ValueError(f"pad must be a non-negative int: {self.pad!r}")
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ValueError(
                "groups must divide in_channels and out_channels: "
                f"in={self.in_channels}, out={self.out_channels}, groups={self.groups}"
            )

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        kh, kw = self.kernel
        return (self.out_channels, self.in_channels // self.groups, kh, kw)

    @property
    def is_pointwise(self) -> bool:
        return self.kernel == (1, 1)

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        kh, kw = self.kernel
        oh = (h + 2 * self.pad - kh) // self.stride + 1
        ow = (w + 2 * self.pad - kw) // self.stride + 1
        if oh <= 0 or ow <= 0:
            raise ShapeError(
                f"convolution output must be positive: input={h}x{w}, spec={self}"
            )
        return oh, ow

    def dense(self) -> ConvSpec:
        """Same convolution with ``groups=1``."""
        return replace(self, groups=1)

    def macs(self, h: int, w: int) -> int:
        oh, ow = self.output_hw(h, w)
        kh, kw = self.kernel
        return oh * ow * self.out_channels * (self.in_channels // self.groups) * kh * kw


@dataclass(slots=True)
class BatchNormState:
    """Learnable scale/shift plus running statistics for one channel set."""

    gamma: Tensor
    beta: Tensor
    running_mean: FloatArray
    running_var: FloatArray
    eps: float = BN_EPS
    momentum: float = BN_MOMENTUM

    def __post_init__(self) -> None:
        channels = self.gamma.shape[0] if self.gamma.data.ndim == 1 else -1
        for name, length in (
            ("gamma", self.gamma.data.shape),
            ("beta", self.beta.data.shape),
            ("running_mean", self.running_mean.shape),
            ("running_var", self.running_var.shape),
        ):
            if length != (channels,):
                raise ShapeError(f"batch norm {name} must have shape ({channels},): {length}")
        if (self.running_var < 0).any():
            raise ValueError(f"running_var must be non-negative: min={self.running_var.min()!r}")
        if not self.eps > 0:
            raise ValueError(f"eps must be positive: {self.eps!r}")
        if not 0 < self.momentum < 1:
            raise ValueError(f"momentum must lie in (0, 1): {self.momentum!r}")

    @classmethod
    def create(cls, channels: int, dtype: npt.DTypeLike = np.float32) -> BatchNormState:
        validate_count("channels", channels)
        return cls(
            gamma=Tensor(np.ones(channels), requires_grad=True, dtype=dtype),
            beta=Tensor(np.zeros(channels), requires_grad=True, dtype=dtype),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
        )

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


def he_normal(
    shape: tuple[int, ...], fan_in: int, rng: np.random.Generator, dtype: npt.DTypeLike
) -> FloatArray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


def he_uniform(
    shape: tuple[int, ...], fan_in: int, rng: np.random.Generator, dtype: npt.DTypeLike
) -> FloatArray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


# --- convolution -------------------------------------------------------------


def _check_conv_args(x: Tensor, spec: ConvSpec, weight: Tensor, bias: Tensor | None) -> None:
    require_rank(x, 4, op="conv2d")
    if x.shape[1] != spec.in_channels:
        raise ShapeError(
            f"conv2d input channels must equal in_channels: x={x.shape}, in={spec.in_channels}"
        )
    if weight.shape != spec.weight_shape:
        raise ShapeError(
            f"conv2d weight shape must be {spec.weight_shape}: got {weight.shape}"
        )
    if spec.bias_enabled:
        if bias is None or bias.shape != (spec.out_channels,):
            got = None if bias is None else bias.shape
            raise ShapeError(f"conv2d bias must have shape ({spec.out_channels},): {got}")
    elif bias is not None:
        raise ShapeError("conv2d bias given but spec.bias_enabled is False")


def _patches(xp: FloatArray, spec: ConvSpec, oh: int, ow: int) -> FloatArray:
    """Patch matrix ``(n, g, oh*ow, cg*kh*kw)`` of a padded input."""
    kh, kw = spec.kernel
    s = spec.stride
    n = xp.shape[0]
    g = spec.groups
    cg = spec.in_channels // g
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s][:, :, :oh, :ow]
    grouped = windows.reshape(n, g, cg, oh, ow, kh, kw).transpose(0, 1, 3, 4, 2, 5, 6)
    return grouped.reshape(n, g, oh * ow, cg * kh * kw)


def _matmul_batched(cols: FloatArray, w_mat: FloatArray) -> FloatArray:
    threads = _settings.threads
    n = cols.shape[0]
    if threads <= 1 or n <= 1:
        return np.matmul(cols, w_mat)
    chunks = np.array_split(np.arange(n), min(threads, n))
    with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
        parts = list(pool.map(lambda idx: np.matmul(cols[idx[0] : idx[-1] + 1], w_mat), chunks))
    return np.concatenate(parts, axis=0)


def conv2d(x: Tensor, spec: ConvSpec, weight: Tensor, bias: Tensor | None) -> Tensor:
    """Grouped 2-D cross-correlation through the patch-matrix path."""
    _check_conv_args(x, spec, weight, bias)
    n, c, h, w = x.shape
    oh, ow = spec.output_hw(h, w)
    kh, kw = spec.kernel
    g = spec.groups
    cg = c // g
    og = spec.out_channels // g
    p = spec.pad
    s = spec.stride

    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    cols = _patches(xp, spec, oh, ow)
    w_mat = weight.data.reshape(g, og, cg * kh * kw).transpose(0, 2, 1)
    out = _matmul_batched(cols, w_mat)
    data = out.transpose(0, 1, 3, 2).reshape(n, spec.out_channels, oh, ow)
    if bias is not None:
        data = data + bias.data[None, :, None, None]

    def backward(grad: FloatArray) -> None:
        go = grad.reshape(n, g, og, oh * ow).transpose(0, 1, 3, 2)
        if weight.requires_grad:
            cols_g = cols.transpose(1, 0, 2, 3).reshape(g, n * oh * ow, cg * kh * kw)
            go_g = go.transpose(1, 0, 2, 3).reshape(g, n * oh * ow, og)
            dw = np.matmul(cols_g.transpose(0, 2, 1), go_g)
            weight.accumulate_grad(dw.transpose(0, 2, 1).reshape(spec.weight_shape))
        if bias is not None and bias.requires_grad:
            bias.accumulate_grad(grad.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dcols = np.matmul(go, w_mat.transpose(0, 2, 1))
            dcols = dcols.reshape(n, g, oh, ow, cg, kh, kw).transpose(0, 1, 4, 5, 6, 2, 3)
            dcols = dcols.reshape(n, c, kh, kw, oh, ow)
            dxp = np.zeros(xp.shape, dtype=x.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + s * (oh - 1) + 1 : s, j : j + s * (ow - 1) + 1 : s] += dcols[
                        :, :, i, j
                    ]
            x.accumulate_grad(dxp[:, :, p : p + h, p : p + w] if p else dxp)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor.from_op(np.ascontiguousarray(data), parents, backward, op="conv2d")


def conv2d_reference(
    x: FloatArray, spec: ConvSpec, weight: FloatArray, bias: FloatArray | None
) -> FloatArray:
    """Direct-loop convolution; the oracle for :func:`conv2d`."""
    n, c, h, w = x.shape
    if c != spec.in_channels or weight.shape != spec.weight_shape:
        raise ShapeError(f"conv2d_reference shapes disagree: x={x.shape}, w={weight.shape}")
    oh, ow = spec.output_hw(h, w)
    kh, kw = spec.kernel
    cg = spec.in_channels // spec.groups
    og = spec.out_channels // spec.groups
    p = spec.pad
    s = spec.stride
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    out = np.zeros((n, spec.out_channels, oh, ow), dtype=x.dtype)
    for b in range(n):
        for o in range(spec.out_channels):
            lo = (o // og) * cg
            for oy in range(oh):
                for ox in range(ow):
                    window = xp[b, lo : lo + cg, oy * s : oy * s + kh, ox * s : ox * s + kw]
                    acc = float(np.sum(window * weight[o]))
                    out[b, o, oy, ox] = acc + (float(bias[o]) if bias is not None else 0.0)
    return out


# --- pooling -----------------------------------------------------------------


def _pool_output(h: int, w: int, window: int, stride: int, pad: int, op: str) -> tuple[int, int]:
    oh = (h + 2 * pad - window) // stride + 1
    ow = (w + 2 * pad - window) // stride + 1
    if oh <= 0 or ow <= 0:
        raise ShapeError(
            f"{op} output must be positive: input={h}x{w}, window={window}, stride={stride}"
        )
    return oh, ow


def maxpool2d(x: Tensor, window: int = 3, stride: int = 2, pad: int = 1) -> Tensor:
    """Window maximum; ties resolve to the first element in row-major order."""
    require_rank(x, 4, op="maxpool2d")
    validate_count("window", window)
    validate_count("stride", stride)
    if pad < 0 or pad > window // 2:
        raise ValueError(f"pad must lie in [0, window // 2]: pad={pad}, window={window}")
    n, c, h, w = x.shape
    oh, ow = _pool_output(h, w, window, stride, pad, "maxpool2d")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=-np.inf)
    windows = sliding_window_view(xp, (window, window), axis=(2, 3))[
        :, :, ::stride, ::stride
    ][:, :, :oh, :ow]
    flat = windows.reshape(n, c, oh, ow, window * window)
    arg = flat.argmax(axis=-1)
    data = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(grad: FloatArray) -> None:
        rows = np.arange(oh)[:, None] * stride + arg // window
        cols = np.arange(ow)[None, :] * stride + arg % window
        nn_idx = np.arange(n)[:, None, None, None]
        cc_idx = np.arange(c)[None, :, None, None]
        gp = np.zeros(xp.shape, dtype=x.dtype)
        np.add.at(gp, (nn_idx, cc_idx, rows, cols), grad)
        x.accumulate_grad(gp[:, :, pad : pad + h, pad : pad + w])

    return Tensor.from_op(np.ascontiguousarray(data), (x,), backward, op="maxpool2d")


def avgpool2d(x: Tensor, window: int = 2, stride: int = 2) -> Tensor:
    """Window mean; floor mode drops trailing rows and columns."""
    require_rank(x, 4, op="avgpool2d")
    validate_count("window", window)
    validate_count("stride", stride)
    n, c, h, w = x.shape
    oh, ow = _pool_output(h, w, window, stride, 0, "avgpool2d")

    windows = sliding_window_view(x.data, (window, window), axis=(2, 3))[
        :, :, ::stride, ::stride
    ][:, :, :oh, :ow]
    data = windows.mean(axis=(-2, -1))

    def backward(grad: FloatArray) -> None:
        gx = np.zeros_like(x.data)
        share = grad / (window * window)
        for i in range(window):
            for j in range(window):
                gx[
                    :,
                    :,
                    i : i + stride * (oh - 1) + 1 : stride,
                    j : j + stride * (ow - 1) + 1 : stride,
                ] += share
        x.accumulate_grad(gx)

    return Tensor.from_op(np.ascontiguousarray(data), (x,), backward, op="avgpool2d")


def global_avgpool(x: Tensor) -> Tensor:
    require_rank(x, 4, op="global_avgpool")
    h, w = x.shape[2], x.shape[3]
    data = x.data.mean(axis=(2, 3), keepdims=True)

    def backward(grad: FloatArray) -> None:
        x.accumulate_grad(np.broadcast_to(grad / (h * w), x.data.shape).copy())

    return Tensor.from_op(data, (x,), backward, op="global_avgpool")


# --- normalization and activation --------------------------------------------


def batchnorm(x: Tensor, state: BatchNormState, mode: Mode) -> Tensor:
    """Per-channel batch normalization; train mode updates running stats."""
    require_rank(x, 4, op="batchnorm")
    n, c, h, w = x.shape
    if c != state.channels:
        raise ShapeError(f"batchnorm channels must be {state.channels}: x={x.shape}")
    axes = (0, 2, 3)
    count = n * h * w
    gamma = state.gamma.data.astype(x.dtype, copy=False)[None, :, None, None]
    beta = state.beta.data.astype(x.dtype, copy=False)[None, :, None, None]

    if mode is Mode.TRAIN:
        if n < 2:
            raise ShapeError(f"train-mode batch norm needs batch size >= 2: n={n}")
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        m = state.momentum
        state.running_mean[:] = (1 - m) * state.running_mean + m * mean
        state.running_var[:] = (1 - m) * state.running_var + m * var * count / (count - 1)
    else:
        mean = state.running_mean.astype(x.dtype, copy=False)
        var = state.running_var.astype(x.dtype, copy=False)

    inv_std = (1.0 / np.sqrt(var + state.eps)).astype(x.dtype)[None, :, None, None]
    xhat = (x.data - mean.astype(x.dtype)[None, :, None, None]) * inv_std
    data = gamma * xhat + beta

    def backward(grad: FloatArray) -> None:
        if state.gamma.requires_grad:
            state.gamma.accumulate_grad((grad * xhat).sum(axis=axes).astype(state.gamma.dtype))
        if state.beta.requires_grad:
            state.beta.accumulate_grad(grad.sum(axis=axes).astype(state.beta.dtype))
        if not x.requires_grad:
            return
        dxhat = grad * gamma
        if mode is Mode.TRAIN:
            dx = (
                inv_std
                / count
                * (
                    count * dxhat
                    - dxhat.sum(axis=axes, keepdims=True)
                    - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True)
                )
            )
        else:
            dx = dxhat * inv_std
        x.accumulate_grad(dx)

    return Tensor.from_op(data, (x, state.gamma, state.beta), backward, op="batchnorm")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    data = np.where(mask, x.data, 0).astype(x.dtype)

    def backward(grad: FloatArray) -> None:
        x.accumulate_grad(grad * mask)

    return Tensor.from_op(data, (x,), backward, op="relu")


# --- classifier --------------------------------------------------------------


def linear(x: Tensor, weight: Tensor, bias: Tensor | None) -> Tensor:
    """Affine map ``x @ weight.T + bias`` on ``(n, f)`` features."""
    require_rank(x, 2, op="linear")
    require_rank(weight, 2, op="linear weight")
    out_features, in_features = weight.shape
    if x.shape[1] != in_features:
        raise ShapeError(f"linear input features must be {in_features}: x={x.shape}")
    if bias is not None and bias.shape != (out_features,):
        raise ShapeError(f"linear bias must have shape ({out_features},): {bias.shape}")
    data = x.data @ weight.data.T
    if bias is not None:
        data = data + bias.data[None, :]

    def backward(grad: FloatArray) -> None:
        x.accumulate_grad(grad @ weight.data)
        weight.accumulate_grad(grad.T @ x.data)
        if bias is not None:
            bias.accumulate_grad(grad.sum(axis=0))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor.from_op(np.ascontiguousarray(data), parents, backward, op="linear")


def softmax(logits: FloatArray) -> FloatArray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=1, keepdims=True)


def softmax_cross_entropy(
    logits: Tensor, labels: npt.ArrayLike
) -> tuple[Tensor, FloatArray]:
    """Mean negative log-likelihood and the softmax probabilities."""
    require_rank(logits, 2, op="softmax_cross_entropy")
    n, k = logits.shape
    targets = np.asarray(labels, dtype=np.int64).reshape(-1)
    if targets.shape != (n,):
        raise ShapeError(f"labels must have length {n}: got {targets.shape}")
    bad = targets[(targets < 0) | (targets >= k)]
    if bad.size:
        raise ValueError(f"label out of range [0, {k}): {int(bad[0])}")

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_norm
    probs = np.exp(log_probs)
    rows = np.arange(n)
    loss = np.asarray(-log_probs[rows, targets].mean(), dtype=logits.dtype)

    def backward(grad: FloatArray) -> None:
        delta = probs.copy()
        delta[rows, targets] -= 1
        logits.accumulate_grad(delta * (grad / n))

    return Tensor.from_op(loss, (logits,), backward, op="softmax_cross_entropy"), probs
