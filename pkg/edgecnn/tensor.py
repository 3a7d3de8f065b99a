"""NCHW tensor value type with reverse-mode gradient tracking.

A :class:`Tensor` wraps a contiguous numpy array together with an optional
gradient buffer. Operations in :mod:`edgecnn.nnops`, :mod:`edgecnn.lgc` and this
module build result tensors through :meth:`Tensor.from_op`, which records the
parents and a closure that pushes the upstream gradient back into them.
:meth:`Tensor.backward` replays those closures in reverse topological order.

Supported ranks:
    - 4: ``(n, c, h, w)`` feature maps, the universal carrier.
    - 2: ``(n, f)`` flattened features and logits.
    - 1: per-channel parameters (biases, batch-norm scale and shift).
    - 0: scalar losses.

Gradients accumulate (``+=``) across every consumer of a tensor; dense
connectivity fans one feature map into many layers. The training loop zeroes
them explicitly.
"""

from __future__ import annotations

from collections.abc import Callable, Sequence
from enum import StrEnum
from typing import Any

import numpy as np
import numpy.typing as npt

from edgecnn.errors import NonFiniteError, ShapeError

type FloatArray = npt.NDArray[np.floating[Any]]
type BackwardFn = Callable[[FloatArray], None]

_ALLOWED_RANKS = frozenset({0, 1, 2, 4})
_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class Precision(StrEnum):
    """Element precision; 64-bit is used for gradient checking."""

    F32 = "f32"
    F64 = "f64"

    @property
    def dtype(self) -> np.dtype[np.floating[Any]]:
        return np.dtype(np.float32) if self is Precision.F32 else np.dtype(np.float64)


class Tensor:
    """Rank 0/1/2/4 real array with an optional accumulated gradient."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn", "_op")

    def __init__(
        self,
        data: npt.ArrayLike,
        *,
        requires_grad: bool = False,
        dtype: npt.DTypeLike | None = None,
    ) -> None:
        array = np.asarray(data)
        if dtype is not None:
            array = array.astype(dtype, copy=False)
        elif array.dtype not in _FLOAT_DTYPES:
            array = array.astype(np.float32)
        if array.dtype not in _FLOAT_DTYPES:
            raise TypeError(f"tensor dtype must be float32 or float64: {array.dtype}")
        if array.ndim not in _ALLOWED_RANKS:
            raise ShapeError(f"tensor rank must be one of 0, 1, 2, 4: shape={array.shape}")
        if not array.flags.c_contiguous:
            array = np.ascontiguousarray(array)
        self.data: FloatArray = array
        self.requires_grad = requires_grad
        self.grad: FloatArray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: BackwardFn | None = None
        self._op = "leaf"

    @classmethod
    def from_op(
        cls,
        data: FloatArray,
        parents: Sequence[Tensor],
        backward_fn: BackwardFn,
        *,
        op: str,
    ) -> Tensor:
        """Wrap an operation result, wiring the backward closure when needed."""
        if not np.isfinite(data).all():
            raise NonFiniteError(f"{op} produced non-finite values: shape={data.shape}")
        out = cls(data, dtype=data.dtype)
        out._op = op
        if any(parent.requires_grad for parent in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward_fn = backward_fn
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(int(dim) for dim in self.data.shape)

    @property
    def dtype(self) -> np.dtype[Any]:
        return self.data.dtype

    @property
    def op(self) -> str:
        return self._op

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self._op!r})"

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor: shape={self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> FloatArray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, grad: FloatArray) -> None:
        """Add ``grad`` into this tensor's buffer (single-writer contract)."""
        if not self.requires_grad:
            return
        if grad.shape != self.data.shape:
            raise ShapeError(
                f"gradient shape must match tensor: grad={grad.shape}, tensor={self.data.shape}"
            )
        if self.grad is None:
            self.grad = np.array(grad, dtype=self.data.dtype, copy=True)
        else:
            self.grad += grad

    def backward(self, grad: npt.ArrayLike | None = None) -> None:
        """Propagate ``grad`` (ones for a scalar) to every reachable tensor."""
        if not self.requires_grad:
            raise ValueError("backward called on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"implicit gradient needs a scalar tensor: shape={self.shape}")
            seed = np.ones_like(self.data)
        else:
            seed = np.asarray(grad, dtype=self.data.dtype).reshape(self.data.shape)
        self.accumulate_grad(seed)

        for node in reversed(_topological_order(self)):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def require_rank(x: Tensor, rank: int, *, op: str) -> None:
    if x.data.ndim != rank:
        raise ShapeError(f"{op} expects a rank-{rank} tensor: shape={x.shape}")


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate rank-4 tensors along the channel axis in input order."""
    if not parts:
        raise ValueError("concat_channels needs at least one part")
    for part in parts:
        require_rank(part, 4, op="concat_channels")
    n, _, h, w = parts[0].shape
    for index, part in enumerate(parts):
        if (part.shape[0], part.shape[2], part.shape[3]) != (n, h, w):
            raise ShapeError(
                "concat_channels parts must share n, h, w: "
                f"part 0={parts[0].shape}, part {index}={part.shape}"
            )
        if part.dtype != parts[0].dtype:
            raise TypeError(f"concat_channels parts must share dtype: part {index}={part.dtype}")

    bounds = np.cumsum([0, *(part.shape[1] for part in parts)])
    data = np.concatenate([part.data for part in parts], axis=1)

    def backward(grad: FloatArray) -> None:
        for part, start, stop in zip(parts, bounds[:-1], bounds[1:], strict=True):
            part.accumulate_grad(grad[:, start:stop])

    return Tensor.from_op(data, parts, backward, op="concat_channels")


def index_select_channels(x: Tensor, idx: Sequence[int]) -> Tensor:
    """Gather channels: output channel ``k`` is input channel ``idx[k]``."""
    require_rank(x, 4, op="index_select_channels")
    channels = x.shape[1]
    indices = np.asarray(idx, dtype=np.int64)
    if indices.ndim != 1:
        raise ShapeError(f"channel index list must be flat: shape={indices.shape}")
    bad = indices[(indices < 0) | (indices >= channels)]
    if bad.size:
        raise IndexError(f"channel index out of range [0, {channels}): {int(bad[0])}")

    data = np.ascontiguousarray(x.data[:, indices])

    def backward(grad: FloatArray) -> None:
        gx = np.zeros_like(x.data)
        np.add.at(gx, (slice(None), indices), grad)
        x.accumulate_grad(gx)

    return Tensor.from_op(data, (x,), backward, op="index_select_channels")


def flatten(x: Tensor) -> Tensor:
    """Reshape ``(n, c, h, w)`` to ``(n, c*h*w)`` preserving element order."""
    require_rank(x, 4, op="flatten")
    n = x.shape[0]
    data = x.data.reshape(n, -1)

    def backward(grad: FloatArray) -> None:
        x.accumulate_grad(grad.reshape(x.data.shape))

    return Tensor.from_op(data, (x,), backward, op="flatten")
