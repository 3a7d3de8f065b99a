"""Exception taxonomy shared by the library and the CLI."""

from __future__ import annotations

from pathlib import Path

import numpy as np


class EdgeCNNError(Exception):
    """Base class for every error raised deliberately by edgecnn."""


class ShapeError(EdgeCNNError, ValueError):
    """A tensor or kernel shape contract was broken."""


class NonFiniteError(EdgeCNNError, ArithmeticError):
    """An operation produced NaN or Inf."""


class ChannelPlanError(EdgeCNNError, ValueError):
    """The architecture description is internally inconsistent."""


class CondensationError(EdgeCNNError, ValueError):
    """A learned group convolution was asked for an illegal transition."""


class DataError(EdgeCNNError, ValueError):
    """Dataset input could not be parsed."""

    def __init__(self, message: str, *, path: Path | str | None = None, row: int | None = None):
        location = ""
        if path is not None:
            location = f"{path}"
            if row is not None:
                location += f":{row}"
            location += ": "
        super().__init__(f"{location}{message}")
        self.path = path
        self.row = row


class CheckpointFormatError(EdgeCNNError, ValueError):
    """A checkpoint file is corrupt, truncated or of an unknown version."""


class CheckpointMismatchError(EdgeCNNError, ValueError):
    """A checkpoint disagrees with the architecture it claims to describe."""


class TrainingDivergedError(EdgeCNNError, ArithmeticError):
    """The training loss became non-finite."""

    def __init__(self, *, epoch: int, batch: int, lr: float, loss: float):
        super().__init__(
            f"non-finite loss {loss!r} at epoch={epoch}, batch={batch}, lr={lr:g}"
        )
        self.epoch = epoch
        self.batch = batch
        self.lr = lr
        self.loss = loss


class UsageError(EdgeCNNError):
    """Command-line usage problem."""


def validate_count(name: str, value: object) -> None:
    """Reject anything but a positive int, naming the offending value."""
    if isinstance(value, bool) or not isinstance(value, int | np.integer):
        raise TypeError(f"{name} must be int: {value!r}")
    if value < 1:
        raise ValueError(f"{name} must be >= 1: {value!r}")
