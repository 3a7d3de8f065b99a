"""SGD training with the step-after-80 schedule, plus ten-crop evaluation."""

from __future__ import annotations

import csv
import logging
import time
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import numpy.typing as npt

from edgecnn.checkpoint import Checkpoint, checkpoint_from_model, save_checkpoint
from edgecnn.data import (
    NUM_CLASSES,
    BatchLoader,
    DatasetSplits,
    LabeledImage,
    Normalization,
    center_crop_input,
    ten_crop_probabilities,
)
from edgecnn.errors import NonFiniteError, ShapeError, TrainingDivergedError
from edgecnn.lgc import condensation_stage_for_epoch, condense
from edgecnn.model import Model, Parameter, ParamKind, forward
from edgecnn.nnops import Mode, softmax_cross_entropy
from edgecnn.tensor import FloatArray

logger = logging.getLogger(__name__)

METRIC_FIELDS = ("epoch", "lr", "train_loss", "train_acc", "val_acc", "wall_seconds")


@dataclass(frozen=True, slots=True)
class TrainConfig:
    base_lr: float = 1e-2
    weight_decay: float = 5e-4
    momentum: float = 0.9
    batch_size: int = 128
    total_epochs: int = 120
    decay_start: int = 80
    decay_every: int = 5
    decay_factor: float = 0.1
    seed: int = 0
    decay_bn_and_bias: bool = False

    def __post_init__(self) -> None:
        if not self.base_lr > 0:
            raise ValueError(f"base_lr must be positive: {self.base_lr!r}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be non-negative: {self.weight_decay!r}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must lie in [0, 1): {self.momentum!r}")
        for name in ("batch_size", "total_epochs", "decay_every"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, int) or value < 1:
                raise ValueError(f"{name} must be an int >= 1: {value!r}")
        if self.decay_start < 0:
            raise ValueError(f"decay_start must be non-negative: {self.decay_start!r}")
        if not 0 < self.decay_factor <= 1:
            raise ValueError(f"decay_factor must lie in (0, 1]: {self.decay_factor!r}")


def lr_at_epoch(epoch: int, config: TrainConfig) -> float:
    """``base_lr`` until ``decay_start``, then one ``decay_factor`` drop per ``decay_every``."""
    if not 0 <= epoch < config.total_epochs:
        raise ValueError(f"epoch must lie in [0, {config.total_epochs}): {epoch!r}")
    if epoch < config.decay_start:
        return config.base_lr
    drops = (epoch - config.decay_start) // config.decay_every + 1
    return config.base_lr * config.decay_factor**drops


@dataclass(slots=True)
class OptimizerState:
    """Momentum buffers keyed by parameter name."""

    velocity: dict[str, FloatArray] = field(default_factory=dict)


def sgd_step(
    params: Sequence[Parameter],
    state: OptimizerState,
    lr: float,
    config: TrainConfig,
    grads: Mapping[str, FloatArray] | None = None,
) -> None:
    """One momentum SGD update in place.

    Gradients come from ``grads`` when given, otherwise from each tensor's
    buffer. Masked parameters have gradient and velocity masked, so pruned
    entries never move.
    """
    for param in params:
        data = param.tensor.data
        grad = grads[param.name] if grads is not None else param.tensor.grad
        if grad is None:
            grad = np.zeros_like(data)
        if grad.shape != data.shape:
            raise ShapeError(
                f"gradient shape for {param.name} must be {data.shape}: {grad.shape}"
            )
        step = grad.astype(data.dtype, copy=True)
        if param.mask is not None:
            step *= param.mask
        if config.weight_decay and (param.kind is ParamKind.WEIGHT or config.decay_bn_and_bias):
            step += config.weight_decay * data
        velocity = state.velocity.get(param.name)
        if velocity is None:
            velocity = np.zeros_like(data)
        velocity = config.momentum * velocity + step
        if param.mask is not None:
            velocity *= param.mask
        state.velocity[param.name] = velocity.astype(data.dtype, copy=False)
        data -= lr * state.velocity[param.name]


def condensation_schedule(total_epochs: int, C: int) -> list[int]:
    """Epochs at whose start a layer with factor ``C`` advances one stage."""
    events: list[int] = []
    previous = 0
    for epoch in range(total_epochs):
        stage = condensation_stage_for_epoch(epoch, total_epochs, C)
        if stage > previous:
            events.append(epoch)
        previous = stage
    return events


def apply_condensation(model: Model, epoch: int, total_epochs: int) -> list[str]:
    """Bring every learned group convolution up to the stage due at ``epoch``."""
    advanced: list[str] = []
    for layer in model.learned_group_convs():
        target = condensation_stage_for_epoch(epoch, total_epochs, layer.state.C)
        while layer.state.stage < target:
            condense(layer.state)
            advanced.append(layer.name)
    return advanced


@dataclass(frozen=True, slots=True)
class EpochMetrics:
    epoch: int
    lr: float
    train_loss: float
    train_acc: float
    val_acc: float
    wall_seconds: float

    def as_row(self) -> dict[str, str]:
        return {
            "epoch": str(self.epoch),
            "lr": repr(self.lr),
            "train_loss": repr(self.train_loss),
            "train_acc": repr(self.train_acc),
            "val_acc": repr(self.val_acc),
            "wall_seconds": f"{self.wall_seconds:.3f}",
        }


@dataclass(slots=True)
class TrainResult:
    history: list[EpochMetrics]
    condense_epochs: dict[str, list[int]]
    checkpoint: Checkpoint
    best_val_acc: float


def append_metrics(path: Path, metrics: EpochMetrics) -> None:
    """Append one row to the metric log, writing the header for a new file."""
    new_file = not path.exists() or path.stat().st_size == 0
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("a", newline="", encoding="utf-8") as handle:
        writer = csv.DictWriter(handle, fieldnames=METRIC_FIELDS)
        if new_file:
            writer.writeheader()
        writer.writerow(metrics.as_row())


def center_crop_accuracy(
    model: Model,
    images: Sequence[LabeledImage],
    normalization: Normalization,
    *,
    chunk: int = 64,
) -> float:
    if not images:
        return 0.0
    correct = 0
    for start in range(0, len(images), chunk):
        group = images[start : start + chunk]
        logits = forward(model, center_crop_input(group, normalization, model.dtype), Mode.INFER)
        predicted = logits.data.argmax(axis=1)
        correct += int((predicted == np.array([img.label for img in group])).sum())
    return correct / len(images)


def train(
    model: Model,
    datasets: DatasetSplits,
    config: TrainConfig,
    *,
    normalization: Normalization | None = None,
    out_dir: Path | None = None,
    start_epoch: int = 0,
    optimizer: OptimizerState | None = None,
    prefetch: int = 2,
) -> TrainResult:
    """Run epochs ``start_epoch .. total_epochs - 1``.

    With ``out_dir`` set, ``metrics.csv`` gains one row per epoch and
    ``last.ecnw`` / ``best.ecnw`` are refreshed after every epoch.
    """
    if not datasets.train:
        raise ValueError("training split is empty")
    norm = normalization or Normalization.from_images(datasets.train)
    opt = optimizer or OptimizerState()
    loader = BatchLoader(
        datasets.train,
        norm,
        batch_size=config.batch_size,
        seed=config.seed,
        prefetch=prefetch,
        dtype=model.dtype,
    )
    history: list[EpochMetrics] = []
    condense_epochs: dict[str, list[int]] = {}
    best_val = -1.0
    last: Checkpoint | None = None

    for epoch in range(start_epoch, config.total_epochs):
        started = time.perf_counter()
        for name in apply_condensation(model, epoch, config.total_epochs):
            condense_epochs.setdefault(name, []).append(epoch)
        lr = lr_at_epoch(epoch, config)
        params = model.parameters()
        loss_sum = 0.0
        correct = 0
        seen = 0
        for index, batch in enumerate(loader.epoch(epoch)):
            model.zero_grad()
            try:
                logits = forward(model, batch.images, Mode.TRAIN)
                loss, probs = softmax_cross_entropy(logits, batch.labels)
            except NonFiniteError as exc:
                raise TrainingDivergedError(
                    epoch=epoch, batch=index, lr=lr, loss=float("nan")
                ) from exc
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDivergedError(epoch=epoch, batch=index, lr=lr, loss=value)
            loss.backward()
            sgd_step(params, opt, lr, config)
            loss_sum += value * len(batch)
            correct += int((probs.argmax(axis=1) == batch.labels).sum())
            seen += len(batch)
            logger.debug("epoch %d batch %d loss %.5f", epoch, index, value)

        val_acc = center_crop_accuracy(model, datasets.validation, norm)
        metrics = EpochMetrics(
            epoch=epoch,
            lr=lr,
            train_loss=loss_sum / max(seen, 1),
            train_acc=correct / max(seen, 1),
            val_acc=val_acc,
            wall_seconds=time.perf_counter() - started,
        )
        history.append(metrics)
        logger.info(
            "epoch %d lr=%g loss=%.4f train_acc=%.4f val_acc=%.4f (%.1fs)",
            epoch,
            lr,
            metrics.train_loss,
            metrics.train_acc,
            val_acc,
            metrics.wall_seconds,
        )
        improved = val_acc > best_val
        best_val = max(best_val, val_acc)
        last = checkpoint_from_model(
            model,
            epoch=epoch + 1,
            seed=config.seed,
            normalization=norm,
            optimizer=opt.velocity,
            best_val_acc=best_val,
        )
        if out_dir is not None:
            append_metrics(out_dir / "metrics.csv", metrics)
            save_checkpoint(last, out_dir / "last.ecnw")
            if improved:
                save_checkpoint(last, out_dir / "best.ecnw")

    if last is None:
        last = checkpoint_from_model(
            model, epoch=start_epoch, seed=config.seed, normalization=norm, optimizer=opt.velocity
        )
    return TrainResult(
        history=history,
        condense_epochs=condense_epochs,
        checkpoint=last,
        best_val_acc=max(best_val, 0.0),
    )


@dataclass(frozen=True, slots=True)
class EvalResult:
    accuracy: float
    confusion: npt.NDArray[np.int64]

    @property
    def total(self) -> int:
        return int(self.confusion.sum())

    def per_class_counts(self) -> npt.NDArray[np.int64]:
        return self.confusion.sum(axis=1)


def evaluate(
    model: Model,
    images: Sequence[LabeledImage],
    normalization: Normalization,
    *,
    rng: np.random.Generator | None = None,
    random_crops: bool = False,
) -> EvalResult:
    """Ten-crop accuracy and the confusion matrix (rows true, columns predicted)."""
    if not images:
        raise ValueError("evaluation split is empty")
    probs = ten_crop_probabilities(
        model, images, normalization, rng=rng, random_crops=random_crops
    )
    predicted = probs.argmax(axis=1)
    confusion = np.zeros((NUM_CLASSES, NUM_CLASSES), dtype=np.int64)
    for image, guess in zip(images, predicted, strict=True):
        confusion[image.label, int(guess)] += 1
    accuracy = float(np.trace(confusion)) / len(images)
    return EvalResult(accuracy=accuracy, confusion=confusion)
