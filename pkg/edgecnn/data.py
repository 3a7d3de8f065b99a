"""Dataset ingestion, preprocessing and the ten-crop evaluation transform.

Canonical images are 48x48 ``uint8`` arrays, grayscale ``(48, 48)`` or RGB
``(48, 48, 3)``. Model inputs are 44x44 crops with grayscale replicated to
three channels, scaled to [0, 1] and standardized with per-channel constants
measured on the training split.

Three sources are supported:

- FER-2013: one CSV with ``emotion,pixels,Usage`` columns.
- RAF-DB: a folder of aligned 100x100 images plus a ``filename label`` listing.
- Synthetic: seven labeled geometric patterns, written as PGM files plus a
  listing, used as a license-free fixture.
"""

from __future__ import annotations

import csv
import logging
import queue
import threading
from collections.abc import Iterator, Sequence
from dataclasses import dataclass, field
from enum import IntEnum, StrEnum
from pathlib import Path
from typing import Any

import cv2
import numpy as np
import numpy.typing as npt

from edgecnn.errors import DataError, ShapeError
from edgecnn.model import Model, forward
from edgecnn.nnops import Mode, softmax
from edgecnn.tensor import FloatArray, Tensor

logger = logging.getLogger(__name__)

IMAGE_SIZE = 48
CROP_SIZE = 44
FER_PIXELS = IMAGE_SIZE * IMAGE_SIZE
TEN_CROP_OFFSETS = ((0, 0), (0, 4), (4, 0), (4, 4), (2, 2))
CENTER_OFFSET = (2, 2)
SYNTHETIC_LISTING = "labels.txt"

type PixelArray = npt.NDArray[np.uint8]


class Expression(IntEnum):
    """Seven expression classes in FER-2013 label order."""

    ANGER = 0
    DISGUST = 1
    FEAR = 2
    HAPPINESS = 3
    SADNESS = 4
    SURPRISE = 5
    NEUTRAL = 6


NUM_CLASSES = len(Expression)

# RAF-DB labels 1..7 are surprise, fear, disgust, happiness, sadness, anger, neutral.
RAF_DB_LABELS = {
    1: Expression.SURPRISE,
    2: Expression.FEAR,
    3: Expression.DISGUST,
    4: Expression.HAPPINESS,
    5: Expression.SADNESS,
    6: Expression.ANGER,
    7: Expression.NEUTRAL,
}

FER_USAGE = {"Training": "train", "PublicTest": "val", "PrivateTest": "test"}


class Split(StrEnum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"


@dataclass(frozen=True, slots=True)
class LabeledImage:
    pixels: PixelArray
    label: int
    split: Split

    def __post_init__(self) -> None:
        if self.pixels.dtype != np.uint8:
            raise TypeError(f"pixels must be uint8: {self.pixels.dtype}")
        if self.pixels.shape not in {(IMAGE_SIZE, IMAGE_SIZE), (IMAGE_SIZE, IMAGE_SIZE, 3)}:
            raise ShapeError(f"pixels must be 48x48 or 48x48x3: {self.pixels.shape}")
        if isinstance(self.label, bool) or not 0 <= int(self.label) < NUM_CLASSES:
            raise ValueError(f"label must lie in [0, {NUM_CLASSES}): {self.label!r}")


@dataclass(slots=True)
class DatasetSplits:
    train: list[LabeledImage] = field(default_factory=list)
    val: list[LabeledImage] = field(default_factory=list)
    test: list[LabeledImage] = field(default_factory=list)

    @property
    def validation(self) -> list[LabeledImage]:
        """Validation split, or the test split when no validation split exists."""
        return self.val if self.val else self.test

    def split(self, name: Split | str) -> list[LabeledImage]:
        match Split(name):
            case Split.TRAIN:
                return self.train
            case Split.VAL:
                return self.val
            case Split.TEST:
                return self.test

    def sizes(self) -> dict[str, int]:
        return {"train": len(self.train), "val": len(self.val), "test": len(self.test)}

    def add(self, image: LabeledImage) -> None:
        self.split(image.split).append(image)


@dataclass(frozen=True, slots=True)
class Batch:
    images: Tensor
    labels: npt.NDArray[np.int64]

    def __post_init__(self) -> None:
        if self.images.shape[0] != self.labels.shape[0]:
            raise ShapeError(
                "batch images and labels disagree: "
                f"{self.images.shape[0]} vs {self.labels.shape[0]}"
            )

    def __len__(self) -> int:
        return int(self.labels.shape[0])


# --- loaders -----------------------------------------------------------------


def load_fer2013(csv_path: Path | str) -> DatasetSplits:
    """Read the FER-2013 CSV; Usage selects the split."""
    path = Path(csv_path)
    splits = DatasetSplits()
    try:
        handle = path.open(newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot open FER-2013 file: {exc.strerror}", path=path) from exc
    with handle:
        reader = csv.DictReader(handle)
        missing = {"emotion", "pixels", "Usage"}.difference(reader.fieldnames or ())
        if missing:
            raise DataError(f"missing columns {sorted(missing)}", path=path, row=1)
        for record in reader:
            row = reader.line_num
            usage = (record["Usage"] or "").strip()
            if usage not in FER_USAGE:
                raise DataError(f"unknown Usage {usage!r}", path=path, row=row)
            label = _parse_label(record["emotion"], path=path, row=row)
            pixels = _parse_fer_pixels(record["pixels"] or "", path=path, row=row)
            splits.add(LabeledImage(pixels, label, Split(FER_USAGE[usage])))
    logger.info("loaded FER-2013 from %s: %s", path, splits.sizes())
    return splits


def _parse_label(value: str | None, *, path: Path, row: int) -> int:
    try:
        label = int((value or "").strip())
    except ValueError:
        raise DataError(f"label is not an integer: {value!r}", path=path, row=row) from None
    if not 0 <= label < NUM_CLASSES:
        raise DataError(f"label must lie in [0, {NUM_CLASSES}): {label}", path=path, row=row)
    return label


def _parse_fer_pixels(value: str, *, path: Path, row: int) -> PixelArray:
    parts = value.split()
    if len(parts) != FER_PIXELS:
        raise DataError(
            f"expected {FER_PIXELS} pixel values, got {len(parts)}", path=path, row=row
        )
    try:
        values = np.array([int(part) for part in parts], dtype=np.int64)
    except ValueError:
        raise DataError("pixel values must be integers", path=path, row=row) from None
    if values.min() < 0 or values.max() > 255:
        raise DataError("pixel values must lie in [0, 255]", path=path, row=row)
    return values.astype(np.uint8).reshape(IMAGE_SIZE, IMAGE_SIZE)


def load_raf_db(root_dir: Path | str, label_file: Path | str | None = None) -> DatasetSplits:
    """Read aligned RAF-DB images and resize them to 48x48 (bilinear).

    ``label_file`` defaults to ``root_dir/list_patition_label.txt``. Entries are
    ``train_*`` or ``test_*`` filenames; a missing file falls back to the
    ``*_aligned`` name the aligned release uses.
    """
    root = Path(root_dir)
    listing = Path(label_file) if label_file is not None else root / "list_patition_label.txt"
    splits = DatasetSplits()
    for row, (name, raw_label) in _read_listing(listing, columns=2):
        split = _raf_split(name, path=listing, row=row)
        try:
            label = RAF_DB_LABELS[int(raw_label)]
        except (ValueError, KeyError):
            raise DataError(
                f"RAF-DB label must lie in 1..7: {raw_label!r}", path=listing, row=row
            ) from None
        image_path = _resolve_raf_image(root, name)
        if image_path is None:
            raise DataError(f"image not found for entry {name!r}", path=listing, row=row)
        splits.add(LabeledImage(_read_rgb(image_path), int(label), split))
    logger.info("loaded RAF-DB from %s: %s", root, splits.sizes())
    return splits


def _raf_split(name: str, *, path: Path, row: int) -> Split:
    if name.startswith("train_"):
        return Split.TRAIN
    if name.startswith("test_"):
        return Split.TEST
    raise DataError(f"entry must start with 'train_' or 'test_': {name!r}", path=path, row=row)


def _resolve_raf_image(root: Path, name: str) -> Path | None:
    direct = root / name
    aligned = direct.with_name(f"{direct.stem}_aligned{direct.suffix}")
    for candidate in (direct, aligned):
        if candidate.is_file():
            return candidate
    return None


def _read_rgb(path: Path) -> PixelArray:
    image = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if image is None:
        raise DataError("unreadable image", path=path)
    rgb = cv2.cvtColor(image, cv2.COLOR_BGR2RGB)
    return resize_to_canonical(rgb)


def resize_to_canonical(image: PixelArray) -> PixelArray:
    """Bilinear resize to 48x48; already-canonical images pass through."""
    if image.shape[:2] == (IMAGE_SIZE, IMAGE_SIZE):
        return np.ascontiguousarray(image, dtype=np.uint8)
    resized = cv2.resize(image, (IMAGE_SIZE, IMAGE_SIZE), interpolation=cv2.INTER_LINEAR)
    return np.ascontiguousarray(resized, dtype=np.uint8)


def _read_listing(path: Path, *, columns: int) -> Iterator[tuple[int, list[str]]]:
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read label listing: {exc.strerror}", path=path) from exc
    for row, line in enumerate(text.splitlines(), start=1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != columns:
            raise DataError(
                f"expected {columns} whitespace-separated fields: {line!r}", path=path, row=row
            )
        yield row, parts


# --- synthetic fixture -------------------------------------------------------


def _synthetic_pattern(label: Expression, rng: np.random.Generator) -> PixelArray:
    yy, xx = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE].astype(np.float64)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    period = rng.uniform(7.0, 10.0)
    cy, cx = IMAGE_SIZE / 2 + rng.uniform(-3.0, 3.0, size=2)
    radius = np.hypot(yy - cy, xx - cx)
    match label:
        case Expression.ANGER:
            pattern = 0.5 + 0.5 * np.sin(2 * np.pi * yy / period + phase)
        case Expression.DISGUST:
            pattern = 0.5 + 0.5 * np.sin(2 * np.pi * xx / period + phase)
        case Expression.FEAR:
            pattern = 0.5 + 0.5 * np.sin(2 * np.pi * (xx + yy) / (1.4 * period) + phase)
        case Expression.HAPPINESS:
            pattern = np.sin(2 * np.pi * xx / period + phase) * np.sin(2 * np.pi * yy / period) > 0
        case Expression.SADNESS:
            pattern = radius < rng.uniform(10.0, 16.0)
        case Expression.SURPRISE:
            pattern = np.abs(radius - rng.uniform(12.0, 16.0)) < 3.0
        case Expression.NEUTRAL:
            pattern = np.clip(xx / (IMAGE_SIZE - 1) + rng.uniform(-0.2, 0.2), 0.0, 1.0)
    values = np.asarray(pattern, dtype=np.float64) + rng.normal(0.0, 0.05, size=yy.shape)
    return (np.clip(values, 0.0, 1.0) * 255).round().astype(np.uint8)


def generate_synthetic(
    *, train: int = 140, val: int = 35, test: int = 35, seed: int = 0
) -> DatasetSplits:
    """Balanced synthetic splits; image ``i`` of a split carries label ``i % 7``."""
    rng = np.random.default_rng(seed)
    splits = DatasetSplits()
    for split, count in ((Split.TRAIN, train), (Split.VAL, val), (Split.TEST, test)):
        if count < 0:
            raise ValueError(f"{split.value} count must be non-negative: {count!r}")
        for index in range(count):
            label = Expression(index % NUM_CLASSES)
            splits.add(LabeledImage(_synthetic_pattern(label, rng), int(label), split))
    return splits


def write_synthetic(splits: DatasetSplits, root: Path | str) -> Path:
    """Write PGM images under ``root/<split>/`` plus the ``labels.txt`` listing."""
    base = Path(root)
    lines: list[str] = []
    for split in Split:
        images = splits.split(split)
        if images:
            (base / split.value).mkdir(parents=True, exist_ok=True)
        for index, image in enumerate(images):
            relative = f"{split.value}/{index:05d}.pgm"
            gray = image.pixels if image.pixels.ndim == 2 else image.pixels[..., 0]
            if not cv2.imwrite(str(base / relative), gray):
                raise DataError("failed to write image", path=base / relative)
            lines.append(f"{relative} {image.label}")
    listing = base / SYNTHETIC_LISTING
    base.mkdir(parents=True, exist_ok=True)
    listing.write_text("".join(f"{line}\n" for line in lines), encoding="utf-8")
    return listing


def load_synthetic(root: Path | str) -> DatasetSplits:
    base = Path(root)
    listing = base / SYNTHETIC_LISTING
    splits = DatasetSplits()
    for row, (relative, raw_label) in _read_listing(listing, columns=2):
        split_name = Path(relative).parts[0]
        if split_name not in {split.value for split in Split}:
            raise DataError(
                f"entry must live under a split folder: {relative!r}", path=listing, row=row
            )
        label = _parse_label(raw_label, path=listing, row=row)
        pixels = cv2.imread(str(base / relative), cv2.IMREAD_GRAYSCALE)
        if pixels is None:
            raise DataError(f"unreadable image {relative!r}", path=listing, row=row)
        splits.add(LabeledImage(resize_to_canonical(pixels), label, Split(split_name)))
    logger.info("loaded synthetic fixture from %s: %s", base, splits.sizes())
    return splits


def balanced_subset(
    images: Sequence[LabeledImage], total: int, *, seed: int = 0
) -> list[LabeledImage]:
    """Up to ``total // 7`` images per class, drawn with a seeded permutation."""
    rng = np.random.default_rng(seed)
    per_class = total // NUM_CLASSES
    chosen: list[LabeledImage] = []
    counts = [0] * NUM_CLASSES
    for index in rng.permutation(len(images)):
        image = images[int(index)]
        if counts[image.label] < per_class:
            counts[image.label] += 1
            chosen.append(image)
    return chosen


# --- preprocessing -----------------------------------------------------------


@dataclass(frozen=True, slots=True)
class Normalization:
    """Per-channel standardization applied after scaling pixels to [0, 1]."""

    mean: tuple[float, float, float]
    std: tuple[float, float, float]

    def __post_init__(self) -> None:
        if len(self.mean) != 3 or len(self.std) != 3:
            raise ValueError(f"normalization needs three channels: {self.mean}, {self.std}")
        if not all(np.isfinite(self.mean)) or not all(s > 0 for s in self.std):
            raise ValueError(f"std must be positive and mean finite: {self.mean}, {self.std}")

    @classmethod
    def identity(cls) -> Normalization:
        return cls((0.0, 0.0, 0.0), (1.0, 1.0, 1.0))

    @classmethod
    def from_images(cls, images: Sequence[LabeledImage]) -> Normalization:
        if not images:
            raise DataError("cannot measure normalization on an empty split")
        stack = np.stack([_to_chw(image.pixels) for image in images])
        mean = stack.mean(axis=(0, 2, 3))
        std = stack.std(axis=(0, 2, 3))
        std = np.where(std > 0, std, 1.0)
        normalization = cls(
            (float(mean[0]), float(mean[1]), float(mean[2])),
            (float(std[0]), float(std[1]), float(std[2])),
        )
        logger.info("normalization mean=%s std=%s", normalization.mean, normalization.std)
        return normalization

    def apply(self, chw: FloatArray) -> FloatArray:
        mean = np.asarray(self.mean, dtype=chw.dtype)[:, None, None]
        std = np.asarray(self.std, dtype=chw.dtype)[:, None, None]
        return (chw - mean) / std

    def invert(self, chw: FloatArray) -> FloatArray:
        mean = np.asarray(self.mean, dtype=chw.dtype)[:, None, None]
        std = np.asarray(self.std, dtype=chw.dtype)[:, None, None]
        return chw * std + mean


def _to_chw(pixels: npt.NDArray[Any]) -> FloatArray:
    """``(3, 48, 48)`` floats in [0, 1]; grayscale is replicated."""
    if pixels.shape not in {(IMAGE_SIZE, IMAGE_SIZE), (IMAGE_SIZE, IMAGE_SIZE, 3)}:
        raise ShapeError(f"model input must be a 48x48 image: {pixels.shape}")
    scaled = pixels.astype(np.float64) / 255.0
    if scaled.ndim == 2:
        return np.repeat(scaled[None], 3, axis=0)
    return np.ascontiguousarray(scaled.transpose(2, 0, 1))


def _crop(chw: FloatArray, offset: tuple[int, int], flip: bool) -> FloatArray:
    top, left = offset
    window = chw[:, top : top + CROP_SIZE, left : left + CROP_SIZE]
    return window[:, :, ::-1] if flip else window


def crop_views(
    pixels: npt.NDArray[Any],
    mode: Mode,
    *,
    rng: np.random.Generator | None = None,
    random_crops: bool = False,
) -> list[tuple[tuple[int, int], bool]]:
    """(offset, flip) pairs selected for one image."""
    limit = IMAGE_SIZE - CROP_SIZE
    if mode is Mode.TRAIN or random_crops:
        if rng is None:
            raise ValueError("random crops need an rng")
        if mode is Mode.TRAIN:
            top, left = (int(v) for v in rng.integers(0, limit + 1, size=2))
            return [((top, left), bool(rng.random() < 0.5))]
        offsets = [tuple(int(v) for v in rng.integers(0, limit + 1, size=2)) for _ in range(5)]
        return [((o[0], o[1]), flip) for o in offsets for flip in (False, True)]
    return [(offset, flip) for offset in TEN_CROP_OFFSETS for flip in (False, True)]


def _views_array(
    pixels: npt.NDArray[Any],
    views: Sequence[tuple[tuple[int, int], bool]],
    normalization: Normalization,
    dtype: npt.DTypeLike,
) -> FloatArray:
    chw = normalization.apply(_to_chw(pixels))
    return np.stack([_crop(chw, offset, flip) for offset, flip in views]).astype(dtype)


def to_model_input(
    image: LabeledImage | npt.NDArray[Any],
    mode: Mode,
    normalization: Normalization,
    *,
    rng: np.random.Generator | None = None,
    random_crops: bool = False,
    dtype: npt.DTypeLike = np.float32,
) -> Tensor:
    """``(1, 3, 44, 44)`` in train mode, ``(10, 3, 44, 44)`` in infer mode.

    Infer mode takes the four corner crops and the center crop, each plain and
    mirrored, in that order. ``random_crops`` replaces the five offsets with
    random ones drawn from ``rng``.
    """
    pixels = image.pixels if isinstance(image, LabeledImage) else image
    views = crop_views(pixels, mode, rng=rng, random_crops=random_crops)
    return Tensor(_views_array(pixels, views, normalization, dtype), dtype=dtype)


def center_crop_input(
    images: Sequence[LabeledImage], normalization: Normalization, dtype: npt.DTypeLike = np.float32
) -> Tensor:
    """Single center crop per image, the cheap validation view."""
    view = [(CENTER_OFFSET, False)]
    return Tensor(
        np.concatenate([_views_array(img.pixels, view, normalization, dtype) for img in images]),
        dtype=dtype,
    )


def ten_crop_probabilities(
    model: Model,
    images: Sequence[LabeledImage | npt.NDArray[Any]],
    normalization: Normalization,
    *,
    rng: np.random.Generator | None = None,
    random_crops: bool = False,
    chunk: int = 16,
) -> FloatArray:
    """Softmax probabilities averaged over the ten crops of each image."""
    dtype = model.dtype
    averaged: list[FloatArray] = []
    for start in range(0, len(images), chunk):
        group = images[start : start + chunk]
        crops = np.concatenate(
            [
                to_model_input(
                    image,
                    Mode.INFER,
                    normalization,
                    rng=rng,
                    random_crops=random_crops,
                    dtype=dtype,
                ).data
                for image in group
            ]
        )
        logits = forward(model, Tensor(crops, dtype=dtype), Mode.INFER).data
        probs = softmax(logits.astype(np.float64))
        averaged.append(probs.reshape(len(group), -1, probs.shape[1]).mean(axis=1))
    if not averaged:
        return np.zeros((0, model.config.num_classes))
    return np.concatenate(averaged)


def predict_ten_crop(
    model: Model,
    image: LabeledImage | npt.NDArray[Any],
    normalization: Normalization,
    *,
    rng: np.random.Generator | None = None,
    random_crops: bool = False,
) -> int:
    """Class with the highest averaged probability; ties go to the lowest index."""
    probs = ten_crop_probabilities(
        model, [image], normalization, rng=rng, random_crops=random_crops
    )
    return int(np.argmax(probs[0]))


# --- batching ----------------------------------------------------------------

_DONE = object()


class BatchLoader:
    """Background producer of shuffled, augmented training batches.

    Batches are prepared on one worker thread and handed over through a
    bounded queue. Shuffling and crops for epoch ``e`` draw from
    ``default_rng([seed, e])`` so every epoch is reproducible on its own. In
    train mode a trailing batch of a single image is skipped, since batch norm
    cannot normalize it.
    """

    def __init__(
        self,
        images: Sequence[LabeledImage],
        normalization: Normalization,
        *,
        batch_size: int,
        seed: int,
        train: bool = True,
        prefetch: int = 2,
        dtype: npt.DTypeLike = np.float32,
    ) -> None:
        if batch_size < 1:
            raise ValueError(f"batch_size must be >= 1: {batch_size!r}")
        if prefetch < 1:
            raise ValueError(f"prefetch must be >= 1: {prefetch!r}")
        self.images = list(images)
        self.normalization = normalization
        self.batch_size = batch_size
        self.seed = seed
        self.train = train
        self.prefetch = prefetch
        self.dtype = np.dtype(dtype)

    def __len__(self) -> int:
        full, rest = divmod(len(self.images), self.batch_size)
        skipped = self.train and rest == 1 and len(self.images) > 1
        return full + (1 if rest and not skipped else 0)

    def batches(self, epoch: int) -> Iterator[Batch]:
        """Batches of ``epoch`` prepared synchronously."""
        rng = np.random.default_rng([self.seed, epoch])
        count = len(self.images)
        order = rng.permutation(count) if self.train else np.arange(count)
        for start in range(0, count, self.batch_size):
            index = order[start : start + self.batch_size]
            if self.train and index.size == 1 and count > 1:
                logger.debug("skipping trailing single-image batch at epoch %d", epoch)
                continue
            chosen = [self.images[int(i)] for i in index]
            if self.train:
                arrays = [
                    _views_array(
                        img.pixels,
                        crop_views(img.pixels, Mode.TRAIN, rng=rng),
                        self.normalization,
                        self.dtype,
                    )
                    for img in chosen
                ]
                images = Tensor(np.concatenate(arrays), dtype=self.dtype)
            else:
                images = center_crop_input(chosen, self.normalization, self.dtype)
            labels = np.array([img.label for img in chosen], dtype=np.int64)
            yield Batch(images, labels)

    def epoch(self, epoch: int) -> Iterator[Batch]:
        """Same batches as :meth:`batches`, produced on a background thread."""
        handoff: queue.Queue[object] = queue.Queue(maxsize=self.prefetch)
        stop = threading.Event()

        def put(item: object) -> bool:
            while not stop.is_set():
                try:
                    handoff.put(item, timeout=0.1)
                    return True
                except queue.Full:
                    continue
            return False

        def produce() -> None:
            try:
                for batch in self.batches(epoch):
                    if not put(batch):
                        return
                put(_DONE)
            except BaseException as exc:  # handed to the consumer
                put(exc)

        worker = threading.Thread(target=produce, name=f"batch-loader-{epoch}", daemon=True)
        worker.start()
        try:
            while True:
                item = handoff.get()
                if item is _DONE:
                    return
                if isinstance(item, BaseException):
                    raise item
                assert isinstance(item, Batch)
                yield item
        finally:
            stop.set()
            worker.join()
