"""Binary checkpoint format.

Layout, all integers little-endian::

    b"ECNW"                       magic
    u32                           format version
    u32 + bytes                   header text (model config plus meta.* keys)
    u32                           tensor count
    per tensor:
        u32 + bytes               name
        u8                        dtype tag (1=f32, 2=f64, 3=u8, 4=i64)
        u8                        rank
        u64 * rank                dims
        raw bytes                 values, row-major
    u32                           CRC32 of everything above

An exported checkpoint stores every learned group convolution in packed form
(``packed_weight``, ``bias`` and the per-group ``indices``) instead of the
masked dense weights.
"""

from __future__ import annotations

import logging
import os
import struct
import zlib
from collections.abc import Mapping
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import numpy.typing as npt

from edgecnn.builder import ModelConfig, Variant, build
from edgecnn.config import format_key_values, parse_key_values
from edgecnn.data import Normalization
from edgecnn.errors import CheckpointFormatError, CheckpointMismatchError, CondensationError
from edgecnn.lgc import GroupedExport, from_export
from edgecnn.model import Model
from edgecnn.nnops import ConvSpec

logger = logging.getLogger(__name__)

MAGIC = b"ECNW"
FORMAT_VERSION = 1
OPTIMIZER_PREFIX = "optim."
META_PREFIX = "meta."

_DTYPE_TAGS: dict[np.dtype[Any], int] = {
    np.dtype(np.float32): 1,
    np.dtype(np.float64): 2,
    np.dtype(np.uint8): 3,
    np.dtype(np.int64): 4,
}
_TAG_DTYPES = {tag: dtype for dtype, tag in _DTYPE_TAGS.items()}

type ArrayMap = dict[str, npt.NDArray[Any]]


@dataclass(slots=True)
class Checkpoint:
    """Everything needed to resume training or run inference."""

    config: ModelConfig
    tensors: ArrayMap
    epoch: int = 0
    seed: int = 0
    normalization: Normalization = field(default_factory=Normalization.identity)
    optimizer: ArrayMap = field(default_factory=dict)
    exported: bool = False
    best_val_acc: float | None = None

    def header_text(self) -> str:
        meta = {
            f"{META_PREFIX}epoch": str(self.epoch),
            f"{META_PREFIX}seed": str(self.seed),
            f"{META_PREFIX}norm_mean": ",".join(repr(v) for v in self.normalization.mean),
            f"{META_PREFIX}norm_std": ",".join(repr(v) for v in self.normalization.std),
            f"{META_PREFIX}exported": "1" if self.exported else "0",
        }
        if self.best_val_acc is not None:
            meta[f"{META_PREFIX}best_val_acc"] = repr(self.best_val_acc)
        return self.config.to_text() + format_key_values(meta)


def checkpoint_from_model(
    model: Model,
    *,
    epoch: int = 0,
    seed: int = 0,
    normalization: Normalization | None = None,
    optimizer: Mapping[str, npt.NDArray[Any]] | None = None,
    best_val_acc: float | None = None,
) -> Checkpoint:
    """Snapshot (copy) the model state."""
    return Checkpoint(
        config=model.config,
        tensors={name: array.copy() for name, array in model.state_dict().items()},
        epoch=epoch,
        seed=seed,
        normalization=normalization or Normalization.identity(),
        optimizer={name: array.copy() for name, array in (optimizer or {}).items()},
        best_val_acc=best_val_acc,
    )


def model_from_checkpoint(ckpt: Checkpoint) -> Model:
    """Rebuild the architecture and load every tensor into it."""
    dtype = next(
        (a.dtype for a in ckpt.tensors.values() if a.dtype.kind == "f"), np.dtype(np.float32)
    )
    model = build(ckpt.config, dtype=dtype)
    if not ckpt.exported:
        model.load_state_dict(ckpt.tensors)
        return model

    rest = dict(ckpt.tensors)
    for layer in model.learned_group_convs():
        try:
            packed = rest.pop(f"{layer.name}.packed_weight")
            bias = rest.pop(f"{layer.name}.bias")
            indices = rest.pop(f"{layer.name}.indices")
        except KeyError as exc:
            raise CheckpointMismatchError(f"exported checkpoint lacks {exc.args[0]}") from None
        spec = layer.spec
        if indices.ndim != 2 or indices.shape[0] != spec.groups:
            raise CheckpointMismatchError(
                f"indices for {layer.name} must have {spec.groups} rows: {indices.shape}"
            )
        export = GroupedExport(
            indices=tuple(tuple(int(i) for i in row) for row in indices),
            spec=ConvSpec(
                in_channels=int(indices.size),
                out_channels=spec.out_channels,
                kernel=spec.kernel,
                stride=spec.stride,
                pad=spec.pad,
                groups=spec.groups,
            ),
            weight=packed,
            bias=bias,
        )
        if packed.shape != export.spec.weight_shape:
            raise CheckpointMismatchError(
                f"packed weight for {layer.name} must be {export.spec.weight_shape}: "
                f"{packed.shape}"
            )
        layer.state = from_export(export, spec.in_channels, layer.state.C, dtype)
    full = model.state_dict()
    full.update(rest)
    model.load_state_dict(full)
    return model


def export_checkpoint(ckpt: Checkpoint) -> Checkpoint:
    """Rewrite a fully condensed EdgeCNN-G checkpoint into packed grouped form."""
    if ckpt.exported:
        return ckpt
    if ckpt.config.variant is not Variant.GROUPED:
        raise CondensationError(f"only edgecnn-g checkpoints can be exported: {ckpt.config.arch}")
    model = model_from_checkpoint(ckpt)
    tensors: ArrayMap = {}
    lgc_names: set[str] = set()
    for layer in model.learned_group_convs():
        export = layer.export()
        lgc_names.update(f"{layer.name}.{suffix}" for suffix in ("weight", "bias", "mask", "stage"))
        tensors[f"{layer.name}.packed_weight"] = export.weight.copy()
        tensors[f"{layer.name}.bias"] = export.bias.copy()
        tensors[f"{layer.name}.indices"] = np.array(export.indices, dtype=np.int64)
    for name, array in ckpt.tensors.items():
        if name not in lgc_names:
            tensors[name] = array.copy()
    return Checkpoint(
        config=ckpt.config,
        tensors=tensors,
        epoch=ckpt.epoch,
        seed=ckpt.seed,
        normalization=ckpt.normalization,
        exported=True,
        best_val_acc=ckpt.best_val_acc,
    )


# --- encoding ----------------------------------------------------------------


def _encode_tensor(name: str, array: npt.NDArray[Any]) -> bytes:
    tag = _DTYPE_TAGS.get(array.dtype)
    if tag is None:
        raise CheckpointFormatError(f"unsupported dtype for {name}: {array.dtype}")
    name_bytes = name.encode("utf-8")
    little = np.ascontiguousarray(array, dtype=array.dtype.newbyteorder("<"))
    return b"".join(
        (
            struct.pack("<I", len(name_bytes)),
            name_bytes,
            struct.pack("<BB", tag, array.ndim),
            struct.pack(f"<{array.ndim}Q", *array.shape),
            little.tobytes(),
        )
    )


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    header = ckpt.header_text().encode("utf-8")
    entries = dict(ckpt.tensors)
    entries.update({f"{OPTIMIZER_PREFIX}{name}": array for name, array in ckpt.optimizer.items()})
    body = b"".join(
        (
            MAGIC,
            struct.pack("<I", FORMAT_VERSION),
            struct.pack("<I", len(header)),
            header,
            struct.pack("<I", len(entries)),
            *(_encode_tensor(name, array) for name, array in entries.items()),
        )
    )
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, data: bytes, source: str) -> None:
        self._data = data
        self._offset = 0
        self._source = source

    def take(self, size: int) -> bytes:
        end = self._offset + size
        if end > len(self._data):
            raise CheckpointFormatError(f"{self._source}: truncated at byte {self._offset}")
        chunk = self._data[self._offset : end]
        self._offset = end
        return chunk

    def unpack(self, fmt: str) -> tuple[Any, ...]:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    @property
    def exhausted(self) -> bool:
        return self._offset == len(self._data)


def decode_checkpoint(data: bytes, *, source: str = "<bytes>") -> Checkpoint:
    if len(data) < 12:
        raise CheckpointFormatError(f"{source}: truncated ({len(data)} bytes)")
    if data[:4] != MAGIC:
        raise CheckpointFormatError(f"{source}: bad magic {data[:4]!r}, expected {MAGIC!r}")
    (version,) = struct.unpack("<I", data[4:8])
    if version != FORMAT_VERSION:
        raise CheckpointFormatError(
            f"{source}: unsupported format version {version}, expected {FORMAT_VERSION}"
        )
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointFormatError(f"{source}: CRC mismatch (file corrupt or truncated)")

    reader = _Reader(body, source)
    reader.take(8)
    (header_size,) = reader.unpack("<I")
    header = reader.take(header_size).decode("utf-8")
    (count,) = reader.unpack("<I")
    tensors: ArrayMap = {}
    optimizer: ArrayMap = {}
    for _ in range(count):
        (name_size,) = reader.unpack("<I")
        name = reader.take(name_size).decode("utf-8")
        tag, rank = reader.unpack("<BB")
        dtype = _TAG_DTYPES.get(tag)
        if dtype is None:
            raise CheckpointFormatError(f"{source}: unknown dtype tag {tag} for {name}")
        dims = reader.unpack(f"<{rank}Q") if rank else ()
        size = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
        raw = reader.take(size)
        array = np.frombuffer(raw, dtype=dtype.newbyteorder("<")).astype(dtype).reshape(dims)
        if name.startswith(OPTIMIZER_PREFIX):
            optimizer[name.removeprefix(OPTIMIZER_PREFIX)] = array
        else:
            tensors[name] = array
    if not reader.exhausted:
        raise CheckpointFormatError(f"{source}: trailing bytes after tensor table")
    return _checkpoint_from_header(header, tensors, optimizer, source)


def _checkpoint_from_header(
    header: str, tensors: ArrayMap, optimizer: ArrayMap, source: str
) -> Checkpoint:
    values = parse_key_values(header, source=source)
    meta = {k.removeprefix(META_PREFIX): v for k, v in values.items() if k.startswith(META_PREFIX)}
    config_text = format_key_values(
        {k: v for k, v in values.items() if not k.startswith(META_PREFIX)}
    )
    try:
        config = ModelConfig.from_text(config_text, source=source)
        mean = tuple(float(v) for v in meta["norm_mean"].split(","))
        std = tuple(float(v) for v in meta["norm_std"].split(","))
        return Checkpoint(
            config=config,
            tensors=tensors,
            epoch=int(meta["epoch"]),
            seed=int(meta["seed"]),
            normalization=Normalization((mean[0], mean[1], mean[2]), (std[0], std[1], std[2])),
            optimizer=optimizer,
            exported=meta.get("exported", "0") == "1",
            best_val_acc=float(meta["best_val_acc"]) if "best_val_acc" in meta else None,
        )
    except (KeyError, IndexError, ValueError) as exc:
        raise CheckpointFormatError(f"{source}: invalid header: {exc}") from exc


def save_checkpoint(ckpt: Checkpoint, path: Path | str) -> Path:
    """Write atomically through a sibling temporary file."""
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    scratch = target.with_name(f"{target.name}.tmp")
    scratch.write_bytes(encode_checkpoint(ckpt))
    os.replace(scratch, target)
    logger.info("wrote checkpoint %s (epoch %d, %d tensors)", target, ckpt.epoch, len(ckpt.tensors))
    return target


def load_checkpoint(path: Path | str) -> Checkpoint:
    source = Path(path)
    try:
        data = source.read_bytes()
    except OSError as exc:
        raise CheckpointFormatError(f"{source}: cannot read checkpoint: {exc.strerror}") from exc
    return decode_checkpoint(data, source=str(source))
