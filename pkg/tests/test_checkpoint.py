"""Tests for the binary checkpoint format and grouped export."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
import numpy.typing as npt
import pytest

from edgecnn.builder import ModelConfig, build
from edgecnn.checkpoint import (
    Checkpoint,
    checkpoint_from_model,
    decode_checkpoint,
    encode_checkpoint,
    export_checkpoint,
    load_checkpoint,
    model_from_checkpoint,
    save_checkpoint,
)
from edgecnn.data import Normalization
from edgecnn.errors import CheckpointFormatError, CondensationError
from edgecnn.lgc import condense
from edgecnn.model import Model, forward
from edgecnn.nnops import Mode
from edgecnn.tensor import Tensor


def _batch(rng: np.random.Generator, dtype: npt.DTypeLike = np.float32) -> Tensor:
    return Tensor(rng.standard_normal((2, 3, 44, 44)), dtype=dtype)


def _condensed(model: Model) -> Model:
    for layer in model.learned_group_convs():
        while not layer.state.fully_condensed:
            condense(layer.state)
    return model


def _checkpoint(model: Model) -> Checkpoint:
    velocity = {param.name: np.full(param.tensor.shape, 0.25) for param in model.parameters()}
    return checkpoint_from_model(
        model,
        epoch=7,
        seed=3,
        normalization=Normalization((0.1, 0.2, 0.3), (0.4, 0.5, 0.6)),
        optimizer=velocity,
        best_val_acc=0.625,
    )


def test_checkpoint_round_trip_is_bitwise(tiny_grouped_model: Model, tmp_path: Path) -> None:
    condense(next(tiny_grouped_model.learned_group_convs()).state)
    original = _checkpoint(tiny_grouped_model)

    restored = load_checkpoint(save_checkpoint(original, tmp_path / "run" / "model.ecnw"))

    assert restored.config == original.config
    assert (restored.epoch, restored.seed, restored.best_val_acc) == (7, 3, 0.625)
    assert restored.normalization == original.normalization
    assert restored.tensors.keys() == original.tensors.keys()
    for name, array in original.tensors.items():
        assert restored.tensors[name].dtype == array.dtype
        np.testing.assert_array_equal(restored.tensors[name], array)
    for name, array in original.optimizer.items():
        np.testing.assert_array_equal(restored.optimizer[name], array)
    assert not (tmp_path / "run" / "model.ecnw.tmp").exists()


def test_reloaded_model_produces_identical_outputs(
    tiny_grouped_model: Model, rng: np.random.Generator
) -> None:
    condense(next(tiny_grouped_model.learned_group_convs()).state)
    batch = _batch(rng)

    data = encode_checkpoint(_checkpoint(tiny_grouped_model))

    reloaded = model_from_checkpoint(decode_checkpoint(data))

    np.testing.assert_array_equal(
        forward(tiny_grouped_model, batch, Mode.INFER).data,
        forward(reloaded, batch, Mode.INFER).data,
    )
    first = next(reloaded.learned_group_convs())
    assert first.state.stage == 1


def test_float64_model_round_trips_with_its_precision(
    tiny_config: ModelConfig, rng: np.random.Generator
) -> None:
    model = build(tiny_config, dtype=np.float64)

    reloaded = model_from_checkpoint(decode_checkpoint(encode_checkpoint(_checkpoint(model))))

    assert reloaded.dtype == np.float64
    batch = _batch(rng, np.float64)
    np.testing.assert_array_equal(
        forward(model, batch, Mode.INFER).data, forward(reloaded, batch, Mode.INFER).data
    )


@pytest.mark.parametrize(
    ("corrupt", "message"),
    [
        (lambda data: b"XXXX" + data[4:], r"bad magic b'XXXX'"),
        (
            lambda data: data[:4] + struct.pack("<I", 9) + data[8:],
            r"unsupported format version 9",
        ),
        (lambda data: data[:40] + bytes([data[40] ^ 0xFF]) + data[41:], r"CRC mismatch"),
        (lambda data: data[:8], r"truncated \(8 bytes\)"),
        (lambda data: data[:-100], r"CRC mismatch"),
    ],
    ids=["magic", "version", "flipped-byte", "header-only", "cut-short"],
)
def test_decode_rejects_corrupt_files(tiny_model: Model, corrupt: object, message: str) -> None:
    data = encode_checkpoint(_checkpoint(tiny_model))

    with pytest.raises(CheckpointFormatError, match=message):
        decode_checkpoint(corrupt(data), source="bad.ecnw")  # type: ignore[operator]


def test_load_checkpoint_reports_missing_file(tmp_path: Path) -> None:
    with pytest.raises(CheckpointFormatError, match=r"cannot read checkpoint"):
        load_checkpoint(tmp_path / "absent.ecnw")


def test_export_rejects_dense_architecture(tiny_model: Model) -> None:
    with pytest.raises(CondensationError, match=r"only edgecnn-g checkpoints can be exported"):
        export_checkpoint(_checkpoint(tiny_model))


def test_export_rejects_partially_condensed_model(tiny_grouped_model: Model) -> None:
    with pytest.raises(CondensationError, match=r"export needs a fully condensed layer"):
        export_checkpoint(_checkpoint(tiny_grouped_model))


def test_exported_checkpoint_matches_masked_model(
    tiny_grouped_model: Model, rng: np.random.Generator, tmp_path: Path
) -> None:
    model = _condensed(tiny_grouped_model)
    batch = _batch(rng)

    exported = export_checkpoint(_checkpoint(model))
    path = save_checkpoint(exported, tmp_path / "g.ecnw")
    reloaded = model_from_checkpoint(load_checkpoint(path))

    assert exported.exported
    assert exported.optimizer == {}
    assert "edgeblock1.layer1.conv1.packed_weight" in exported.tensors
    assert "edgeblock1.layer1.conv1.mask" not in exported.tensors
    assert exported.tensors["edgeblock1.layer1.conv1.indices"].shape == (4, 4)
    np.testing.assert_allclose(
        forward(model, batch, Mode.INFER).data,
        forward(reloaded, batch, Mode.INFER).data,
        rtol=1e-4,
        atol=1e-5,
    )
    assert export_checkpoint(exported) is exported
