from __future__ import annotations

import pytest

import edgecnn
from edgecnn.facade import _get_reference_model, reference_cost, reference_model, trace_table


def test_reference_model_is_built_once_per_arch() -> None:
    _get_reference_model.cache_clear()

    first = reference_model("edgecnn")
    second = reference_model("edgecnn")
    grouped = reference_model("grouped")

    assert first is second
    assert grouped is reference_model("edgecnn-g")
    assert _get_reference_model.cache_info().misses == 2


def test_reference_model_rejects_non_string_arch() -> None:
    with pytest.raises(TypeError, match=r"arch must be str"):
        reference_model(3)  # type: ignore[arg-type]


def test_trace_table_lists_the_eight_architecture_rows() -> None:
    rows = trace_table("edgecnn-g")

    assert [row.name for row in rows] == [
        "convolution",
        "pooling",
        "edgeblock1",
        "transition1",
        "edgeblock2",
        "transition2",
        "edgeblock3",
        "classification",
    ]
    assert rows[2].operator == "EdgeBlock-G x4"


def test_reference_cost_assumes_condensed_grouped_layers() -> None:
    assert reference_cost("edgecnn-g").condensed
    assert not reference_cost("edgecnn").condensed


def test_package_exports_facade_helpers() -> None:
    assert edgecnn.trace_table is trace_table
    assert edgecnn.reference_cost is reference_cost
