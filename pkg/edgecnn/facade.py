"""Simple public facade over cached reference builds."""

from __future__ import annotations

from functools import lru_cache

from edgecnn.builder import ModelConfig, Variant, build
from edgecnn.model import Model, TraceRow, shape_trace
from edgecnn.profile import CostReport, cost_report


def _require_arch(arch: object) -> str:
    if not isinstance(arch, str):
        raise TypeError("arch must be str")
    return Variant.from_arch(arch).arch


@lru_cache(maxsize=4)
def _get_reference_model(arch: str) -> Model:
    return build(ModelConfig.for_arch(arch), seed=0)


def reference_model(arch: str = "edgecnn") -> Model:
    """Default-config model for ``arch``, built once per process.

    The returned model is shared; callers must not train it.
    """
    return _get_reference_model(_require_arch(arch))


def trace_table(arch: str = "edgecnn") -> list[TraceRow]:
    return shape_trace(reference_model(arch))


def reference_cost(arch: str = "edgecnn") -> CostReport:
    """Cost of the default configuration, condensed when ``arch`` is grouped."""
    model = reference_model(arch)
    return cost_report(model, condensed=model.config.variant is Variant.GROUPED)
