"""Cost accounting: parameters, MACs, activation memory and wall-clock speed.

Headline "FLOPs" are multiply-accumulate counts (one MAC per weight use per
output element). Pooling, batch norm and ReLU are tallied as elementwise ops
and kept out of the headline figure.

A learned group convolution counts its alive connections once it is fully
condensed. ``condensed=True`` assumes every such layer already is, which lets a
freshly built EdgeCNN-G report its inference cost.
"""

from __future__ import annotations

import json
import logging
import platform
import time
from collections.abc import Callable, Iterator, Sequence
from dataclasses import asdict, dataclass, field
from functools import partial
from pathlib import Path
from typing import Any

import numpy as np

from edgecnn.builder import Variant
from edgecnn.lgc import alive_target
from edgecnn.model import (
    AvgPool,
    BatchNorm,
    Conv2d,
    EdgeLayer,
    GlobalAvgPool,
    Layer,
    LearnedGroupConv,
    Linear,
    MaxPool,
    Model,
    ReLU,
    Shape,
    forward,
    input_shape,
)
from edgecnn.nnops import ConvSpec, Mode, conv2d, get_num_threads, set_num_threads
from edgecnn.tensor import Tensor

logger = logging.getLogger(__name__)

BYTES_PER_ELEMENT = 4
DEVICE_MEMORY_BYTES = 875 * 1024 * 1024
MAC_CONVENTION = "FLOPs are reported as multiply-accumulates (1 MAC = 1 FLOP)"

# Published figures used only for the comparison note.
PUBLISHED_PARAMS = {"edgecnn": 0.40e6}
PUBLISHED_MACS = {"edgecnn": 52.28e6, "edgecnn-g": 2.7e6}
PUBLISHED_FPS = {"edgecnn": 1.37}

DEFAULT_GROUPED_SHAPES: tuple[tuple[int, int, int, int, int], ...] = tuple(
    (cin, cout, h, w, g)
    for cin, cout, h, w in ((56, 32, 22, 22), (88, 32, 11, 11), (144, 32, 5, 5), (32, 8, 22, 22))
    for g in (1, 4, 8)
)


@dataclass(frozen=True, slots=True)
class LayerCost:
    name: str
    kind: str
    params: int
    macs: int
    elementwise: int
    output_shape: tuple[int, ...]


# --- static counting ---------------------------------------------------------


def leaf_shapes(model: Model) -> Iterator[tuple[Layer, Shape, Shape]]:
    """Every leaf layer with its per-sample input and output shape."""
    shape: Shape = input_shape(model)
    for stage in model.stages:
        for layer in stage.layers:
            if isinstance(layer, EdgeLayer):
                inner = shape
                for child in layer.children():
                    out = child.output_shape(inner)
                    yield child, inner, out
                    inner = out
                shape = layer.output_shape(shape)
            else:
                out = layer.output_shape(shape)
                yield layer, shape, out
                shape = out


def _alive_per_group(layer: LearnedGroupConv, condensed: bool | None) -> int | None:
    """Alive inputs per group, or ``None`` when dense storage is counted."""
    state = layer.state
    if state.fully_condensed:
        return state.alive_counts()[0]
    if condensed:
        return alive_target(state.spec.in_channels, state.C - 1, state.C)
    return None


def _conv_cost(spec: ConvSpec, in_per_group: int, h: int, w: int) -> tuple[int, int]:
    kh, kw = spec.kernel
    oh, ow = spec.output_hw(h, w)
    weights = spec.out_channels * in_per_group * kh * kw
    bias = spec.out_channels if spec.bias_enabled else 0
    return weights + bias, oh * ow * weights


def layer_costs(model: Model, *, condensed: bool | None = None) -> list[LayerCost]:
    rows: list[LayerCost] = []
    for layer, in_shape, out_shape in leaf_shapes(model):
        params = macs = elementwise = 0
        out_elements = int(np.prod(out_shape))
        if isinstance(layer, Conv2d):
            _, h, w = in_shape
            params, macs = _conv_cost(
                layer.spec, layer.spec.in_channels // layer.spec.groups, h, w
            )
        elif isinstance(layer, LearnedGroupConv):
            _, h, w = in_shape
            alive = _alive_per_group(layer, condensed)
            per_group = layer.spec.in_channels if alive is None else alive
            params, macs = _conv_cost(layer.spec, per_group, h, w)
        elif isinstance(layer, Linear):
            params = layer.out_features * layer.in_features + layer.out_features
            macs = layer.out_features * layer.in_features
        elif isinstance(layer, BatchNorm):
            params = 2 * layer.state.channels
            elementwise = out_elements
        elif isinstance(layer, ReLU):
            elementwise = out_elements
        elif isinstance(layer, MaxPool | AvgPool):
            elementwise = out_elements * layer.window * layer.window
        elif isinstance(layer, GlobalAvgPool):
            elementwise = int(np.prod(in_shape))
        rows.append(LayerCost(layer.name, layer.kind.value, params, macs, elementwise, out_shape))
    return rows


def count_params(model: Model, *, condensed: bool | None = None) -> tuple[dict[str, int], int]:
    """Learnable parameters per layer and in total (BN running stats excluded)."""
    per_layer = {row.name: row.params for row in layer_costs(model, condensed=condensed)}
    return per_layer, sum(per_layer.values())


def count_buffers(model: Model) -> int:
    """Batch-norm running statistics, reported apart from learnables."""
    return sum(
        2 * layer.state.channels for layer in model.iter_layers() if isinstance(layer, BatchNorm)
    )


def count_macs(model: Model, *, condensed: bool | None = None) -> tuple[dict[str, int], int]:
    """Convolution and classifier MACs per layer and in total."""
    per_layer = {row.name: row.macs for row in layer_costs(model, condensed=condensed)}
    return per_layer, sum(per_layer.values())


# --- activation memory -------------------------------------------------------


@dataclass(frozen=True, slots=True)
class GraphNode:
    """One activation tensor and the nodes whose outputs it feeds."""

    name: str
    shape: tuple[int, ...]
    inputs: tuple[int, ...]

    def nbytes(self, batch: int) -> int:
        return batch * int(np.prod(self.shape)) * BYTES_PER_ELEMENT


def activation_graph(model: Model) -> list[GraphNode]:
    """Execution-ordered tensor graph; node 0 is the network input."""
    nodes = [GraphNode("input", input_shape(model), ())]
    shape: Shape = input_shape(model)
    for stage in model.stages:
        for layer in stage.layers:
            unit_input = len(nodes) - 1
            if isinstance(layer, EdgeLayer):
                inner = shape
                for child in layer.children():
                    inner = child.output_shape(inner)
                    nodes.append(GraphNode(child.name, inner, (len(nodes) - 1,)))
                shape = layer.output_shape(shape)
                branch = len(nodes) - 1
                nodes.append(GraphNode(f"{layer.name}.concat", shape, (unit_input, branch)))
            else:
                shape = layer.output_shape(shape)
                nodes.append(GraphNode(layer.name, shape, (unit_input,)))
    return nodes


def last_uses(nodes: Sequence[GraphNode]) -> list[int]:
    """Index of the last consumer of each node (its own index if unused)."""
    last = list(range(len(nodes)))
    for index, node in enumerate(nodes):
        for source in node.inputs:
            last[source] = max(last[source], index)
    return last


@dataclass(frozen=True, slots=True)
class MemoryTimeline:
    steps: tuple[tuple[str, int], ...]
    peak_bytes: int
    peak_step: str


def activation_memory(model: Model, batch: int = 1) -> MemoryTimeline:
    """Live activation bytes after each node executes.

    A tensor is live from the step that produces it through the step of its
    last consumer; dense units keep their input alive until the concat.
    """
    nodes = activation_graph(model)
    last = last_uses(nodes)
    sizes = [node.nbytes(batch) for node in nodes]
    live = 0
    steps: list[tuple[str, int]] = []
    releases: dict[int, list[int]] = {}
    for index, use in enumerate(last):
        releases.setdefault(use, []).append(index)
    for index, node in enumerate(nodes):
        live += sizes[index]
        steps.append((node.name, live))
        for freed in releases.get(index, []):
            live -= sizes[freed]
    peak_name, peak = max(steps, key=lambda step: step[1])
    return MemoryTimeline(tuple(steps), peak, peak_name)


# --- timing ------------------------------------------------------------------


@dataclass(frozen=True, slots=True)
class TimingStats:
    median_ms: float
    p10_ms: float
    p90_ms: float
    runs: int
    threads: int
    cpu: str

    @property
    def fps(self) -> float:
        return 1000.0 / self.median_ms if self.median_ms > 0 else float("inf")


def cpu_description() -> str:
    cpuinfo = Path("/proc/cpuinfo")
    if cpuinfo.is_file():
        for line in cpuinfo.read_text(encoding="utf-8", errors="replace").splitlines():
            if line.lower().startswith("model name"):
                return line.split(":", 1)[1].strip()
    return platform.processor() or platform.machine() or "unknown"


def _timing_stats(samples_ns: Sequence[int], threads: int) -> TimingStats:
    samples_ms = np.asarray(samples_ns, dtype=np.float64) / 1e6
    return TimingStats(
        median_ms=float(np.median(samples_ms)),
        p10_ms=float(np.percentile(samples_ms, 10)),
        p90_ms=float(np.percentile(samples_ms, 90)),
        runs=len(samples_ns),
        threads=threads,
        cpu=cpu_description(),
    )


def _measure(fn: Callable[[], object], runs: int, warmup: int, max_runs: int) -> list[int]:
    for _ in range(warmup):
        fn()
    resolution_ns = time.get_clock_info("perf_counter").resolution * 1e9
    while True:
        samples: list[int] = []
        for _ in range(runs):
            started = time.perf_counter_ns()
            fn()
            samples.append(time.perf_counter_ns() - started)
        if min(samples) >= 100 * resolution_ns or runs >= max_runs:
            return samples
        runs = min(runs * 2, max_runs)
        logger.warning("timer resolution too coarse; raising run count to %d", runs)


def bench_forward(
    model: Model,
    runs: int = 30,
    threads: int = 1,
    *,
    warmup: int = 3,
    max_runs: int = 1000,
    seed: int = 0,
) -> TimingStats:
    """Single-image inference latency; data preparation is excluded."""
    if runs < 1:
        raise ValueError(f"runs must be >= 1: {runs!r}")
    c, h, w = input_shape(model)
    image = Tensor(
        np.random.default_rng(seed).standard_normal((1, c, h, w)), dtype=model.dtype
    )
    previous = get_num_threads()
    set_num_threads(threads)
    try:
        samples = _measure(lambda: forward(model, image, Mode.INFER), runs, warmup, max_runs)
    finally:
        set_num_threads(previous)
    return _timing_stats(samples, threads)


@dataclass(frozen=True, slots=True)
class GroupedBenchRow:
    in_channels: int
    out_channels: int
    height: int
    width: int
    groups: int
    macs: int
    bytes_touched: int
    median_ms: float
    time_ratio: float

    @property
    def intensity(self) -> float:
        return self.macs / self.bytes_touched


def grouped_conv_traffic(spec: ConvSpec, h: int, w: int) -> int:
    """Bytes read or written: weights, input and output, each touched once."""
    oh, ow = spec.output_hw(h, w)
    weights = int(np.prod(spec.weight_shape)) + spec.out_channels
    activations = spec.in_channels * h * w + spec.out_channels * oh * ow
    return BYTES_PER_ELEMENT * (weights + activations)


def bench_grouped_vs_dense(
    shapes: Sequence[tuple[int, int, int, int, int]] = DEFAULT_GROUPED_SHAPES,
    *,
    runs: int = 10,
    threads: int = 1,
    seed: int = 0,
) -> list[GroupedBenchRow]:
    """Time 3x3 convolutions at each ``(in, out, h, w, groups)``.

    ``time_ratio`` divides by the ``groups=1`` time at the same shape, when
    that shape is part of the set.
    """
    rng = np.random.default_rng(seed)
    previous = get_num_threads()
    set_num_threads(threads)
    rows: list[GroupedBenchRow] = []
    try:
        dense_ms: dict[tuple[int, int, int, int], float] = {}
        measured: list[tuple[tuple[int, int, int, int, int], int, int, float]] = []
        for cin, cout, h, w, g in shapes:
            spec = ConvSpec(cin, cout, groups=g)
            x = Tensor(rng.standard_normal((1, cin, h, w)), dtype=np.float32)
            weight = Tensor(rng.standard_normal(spec.weight_shape), dtype=np.float32)
            bias = Tensor(np.zeros(cout), dtype=np.float32)
            samples = _measure(partial(conv2d, x, spec, weight, bias), runs, 2, 10 * runs)
            median = float(np.median(samples)) / 1e6
            if g == 1:
                dense_ms[(cin, cout, h, w)] = median
            measured.append(
                ((cin, cout, h, w, g), spec.macs(h, w), grouped_conv_traffic(spec, h, w), median)
            )
        for (cin, cout, h, w, g), macs, traffic, median in measured:
            base = dense_ms.get((cin, cout, h, w))
            rows.append(
                GroupedBenchRow(
                    in_channels=cin,
                    out_channels=cout,
                    height=h,
                    width=w,
                    groups=g,
                    macs=macs,
                    bytes_touched=traffic,
                    median_ms=median,
                    time_ratio=median / base if base else float("nan"),
                )
            )
    finally:
        set_num_threads(previous)
    return rows


# --- report ------------------------------------------------------------------


@dataclass(slots=True)
class CostReport:
    arch: str
    layers: list[LayerCost]
    params_total: int
    macs_total: int
    buffers_total: int
    activation_peak_bytes: int
    condensed: bool
    timing: TimingStats | None = None
    notes: list[str] = field(default_factory=list)

    @property
    def param_bytes(self) -> int:
        return self.params_total * BYTES_PER_ELEMENT

    @property
    def memory_bytes(self) -> int:
        return self.activation_peak_bytes + self.param_bytes

    @property
    def memory_percent(self) -> float:
        return 100.0 * self.memory_bytes / DEVICE_MEMORY_BYTES

    def summary(self) -> dict[str, Any]:
        values: dict[str, Any] = {
            "arch": self.arch,
            "condensed": self.condensed,
            "params_total": self.params_total,
            "macs_total": self.macs_total,
            "bn_running_stats": self.buffers_total,
            "activation_peak_bytes": self.activation_peak_bytes,
            "param_bytes": self.param_bytes,
            "memory_bytes": self.memory_bytes,
            "memory_percent_of_875MB": round(self.memory_percent, 4),
            "mac_convention": MAC_CONVENTION,
        }
        if self.timing is not None:
            values.update({f"timing_{k}": v for k, v in asdict(self.timing).items()})
            values["fps"] = round(self.timing.fps, 3)
        if self.notes:
            values["notes"] = list(self.notes)
        return values

    def to_json(self) -> str:
        values = self.summary()
        values["layers"] = [asdict(row) for row in self.layers]
        return json.dumps(values, indent=2)

    def to_text(self) -> str:
        width = max(len(row.name) for row in self.layers)
        lines = [f"{'layer':<{width}}  {'kind':<14} {'params':>9} {'macs':>12}  output"]
        for row in self.layers:
            shape = "x".join(map(str, row.output_shape))
            lines.append(
                f"{row.name:<{width}}  {row.kind:<14} {row.params:>9,} {row.macs:>12,}  {shape}"
            )
        lines.append("")
        for key, value in self.summary().items():
            if key == "notes":
                continue
            if isinstance(value, int) and not isinstance(value, bool):
                lines.append(f"{key:<24} {value:,}")
            else:
                lines.append(f"{key:<24} {value}")
        lines.extend(f"note: {note}" for note in self.notes)
        return "\n".join(lines) + "\n"


def cost_report(
    model: Model,
    *,
    condensed: bool | None = None,
    timing: TimingStats | None = None,
) -> CostReport:
    """Static costs of ``model`` plus optional measured timing."""
    rows = layer_costs(model, condensed=condensed)
    is_grouped = model.config.variant is Variant.GROUPED
    effective = is_grouped and (
        bool(condensed) or all(layer.state.fully_condensed for layer in model.learned_group_convs())
    )
    report = CostReport(
        arch=model.config.arch,
        layers=rows,
        params_total=sum(row.params for row in rows),
        macs_total=sum(row.macs for row in rows),
        buffers_total=count_buffers(model),
        activation_peak_bytes=activation_memory(model).peak_bytes,
        condensed=effective,
        timing=timing,
    )
    report.notes.extend(_published_notes(report))
    return report


def _published_notes(report: CostReport) -> Iterator[str]:
    macs = PUBLISHED_MACS.get(report.arch)
    if macs is not None:
        yield (
            f"published MACs {macs / 1e6:.2f} M, counted {report.macs_total / 1e6:.2f} M "
            f"({report.macs_total / macs:.2f}x)"
        )
    params = PUBLISHED_PARAMS.get(report.arch)
    if params is not None:
        yield f"published params {params / 1e6:.2f} M, counted {report.params_total / 1e6:.3f} M"
    if report.arch == "edgecnn-g":
        yield (
            "the published edgecnn-g figure is not reachable by analytic counting of the "
            "condensed layers; the counted value is reported as is"
        )
    fps = PUBLISHED_FPS.get(report.arch)
    if fps is not None and report.timing is not None:
        yield (
            f"published speed {fps} FPS on the reference board, "
            f"measured {report.timing.fps:.2f} FPS"
        )
