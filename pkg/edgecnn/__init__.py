"""EdgeCNN and EdgeCNN-G training, inference and cost profiling."""

from edgecnn.builder import EdgeCNNBuilder, ModelConfig, Variant, build
from edgecnn.facade import reference_cost, reference_model, trace_table
from edgecnn.model import Model, forward, shape_trace
from edgecnn.tensor import Precision, Tensor

__all__ = [
    "EdgeCNNBuilder",
    "Model",
    "ModelConfig",
    "Precision",
    "Tensor",
    "Variant",
    "build",
    "forward",
    "reference_cost",
    "reference_model",
    "shape_trace",
    "trace_table",
]
