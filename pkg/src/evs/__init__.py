"""Video semantic segmentation by propagating predictions along fast optical flow."""

__version__ = "0.1.0"

from .disflow import DisParams, DISOpticalFlow, estimate_flow, fast_preset
from .exceptions import EVSError, ValidationError
from .iam import InconsistencyAttention
from .imagery import FeatureMap, FlowField, Frame, InconsistencyMask, LabelMap, ProbabilityMap
from .pipeline import EVSPipeline, OperatingPoint, builtin_operating_points, operating_point
from .segmentation import OracleRefiner, PaletteSegmenter, PassthroughRefiner, PrecomputedSegmenter

__all__ = [
    "DisParams", "DISOpticalFlow", "estimate_flow", "fast_preset", "EVSError", "ValidationError",
    "InconsistencyAttention", "FeatureMap", "FlowField", "Frame", "InconsistencyMask", "LabelMap",
    "ProbabilityMap", "EVSPipeline", "OperatingPoint", "builtin_operating_points",
    "operating_point", "OracleRefiner", "PaletteSegmenter", "PassthroughRefiner",
    "PrecomputedSegmenter",
]
