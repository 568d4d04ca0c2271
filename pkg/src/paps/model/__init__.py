from paps.model.backbone import BackboneConfig, FeaturePyramid, MultiScaleBackbone, ShapeError, extract_features
from paps.model.context import (
    CROSS_TASK_VARIANTS,
    ConfidenceGate,
    ConfigurationError,
    ContextExtractor,
    CrossTaskModule,
    context_extract,
    cross_task_fuse,
)
from paps.model.network import HEAD_KEYS, ModelConfig, PAPSNet
from paps.model.refiner import AmodalMaskRefiner, build_unoccluded_features, memory_readout

__all__ = [
    "AmodalMaskRefiner",
    "BackboneConfig",
    "CROSS_TASK_VARIANTS",
    "ConfidenceGate",
    "ConfigurationError",
    "ContextExtractor",
    "CrossTaskModule",
    "FeaturePyramid",
    "HEAD_KEYS",
    "ModelConfig",
    "MultiScaleBackbone",
    "PAPSNet",
    "ShapeError",
    "build_unoccluded_features",
    "context_extract",
    "cross_task_fuse",
    "extract_features",
    "memory_readout",
]
