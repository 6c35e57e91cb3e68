from dismo.models.motion import MotionExtractor, MotionExtractorConfig, MotionSequence
from dismo.models.generator import (
    FlowSample,
    FrameGenerator,
    GeneratorConditioning,
    GeneratorConfig,
    euler_integrate,
    fm_loss,
    interpolate,
    target_field,
)

__all__ = [
    "MotionExtractor",
    "MotionExtractorConfig",
    "MotionSequence",
    "FlowSample",
    "FrameGenerator",
    "GeneratorConditioning",
    "GeneratorConfig",
    "euler_integrate",
    "fm_loss",
    "interpolate",
    "target_field",
]
