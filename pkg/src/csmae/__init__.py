"""Cross-sensor masked autoencoders for sensor-agnostic image retrieval."""

from .backbone import CsmaeModel, ModelConfig, count_parameters
from .config import TrainConfig, build_config
from .masking import MaskPlan, make_mask_plan, patchify, unpatchify

__all__ = [
    "CsmaeModel",
    "MaskPlan",
    "ModelConfig",
    "TrainConfig",
    "build_config",
    "count_parameters",
    "make_mask_plan",
    "patchify",
    "unpatchify",
]
