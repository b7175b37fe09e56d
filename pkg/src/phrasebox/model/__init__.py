from .config import ModelConfig
from .network import GroundingModel, ModelOutput, RegionSet, TokenFeatures, parameter_hash
from .checkpoint import load_checkpoint, save_checkpoint

__all__ = [
    "ModelConfig",
    "GroundingModel",
    "ModelOutput",
    "RegionSet",
    "TokenFeatures",
    "parameter_hash",
    "load_checkpoint",
    "save_checkpoint",
]
