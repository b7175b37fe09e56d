"""Desk-scale grounded detection: detection as phrase grounding with
cross-modal fusion, prompt transfer, and pseudo-label self-training."""

from .model import GroundingModel, ModelConfig, load_checkpoint, save_checkpoint
from .prompts import PromptConfig, TokenizedPrompt, build_detection_prompt

__all__ = [
    "GroundingModel",
    "ModelConfig",
    "PromptConfig",
    "TokenizedPrompt",
    "build_detection_prompt",
    "load_checkpoint",
    "save_checkpoint",
]

__version__ = "0.1.0"
