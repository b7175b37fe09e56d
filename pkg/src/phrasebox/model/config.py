"""Model hyperparameters."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Any

from ..prompts import PromptConfig


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 64
    grid: int = 8
    d: int = 64
    fusion_layers: int = 2          # L
    heads: int = 4
    fusion_enabled: bool = True
    loss_mode: str = "focal_sigmoid"  # or "softmax_ce"
    text_layers: int = 2
    ffn_mult: int = 2
    use_positional: bool = True
    vocab_size: int = PromptConfig().vocab_size
    max_tokens: int = PromptConfig().max_tokens
    classifier_classes: int = 0     # > 0: classical head with a c x d weight matrix
    region_proj: bool = False       # extra d x d projection before the alignment dot product

    def __post_init__(self) -> None:
        if self.d % self.heads != 0:
            raise ValueError("d must be divisible by heads")
        if self.fusion_layers < 1:
            raise ValueError("need at least one fusion layer")
        if self.image_size % self.grid != 0:
            raise ValueError("grid must divide image_size")
        if self.loss_mode not in ("focal_sigmoid", "softmax_ce"):
            raise ValueError(f"unknown loss_mode {self.loss_mode!r}")
        if self.classifier_classes and self.fusion_enabled:
            raise ValueError("classical classifier head requires fusion_enabled=False")
        if self.classifier_classes and self.loss_mode != "focal_sigmoid":
            raise ValueError("classical classifier head supports the focal loss only")

    @property
    def num_anchors(self) -> int:
        return self.grid * self.grid

    @property
    def cell(self) -> int:
        return self.image_size // self.grid

    @property
    def head_dim(self) -> int:
        return self.d // self.heads

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ModelConfig":
        return cls(**data)
