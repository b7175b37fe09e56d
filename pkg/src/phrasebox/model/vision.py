"""Toy vision backbone: per-cell patch embedding plus two 3x3 convolutions.

Receptive field is 5x5 grid cells (patch embed is cell-local, each conv adds
one ring), which the tests rely on.
"""

from __future__ import annotations

import torch
from torch import nn

from .config import ModelConfig


class VisionBackbone(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        cell = config.cell
        self.patch = nn.Linear(3 * cell * cell, config.d)
        self.conv1 = nn.Conv2d(config.d, config.d, kernel_size=3, padding=1)
        self.conv2 = nn.Conv2d(config.d, config.d, kernel_size=3, padding=1)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """(B, H, W, 3) float images -> (B, N, d) region features, row-major cells."""
        cfg = self.config
        b, h, w, _ = images.shape
        if h != cfg.image_size or w != cfg.image_size:
            from ..errors import ShapeMismatch

            raise ShapeMismatch(f"expected {cfg.image_size}x{cfg.image_size} image, got {h}x{w}")
        g, cell = cfg.grid, cfg.cell
        # (B, g, cell, g, cell, 3) -> (B, g, g, cell*cell*3)
        patches = (
            images.reshape(b, g, cell, g, cell, 3)
            .permute(0, 1, 3, 2, 4, 5)
            .reshape(b, g, g, cell * cell * 3)
        )
        x = torch.relu(self.patch(patches))          # (B, g, g, d)
        x = x.permute(0, 3, 1, 2)                    # (B, d, g, g)
        x = torch.relu(self.conv1(x))
        x = x + torch.relu(self.conv2(x))
        return x.permute(0, 2, 3, 1).reshape(b, g * g, cfg.d)
