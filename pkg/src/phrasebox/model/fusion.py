"""Cross-modality multi-head attention and the fused encoder stack.

Each fusion layer computes bidirectional context vectors with X-MHA, adds
them to the per-modality features, and then applies a per-region MLP on the
vision side and a transformer block on the text side. Output projections of
both context paths start at zero, so an untrained model behaves exactly like
its late-fusion reduction.
"""

from __future__ import annotations

import torch
from torch import nn

from .config import ModelConfig
from .text import TransformerBlock


class CrossModalAttention(nn.Module):
    """X-MHA: region queries attend over tokens and vice versa, sharing one
    attention matrix (no separate key projections)."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.heads = config.heads
        self.head_dim = config.head_dim
        d = config.d
        self.query_vis = nn.Linear(d, d)
        self.query_txt = nn.Linear(d, d)
        self.value_vis = nn.Linear(d, d)
        self.value_txt = nn.Linear(d, d)
        self.out_vis = nn.Linear(d, d)
        self.out_txt = nn.Linear(d, d)
        # zero-init the context output paths: training starts as late fusion
        nn.init.zeros_(self.out_vis.weight)
        nn.init.zeros_(self.out_vis.bias)
        nn.init.zeros_(self.out_txt.weight)
        nn.init.zeros_(self.out_txt.bias)

    def forward(self, regions: torch.Tensor, tokens: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """(B, N, d), (B, M, d) -> vision context (B, N, d), text context (B, M, d)."""
        b, n, d = regions.shape
        m = tokens.shape[1]
        h, hd = self.heads, self.head_dim

        def split(t: torch.Tensor, length: int) -> torch.Tensor:
            return t.reshape(b, length, h, hd).transpose(1, 2)

        oq = split(self.query_vis(regions), n)
        pq = split(self.query_txt(tokens), m)
        ov = split(self.value_vis(regions), n)
        pv = split(self.value_txt(tokens), m)

        attn = oq @ pq.transpose(-1, -2) / hd**0.5       # (B, h, N, M)
        vis_ctx = torch.softmax(attn, dim=-1) @ pv        # tokens -> regions
        txt_ctx = torch.softmax(attn.transpose(-1, -2), dim=-1) @ ov  # regions -> tokens
        vis_ctx = vis_ctx.transpose(1, 2).reshape(b, n, d)
        txt_ctx = txt_ctx.transpose(1, 2).reshape(b, m, d)
        return self.out_vis(vis_ctx), self.out_txt(txt_ctx)


class RegionBlock(nn.Module):
    """Per-region residual MLP; no spatial mixing."""

    def __init__(self, d: int, ffn_mult: int):
        super().__init__()
        self.norm = nn.LayerNorm(d)
        self.ffn = nn.Sequential(nn.Linear(d, ffn_mult * d), nn.ReLU(), nn.Linear(ffn_mult * d, d))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.ffn(self.norm(x))


class FusionLayer(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.cross = CrossModalAttention(config)
        self.vision_block = RegionBlock(config.d, config.ffn_mult)
        self.text_block = TransformerBlock(config.d, config.heads, config.ffn_mult)

    def forward(
        self,
        regions: torch.Tensor,
        tokens: torch.Tensor,
        allowed: torch.Tensor,
        fuse: bool,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        if fuse:
            vis_ctx, txt_ctx = self.cross(regions, tokens)
            regions = regions + vis_ctx
            tokens = tokens + txt_ctx
        return self.vision_block(regions), self.text_block(tokens, allowed)
