"""The grounding detector: vision backbone, language encoder, fused stack,
alignment head, and box regression head.

Two text sources are supported. The normal one is the toy transformer
encoder; the classical one (``classifier_classes > 0``) replaces token
features with a plain class-weight matrix, giving the reference detection
model that the grounding reformulation must match bit for bit.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from ..boxes import anchor_grid
from ..errors import ShapeMismatch
from ..prompts import TokenizedPrompt
from .config import ModelConfig
from .fusion import FusionLayer
from .text import TextEncoder, phrase_attention_mask
from .vision import VisionBackbone


@dataclass
class RegionSet:
    """Anchor boxes plus region features (B, N, d)."""

    anchors: np.ndarray
    features: torch.Tensor


@dataclass
class TokenFeatures:
    """Token features (B, M, d) for a tokenized prompt."""

    prompt: TokenizedPrompt
    features: torch.Tensor


@dataclass
class ModelOutput:
    anchors: np.ndarray            # (N, 4)
    region_features: torch.Tensor  # (B, N, d) post-fusion
    token_features: torch.Tensor   # (B, M, d) post-fusion
    p0: torch.Tensor | None        # (M, d) pre-fusion token features
    logits: torch.Tensor           # (B, N, M) alignment scores
    deltas: torch.Tensor           # (B, N, 4) box deltas


def _seed_for(seed: int, name: str) -> int:
    digest = hashlib.blake2s(f"{seed}:{name}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "big") % (2**63)


class GroundingModel(nn.Module):
    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__()
        self.config = config
        self.init_seed = seed
        self.vision = VisionBackbone(config)
        if config.classifier_classes == 0:
            self.text = TextEncoder(config)
        else:
            self.class_weights = nn.Parameter(
                torch.zeros(config.classifier_classes, config.d)
            )
        self.fusion = nn.ModuleList(FusionLayer(config) for _ in range(config.fusion_layers))
        self.box_head = nn.Linear(config.d, 4)
        if config.region_proj:
            self.region_proj = nn.Linear(config.d, config.d)
        self.register_buffer(
            "_anchors", torch.from_numpy(anchor_grid(config.image_size, config.grid))
        )
        self.reset_parameters_deterministic(seed)

    # -- initialization -----------------------------------------------------

    def reset_parameters_deterministic(self, seed: int) -> None:
        """Per-parameter seeded init, independent of module creation order.

        Each parameter draws from a generator keyed by (seed, parameter name),
        so e.g. the vision tower initializes identically whether or not a text
        encoder exists next to it.
        """
        self.init_seed = seed
        for name, param in sorted(self.named_parameters()):
            gen = torch.Generator().manual_seed(_seed_for(seed, name))
            with torch.no_grad():
                if name.endswith(".bias"):
                    param.zero_()
                elif param.dim() == 1:
                    # the only 1-d weights are LayerNorm scales
                    param.fill_(1.0)
                elif "embedding" in name or name == "class_weights":
                    param.copy_(torch.empty_like(param).normal_(0.0, 0.1, generator=gen))
                else:
                    fan_in = int(np.prod(param.shape[1:]))
                    bound = 1.0 / fan_in**0.5
                    param.copy_(
                        torch.empty_like(param).uniform_(-bound, bound, generator=gen)
                    )
        with torch.no_grad():
            for layer in self.fusion:
                layer.cross.out_vis.weight.zero_()
                layer.cross.out_vis.bias.zero_()
                layer.cross.out_txt.weight.zero_()
                layer.cross.out_txt.bias.zero_()
            gen = torch.Generator().manual_seed(_seed_for(seed, "box_head.weight.small"))
            self.box_head.weight.copy_(
                torch.empty_like(self.box_head.weight).normal_(0.0, 0.01, generator=gen)
            )
            self.box_head.bias.zero_()
            if self.config.region_proj:
                self.region_proj.weight.copy_(torch.eye(self.config.d))
                self.region_proj.bias.zero_()

    # -- spec operations ----------------------------------------------------

    @property
    def anchors(self) -> np.ndarray:
        return self._anchors.detach().cpu().numpy()

    def encode_image(self, images: torch.Tensor) -> RegionSet:
        """Pre-fusion region features O^0 for (B, H, W, 3) images."""
        if images.dim() == 3:
            images = images.unsqueeze(0)
        return RegionSet(anchors=self.anchors, features=self.vision(images))

    def encode_text(self, prompt: TokenizedPrompt, canonical: bool = False) -> torch.Tensor:
        """Pre-fusion token features P^0, shape (M, d).

        `canonical` computes at the fixed max_tokens width, so the result does
        not depend on how the vocabulary was chunked into prompts.
        """
        if self.config.classifier_classes:
            raise ShapeMismatch("classical-head model has no text encoder")
        return self.text(prompt, pad_to=self.config.max_tokens if canonical else None)

    def classifier_tokens(self) -> torch.Tensor:
        """Class-weight matrix viewed as token features: exactly one token per
        class, no extra rows."""
        return self.class_weights

    def fuse(
        self, regions: RegionSet, tokens: TokenFeatures
    ) -> tuple[RegionSet, TokenFeatures]:
        """Run the L fused layers; with fusion disabled the context vectors are
        identically zero and the modalities never mix."""
        o, p = regions.features, tokens.features
        if o.shape[-1] != p.shape[-1]:
            raise ShapeMismatch("feature widths differ between modalities")
        allowed = phrase_attention_mask(tokens.prompt).to(o.device)
        for layer in self.fusion:
            o, p = layer(o, p, allowed, fuse=self.config.fusion_enabled)
        return RegionSet(regions.anchors, o), TokenFeatures(tokens.prompt, p)

    def align(self, regions: RegionSet, tokens: TokenFeatures) -> torch.Tensor:
        """Alignment logits (B, N, M): plain dot products, no bias."""
        o = regions.features
        if self.config.region_proj:
            o = self.region_proj(o)
        return o @ tokens.features.transpose(-1, -2)

    def regress_boxes(self, regions: RegionSet) -> torch.Tensor:
        return self.box_head(regions.features)

    # -- composed forward ---------------------------------------------------

    def forward(
        self,
        images: torch.Tensor,
        prompt: TokenizedPrompt,
        p0_override: torch.Tensor | None = None,
        canonical_text: bool = False,
    ) -> ModelOutput:
        """`canonical_text` runs the whole text pathway at the fixed
        max_tokens width (late-fusion models only), making token features
        bitwise independent of vocabulary chunking."""
        if images.dim() == 3:
            images = images.unsqueeze(0)
        b = images.shape[0]
        regions = self.encode_image(images)

        if self.config.classifier_classes:
            if prompt.num_phrases != self.config.classifier_classes:
                raise ShapeMismatch("prompt phrase count differs from classifier width")
            if prompt.num_tokens != self.config.classifier_classes:
                raise ShapeMismatch("classical head expects one token per class")
            p0 = None
            p = self.classifier_tokens()
            # classical path: vision blocks still run, text blocks do not exist
            o = regions.features
            for layer in self.fusion:
                o = layer.vision_block(o)
            region_out = RegionSet(regions.anchors, o)
            token_out = TokenFeatures(prompt, p.unsqueeze(0).expand(b, -1, -1))
        elif canonical_text and not self.config.fusion_enabled:
            region_out, token_out, p0 = self._late_fusion_canonical(
                regions, prompt, p0_override, b
            )
        else:
            p0 = p0_override if p0_override is not None else self.encode_text(prompt)
            tokens = TokenFeatures(prompt, p0.unsqueeze(0).expand(b, -1, -1))
            region_out, token_out = self.fuse(regions, tokens)

        logits = self.align(region_out, token_out)
        deltas = self.regress_boxes(region_out)
        return ModelOutput(
            anchors=regions.anchors,
            region_features=region_out.features,
            token_features=token_out.features,
            p0=p0,
            logits=logits,
            deltas=deltas,
        )

    def _late_fusion_canonical(
        self,
        regions: RegionSet,
        prompt: TokenizedPrompt,
        p0_override: torch.Tensor | None,
        batch: int,
    ) -> tuple[RegionSet, TokenFeatures, torch.Tensor]:
        """Fixed-width text pathway: every text op runs at max_tokens width so
        a phrase's features are bitwise identical in any chunking."""
        pad = self.config.max_tokens
        m = prompt.num_tokens
        allowed = phrase_attention_mask(prompt, pad).to(regions.features.device)
        if p0_override is not None:
            self.text.check_length(prompt)
            filler = torch.zeros(
                pad - m, self.config.d, dtype=p0_override.dtype, device=p0_override.device
            )
            x = torch.cat([p0_override, filler], dim=0).unsqueeze(0)
            p0 = p0_override
        else:
            x = self.text.embed(prompt, pad)
            for block in self.text.blocks:
                x = block(x, allowed)
            p0 = x.squeeze(0)[:m]
        o = regions.features
        for layer in self.fusion:
            o = layer.vision_block(o)
            x = layer.text_block(x, allowed)
        token_out = TokenFeatures(prompt, x[:, :m].expand(batch, -1, -1))
        return RegionSet(regions.anchors, o), token_out, p0

    def classification_logits(self, region_features: torch.Tensor) -> torch.Tensor:
        """Classical-head logits S = O W^T (no bias).

        Written as the exact batched-matmul expression the alignment head
        uses, so the grounding view of this model reproduces it bit for bit.
        """
        b = region_features.shape[0]
        weights = self.class_weights.unsqueeze(0).expand(b, -1, -1)
        return region_features @ weights.transpose(-1, -2)


def parameter_hash(model: nn.Module) -> str:
    """Order-independent digest of every parameter tensor."""
    digest = hashlib.blake2b(digest_size=16)
    for name, param in sorted(model.named_parameters()):
        digest.update(name.encode())
        digest.update(param.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()
