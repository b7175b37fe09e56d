"""Toy transformer language encoder with phrase-isolated self-attention.

Each token attends only within its own phrase (and to itself), and positions
are counted from the phrase start. A phrase's features therefore depend only
on its own surface tokens, which makes multi-prompt chunking exact for
late-fusion models and keeps class embeddings reusable across prompts.

Because BLAS kernels vary with matrix shape, bitwise chunking exactness also
needs every text-side op to run at a fixed width: `pad_to` pads the token
matrix (padding rows attend only to themselves and are sliced away), so the
whole pathway computes with chunk-independent shapes.
"""

from __future__ import annotations

import torch
from torch import nn

from ..errors import TooManyTokens
from ..prompts import PAD_ID, TokenizedPrompt
from .config import ModelConfig


def phrase_attention_mask(prompt: TokenizedPrompt, pad_to: int | None = None) -> torch.Tensor:
    """(T, T) bool, True where attention is allowed; padding rows self-only."""
    m = prompt.num_tokens
    t = pad_to or m
    owner = torch.full((t,), -1, dtype=torch.long)
    owner[:m] = torch.tensor(prompt.token_to_phrase(), dtype=torch.long)
    same = (owner[:, None] == owner[None, :]) & (owner[:, None] >= 0)
    eye = torch.eye(t, dtype=torch.bool)
    return same | eye


def phrase_position_ids(prompt: TokenizedPrompt, pad_to: int | None = None) -> torch.Tensor:
    """Position of each token within its own phrase; 0 for unowned tokens."""
    pos = [0] * (pad_to or prompt.num_tokens)
    for span in prompt.phrase_token_spans:
        for i, t in enumerate(span):
            pos[t] = i
    return torch.tensor(pos, dtype=torch.long)


class SelfAttention(nn.Module):
    def __init__(self, d: int, heads: int):
        super().__init__()
        self.heads = heads
        self.head_dim = d // heads
        self.query = nn.Linear(d, d)
        self.key = nn.Linear(d, d)
        self.value = nn.Linear(d, d)
        self.out = nn.Linear(d, d)

    def forward(self, x: torch.Tensor, allowed: torch.Tensor) -> torch.Tensor:
        b, m, d = x.shape
        h, hd = self.heads, self.head_dim

        def split(t: torch.Tensor) -> torch.Tensor:
            return t.reshape(b, m, h, hd).transpose(1, 2)  # (B, h, M, hd)

        q, k, v = split(self.query(x)), split(self.key(x)), split(self.value(x))
        scores = q @ k.transpose(-1, -2) / hd**0.5
        scores = scores.masked_fill(~allowed, float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        ctx = (attn @ v).transpose(1, 2).reshape(b, m, d)
        return self.out(ctx)


class TransformerBlock(nn.Module):
    """Pre-norm self-attention block with a two-layer feed-forward."""

    def __init__(self, d: int, heads: int, ffn_mult: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(d)
        self.attn = SelfAttention(d, heads)
        self.norm2 = nn.LayerNorm(d)
        self.ffn = nn.Sequential(
            nn.Linear(d, ffn_mult * d), nn.ReLU(), nn.Linear(ffn_mult * d, d)
        )

    def forward(self, x: torch.Tensor, allowed: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x), allowed)
        return x + self.ffn(self.norm2(x))


class TextEncoder(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.token_embedding = nn.Embedding(config.vocab_size, config.d)
        self.position_embedding = nn.Embedding(config.max_tokens, config.d)
        self.blocks = nn.ModuleList(
            TransformerBlock(config.d, config.heads, config.ffn_mult)
            for _ in range(config.text_layers)
        )

    def check_length(self, prompt: TokenizedPrompt) -> None:
        if prompt.num_tokens > self.config.max_tokens:
            raise TooManyTokens(
                f"{prompt.num_tokens} tokens exceeds model limit {self.config.max_tokens}"
            )

    def embed(self, prompt: TokenizedPrompt, pad_to: int | None = None) -> torch.Tensor:
        """(1, T, d) input embeddings, padded with the PAD token when asked."""
        self.check_length(prompt)
        device = self.token_embedding.weight.device
        ids = list(prompt.token_ids)
        if pad_to is not None:
            ids = ids + [PAD_ID] * (pad_to - len(ids))
        x = self.token_embedding(torch.tensor(ids, dtype=torch.long, device=device))
        if self.config.use_positional:
            x = x + self.position_embedding(phrase_position_ids(prompt, pad_to).to(device))
        return x.unsqueeze(0)

    def forward(self, prompt: TokenizedPrompt, pad_to: int | None = None) -> torch.Tensor:
        """Pre-fusion token features P0, shape (M, d)."""
        x = self.embed(prompt, pad_to)
        allowed = phrase_attention_mask(prompt, pad_to).to(x.device)
        for block in self.blocks:
            x = block(x, allowed)
        return x.squeeze(0)[: prompt.num_tokens]
