"""Shared-weight feature encoder for video and query sequences.

Each modality gets its own linear projection to ``d``; both projected
sequences then run through the *same* stack: sinusoidal positions, four
depthwise-separable convolutions, one multi-head self-attention block and a
feed-forward layer, each wrapped as ``x + f(LayerNorm(x))``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .datamodel import GroundingExample, WordIndex


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    d_v: int
    d: int = 128
    heads: int = 8
    d_w: int = 64
    kernel_size: int = 7
    conv_layers: int = 4

    def __post_init__(self):
        if self.d % self.heads:
            raise ConfigurationError(f"d={self.d} is not divisible by heads={self.heads}")
        if self.kernel_size % 2 == 0:
            raise ConfigurationError("kernel_size must be odd for 'same' padding")

    @property
    def head_dim(self) -> int:
        return self.d // self.heads


@dataclass
class ContextualizedFeatures:
    v_prime: torch.Tensor   # (B, T, d)
    q_prime: torch.Tensor   # (B, N, d)
    q_pooled: torch.Tensor  # (B, d)
    q_mask: torch.Tensor    # (B, N) bool, True on real tokens


def uniform_init_(module: nn.Module) -> None:
    """uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for every Linear/Conv weight and bias."""
    for m in module.modules():
        if isinstance(m, (nn.Linear, nn.Conv1d)):
            fan_in = m.weight[0].numel()
            bound = 1.0 / math.sqrt(fan_in)
            nn.init.uniform_(m.weight, -bound, bound)
            if m.bias is not None:
                nn.init.uniform_(m.bias, -bound, bound)


def sinusoidal_positions(length: int, d: int, dtype=torch.float32) -> torch.Tensor:
    pos = torch.arange(length, dtype=torch.float64)[:, None]
    div = torch.exp(torch.arange(0, d, 2, dtype=torch.float64) * (-math.log(10000.0) / d))
    pe = torch.zeros(length, d, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(pos * div)
    pe[:, 1::2] = torch.cos(pos * div)[:, : d // 2]
    return pe.to(dtype)


class DepthwiseSeparableConv(nn.Module):
    def __init__(self, d: int, kernel_size: int):
        super().__init__()
        self.depthwise = nn.Conv1d(d, d, kernel_size, padding=kernel_size // 2, groups=d)
        self.pointwise = nn.Conv1d(d, d, 1)

    def forward(self, x):  # (B, L, d)
        return F.gelu(self.pointwise(self.depthwise(x.transpose(1, 2)))).transpose(1, 2)


class MultiHeadAttention(nn.Module):
    def __init__(self, d: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(d, 3 * d)
        self.out = nn.Linear(d, d)

    def forward(self, x, mask=None):
        b, n, d = x.shape
        h = self.heads
        q, k, v = self.qkv(x).view(b, n, 3, h, d // h).permute(2, 0, 3, 1, 4)
        scores = q @ k.transpose(-1, -2) / math.sqrt(d // h)
        if mask is not None:
            scores = scores.masked_fill(~mask[:, None, None, :], float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        return self.out((attn @ v).transpose(1, 2).reshape(b, n, d))


class ContextEncoder(nn.Module):
    """The modality-agnostic block stack shared by video and text."""

    def __init__(self, d: int, heads: int, kernel_size: int = 7, conv_layers: int = 4):
        super().__init__()
        self.convs = nn.ModuleList(DepthwiseSeparableConv(d, kernel_size)
                                   for _ in range(conv_layers))
        self.conv_norms = nn.ModuleList(nn.LayerNorm(d) for _ in range(conv_layers))
        self.attn_norm = nn.LayerNorm(d)
        self.attn = MultiHeadAttention(d, heads)
        self.ffn_norm = nn.LayerNorm(d)
        self.ffn = nn.Linear(d, d)

    def forward(self, x, mask=None):
        keep = None if mask is None else mask[..., None].to(x.dtype)
        x = x + sinusoidal_positions(x.shape[1], x.shape[2], x.dtype)
        for norm, conv in zip(self.conv_norms, self.convs):
            y = norm(x)
            if keep is not None:
                y = y * keep  # padded positions must not leak through the kernel
            x = x + conv(y)
        x = x + self.attn(self.attn_norm(x), mask)
        x = x + F.gelu(self.ffn(self.ffn_norm(x)))
        if keep is not None:
            x = x * keep
        return x


class FeatureEncoder(nn.Module):
    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        self.embedding = nn.Embedding(config.vocab_size, config.d_w, padding_idx=WordIndex.PAD)
        self.video_proj = nn.Linear(config.d_v, config.d)
        self.text_proj = nn.Linear(config.d_w, config.d)
        self.shared = ContextEncoder(config.d, config.heads, config.kernel_size,
                                     config.conv_layers)
        uniform_init_(self)
        bound = 1.0 / math.sqrt(config.d_w)
        nn.init.uniform_(self.embedding.weight, -bound, bound)
        with torch.no_grad():
            self.embedding.weight[WordIndex.PAD].zero_()

    def forward(self, video: torch.Tensor, query_ids: torch.Tensor,
                query_mask: torch.Tensor | None = None) -> ContextualizedFeatures:
        if video.shape[-1] != self.config.d_v:
            raise ConfigurationError(
                f"video feature dim {video.shape[-1]} != configured d_v {self.config.d_v}")
        if query_ids.numel() and int(query_ids.max()) >= self.config.vocab_size:
            raise ConfigurationError("query token id outside the embedding table")
        if query_mask is None:
            query_mask = torch.ones_like(query_ids, dtype=torch.bool)
        v_prime = self.shared(self.video_proj(video))
        q_prime = self.shared(self.text_proj(self.embedding(query_ids)), query_mask)
        q_pooled = q_prime.masked_fill(~query_mask[..., None], float("-inf")).amax(dim=1)
        return ContextualizedFeatures(v_prime, q_prime, q_pooled, query_mask)


def init_params(config: EncoderConfig, seed: int) -> FeatureEncoder:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return FeatureEncoder(config)


def encode(example: GroundingExample, encoder: FeatureEncoder,
           word_index: WordIndex) -> ContextualizedFeatures:
    """Encode one example; returned tensors carry a leading batch axis of 1."""
    dtype = next(encoder.parameters()).dtype
    video = torch.tensor(np.array(example.video.features), dtype=dtype)[None]
    ids = torch.tensor([example.query.ids(word_index)], dtype=torch.long)
    return encoder(video, ids)
