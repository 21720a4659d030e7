"""Transformer building blocks shared by the encoder and the decoder's global blocks."""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


def sincos_2d(grid: int, dim: int, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Fixed 2D sine-cosine position table of shape (grid*grid, dim), row-major cells."""
    if dim % 4:
        raise ValueError(f"2D sincos embedding needs dim divisible by 4, got {dim}")
    quarter = dim // 4
    omega = 1.0 / 10000 ** (torch.arange(quarter, dtype=torch.float64) / quarter)
    ys, xs = torch.meshgrid(torch.arange(grid, dtype=torch.float64),
                            torch.arange(grid, dtype=torch.float64), indexing="ij")
    out_y = ys.reshape(-1, 1) * omega
    out_x = xs.reshape(-1, 1) * omega
    pe = torch.cat([out_y.sin(), out_y.cos(), out_x.sin(), out_x.cos()], dim=1)
    return pe.to(dtype)


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal embedding of timesteps in [0, 1], scaled by 1000 as in DDPM-style models."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=t.dtype, device=t.device) / half)
    args = 1000.0 * t[:, None] * freqs[None]
    return torch.cat([args.cos(), args.sin()], dim=-1)


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        q, k, v = self.qkv(x).view(b, n, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        out = F.scaled_dot_product_attention(q, k, v)
        return self.proj(out.transpose(1, 2).reshape(b, n, d))


class FeedForward(nn.Module):
    def __init__(self, dim: int, mult: int = 4):
        super().__init__()
        self.fc1 = nn.Linear(dim, mult * dim)
        self.fc2 = nn.Linear(mult * dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class Block(nn.Module):
    """Pre-norm transformer block; its output (after the second residual sum) is the layer tap."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.norm = nn.ModuleDict({"attn": nn.LayerNorm(dim), "ffn": nn.LayerNorm(dim)})
        self.attn = Attention(dim, heads)
        self.ffn = FeedForward(dim, mlp_ratio)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm["attn"](x))
        return x + self.ffn(self.norm["ffn"](x))


class BlockStack(nn.Module):
    """Blocks registered as ``block{i}`` (1-based) so parameter names stay stable in checkpoints."""

    def __init__(self, depth: int, dim: int, heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.depth = depth
        for i in range(1, depth + 1):
            self.add_module(f"block{i}", Block(dim, heads, mlp_ratio))

    def blocks(self) -> list[Block]:
        return [getattr(self, f"block{i}") for i in range(1, self.depth + 1)]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for blk in self.blocks():
            x = blk(x)
        return x
