"""Row-major patch layout shared by the encoder, the flow head, and the metrics."""

from __future__ import annotations

import torch


def patchify(images: torch.Tensor, p: int) -> torch.Tensor:
    """(B, 3, H, W) -> (B, S, p, p, 3) with patches in row-major grid order."""
    b, c, h, w = images.shape
    if h % p or w % p:
        raise ValueError(f"image {h}x{w} is not divisible by patch size {p}")
    gh, gw = h // p, w // p
    x = images.reshape(b, c, gh, p, gw, p).permute(0, 2, 4, 3, 5, 1)
    return x.reshape(b, gh * gw, p, p, c)


def unpatchify(patches: torch.Tensor, grid: int | None = None) -> torch.Tensor:
    """Inverse of :func:`patchify` for a square grid."""
    b, s, p, _, c = patches.shape
    g = grid or int(round(s**0.5))
    if g * g != s:
        raise ValueError(f"{s} patches do not form a square grid")
    x = patches.reshape(b, g, g, p, p, c).permute(0, 5, 1, 3, 2, 4)
    return x.reshape(b, c, g * p, g * p)
