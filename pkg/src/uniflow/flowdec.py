"""Patch-wise pixel flow decoder.

Latents are lifted tokenwise to the decoder width, given fixed 2D positions,
and mixed by ``gtb_depth`` global transformer blocks into one condition token
per patch. A shared per-patch MLP then predicts the rectified-flow velocity
``eps - x`` from (noisy patch, timestep, condition). Data sits at t=0 and
noise at t=1, so sampling integrates from t=1 down to t=0.
"""

from __future__ import annotations

from typing import Callable

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import RunConfig
from .modules import BlockStack, sincos_2d, timestep_embedding
from .patches import patchify, unpatchify

TIME_EMBED_DIM = 64

VelocityFn = Callable[[torch.Tensor, torch.Tensor, torch.Tensor], torch.Tensor]


class ResidualMLP(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.norm = nn.LayerNorm(width)
        self.fc1 = nn.Linear(width, width)
        self.fc2 = nn.Linear(width, width)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        return h + self.fc2(F.silu(self.fc1(self.norm(h))))


class FlowHead(nn.Module):
    """Per-patch velocity MLP. Inputs are concatenated, so patches never interact."""

    def __init__(self, patch_size: int, cond_dim: int, depth: int, width: int):
        super().__init__()
        self.patch_dim = 3 * patch_size * patch_size
        self.inp = nn.Linear(self.patch_dim + TIME_EMBED_DIM + cond_dim, width)
        for i in range(1, depth + 1):
            self.add_module(f"res{i}", ResidualMLP(width))
        self.depth = depth
        self.out_norm = nn.LayerNorm(width)
        self.out = nn.Linear(width, self.patch_dim)

    def forward(self, x_t: torch.Tensor, t: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        """x_t: (N, patch_dim), t: (N,), c: (N, cond_dim) -> (N, patch_dim)."""
        temb = timestep_embedding(t.to(x_t.dtype), TIME_EMBED_DIM)
        h = self.inp(torch.cat([x_t, temb, c], dim=-1))
        for i in range(1, self.depth + 1):
            h = getattr(self, f"res{i}")(h)
        return self.out(F.silu(self.out_norm(h)))


class FlowDecoder(nn.Module):
    def __init__(self, cfg: RunConfig):
        super().__init__()
        self.patch_size = cfg.patch_size
        self.grid = cfg.grid_size
        self.mode = cfg.decoder_mode
        self.timestep_distribution = cfg.timestep_distribution
        self.p_up = nn.Linear(cfg.latent_dim, cfg.dec_dim)
        self.register_buffer("pos", sincos_2d(self.grid, cfg.dec_dim), persistent=False)
        self.gtb = BlockStack(cfg.gtb_depth, cfg.dec_dim, cfg.num_heads, cfg.mlp_ratio)
        self.head = FlowHead(cfg.patch_size, cfg.dec_dim, cfg.flow_head_depth, cfg.flow_head_width)

    def velocity(self, x_t: torch.Tensor, t: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        return predict_velocity(x_t, t, cond, self.head)


def lift_and_globalize(z: torch.Tensor, dec: FlowDecoder) -> torch.Tensor:
    """(B, g, g, latent_dim) -> condition tokens (B, g, g, dec_dim)."""
    b, gh, gw, _ = z.shape
    if (gh, gw) != (dec.grid, dec.grid):
        raise ValueError(f"latent grid {gh}x{gw} does not match decoder grid {dec.grid}")
    h = dec.p_up(z.reshape(b, gh * gw, -1)) + dec.pos.to(z.dtype)
    cond = dec.gtb(h)
    if not torch.isfinite(cond).all():
        raise FloatingPointError("non-finite condition tokens")
    return cond.reshape(b, gh, gw, -1)


def interpolate(x: torch.Tensor, eps: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
    """x_t = (1 - t) x + t eps, with per-sample ``t`` broadcast over trailing axes."""
    t = torch.as_tensor(t, dtype=x.dtype, device=x.device)
    if ((t < 0) | (t > 1)).any():
        raise ValueError("t must lie in [0, 1]")
    t = t.reshape(t.shape + (1,) * (x.ndim - t.ndim))
    # lerp is exact at both endpoints and when x == eps
    return torch.lerp(x, eps, t.expand_as(x))


def target_velocity(x: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    return eps - x


def predict_velocity(x_t: torch.Tensor, t: torch.Tensor, cond: torch.Tensor, head: FlowHead) -> torch.Tensor:
    """Velocity for patches (B, S, p, p, 3) given per-sample t (B,) and conditions (B, g, g, D)."""
    b, s = x_t.shape[:2]
    if cond.shape[0] != b or cond.shape[1] * cond.shape[2] != s:
        raise ValueError(f"{s} patches do not align with a {cond.shape[1]}x{cond.shape[2]} condition grid")
    c = cond.reshape(b * s, -1)
    tt = t.reshape(b, 1).expand(b, s).reshape(-1)
    v = head(x_t.reshape(b * s, -1), tt, c)
    return v.reshape(x_t.shape)


def sample_timesteps(n: int, distribution: str, generator: torch.Generator | None,
                     dtype: torch.dtype = torch.float32) -> torch.Tensor:
    if distribution == "uniform":
        return torch.rand(n, generator=generator, dtype=dtype)
    if distribution == "logit_normal":
        return torch.sigmoid(torch.randn(n, generator=generator, dtype=dtype))
    raise ValueError(f"unknown timestep distribution {distribution!r}")


def flow_loss(images: torch.Tensor, cond: torch.Tensor, dec: FlowDecoder,
              generator: torch.Generator | None = None) -> torch.Tensor:
    """Mean squared velocity error with fresh per-patch noise and per-image timesteps.

    In ``pixel`` mode the head regresses the clean patch directly from its
    condition (noisy input and timestep held at zero).
    """
    x = patchify(images, dec.patch_size)
    b = x.shape[0]
    if dec.mode == "pixel":
        zeros = torch.zeros_like(x)
        pred = predict_velocity(zeros, torch.zeros(b, dtype=x.dtype), cond, dec.head)
        return F.mse_loss(pred, x)
    eps = torch.randn(x.shape, generator=generator, dtype=x.dtype)
    t = sample_timesteps(b, dec.timestep_distribution, generator, x.dtype)
    x_t = interpolate(x, eps, t)
    return F.mse_loss(dec.velocity(x_t, t, cond), target_velocity(x, eps))


def euler_sample(cond: torch.Tensor, velocity: VelocityFn, steps: int, patch_size: int,
                 generator: torch.Generator | None = None, noise: torch.Tensor | None = None) -> torch.Tensor:
    """Integrate from pure noise at t=1 to t=0 with ``steps`` uniform Euler steps.

    ``velocity(x_t, t, cond)`` acts on patches (B, S, p, p, 3). The result is
    unpatchified to (B, 3, H, W) and clamped to [-1, 1] once, at the end.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    b, gh, gw, _ = cond.shape
    shape = (b, gh * gw, patch_size, patch_size, 3)
    x = noise if noise is not None else torch.randn(shape, generator=generator, dtype=cond.dtype)
    dt = 1.0 / steps
    for i in range(steps):
        t = torch.full((b,), 1.0 - i * dt, dtype=x.dtype)
        x = x - dt * velocity(x, t, cond)
        if not torch.isfinite(x).all():
            raise FloatingPointError(f"non-finite sampler state at step {i + 1}/{steps}")
    return unpatchify(x, gh).clamp(-1.0, 1.0)


@torch.no_grad()
def decode(cond: torch.Tensor, dec: FlowDecoder, steps: int = 1,
           generator: torch.Generator | None = None) -> torch.Tensor:
    """Images (B, 3, H, W) from condition tokens using the decoder's own head."""
    if dec.mode == "pixel":
        b, g = cond.shape[0], cond.shape[1]
        shape = (b, g * g, dec.patch_size, dec.patch_size, 3)
        zeros = torch.zeros(shape, dtype=cond.dtype)
        pred = predict_velocity(zeros, torch.zeros(b, dtype=cond.dtype), cond, dec.head)
        return unpatchify(pred, g).clamp(-1.0, 1.0)
    return euler_sample(cond, dec.velocity, steps, dec.patch_size, generator)
