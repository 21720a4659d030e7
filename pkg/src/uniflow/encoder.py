"""ViT-style student/teacher encoders with per-block feature taps and the latent projection."""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import RunConfig
from .modules import BlockStack, sincos_2d
from .patches import patchify

log = logging.getLogger(__name__)


@dataclass
class LayerFeatureStack:
    """Post-block token grids, one (B, S, D) tensor per encoder layer."""

    per_layer: list[torch.Tensor]
    source: str

    def __len__(self) -> int:
        return len(self.per_layer)

    @property
    def final(self) -> torch.Tensor:
        return self.per_layer[-1]


class ViTEncoder(BlockStack):
    """Patch embedding + fixed 2D sincos positions + ``encoder_layers`` blocks, no class token."""

    def __init__(self, image_size: int, patch_size: int, depth: int, dim: int, heads: int,
                 mlp_ratio: int = 4):
        super().__init__(depth, dim, heads, mlp_ratio)
        self.patch_size = patch_size
        self.grid = image_size // patch_size
        self.patch_embed = nn.Linear(3 * patch_size * patch_size, dim)
        self.register_buffer("pos", sincos_2d(self.grid, dim), persistent=False)
        self.frozen = False

    def tokens(self, images: torch.Tensor) -> torch.Tensor:
        b = images.shape[0]
        patches = patchify(images, self.patch_size).reshape(b, self.grid * self.grid, -1)
        return self.patch_embed(patches) + self.pos.to(patches.dtype)

    def forward(self, images: torch.Tensor) -> list[torch.Tensor]:
        x = self.tokens(images)
        taps = []
        for blk in self.blocks():
            x = blk(x)
            taps.append(x)
        return taps

    def pooled(self, images: torch.Tensor) -> torch.Tensor:
        """Mean-pooled final-block tokens: the feature fed to classification heads."""
        return self.forward(images)[-1].mean(dim=1)


def build_encoder(cfg: RunConfig) -> ViTEncoder:
    return ViTEncoder(cfg.image_size, cfg.patch_size, cfg.encoder_layers, cfg.hidden_dim, cfg.num_heads,
                      cfg.mlp_ratio)


def freeze(module: ViTEncoder) -> ViTEncoder:
    module.frozen = True
    module.eval()
    for p in module.parameters():
        p.requires_grad_(False)
    return module


def encode_layers(images: torch.Tensor, encoder: ViTEncoder) -> LayerFeatureStack:
    grid = encoder.grid * encoder.patch_size
    if images.ndim != 4 or images.shape[1] != 3 or images.shape[-2:] != (grid, grid):
        raise ValueError(f"expected images (B, 3, {grid}, {grid}), got {tuple(images.shape)}")
    if encoder.frozen:
        with torch.no_grad():
            taps = encoder(images)
    else:
        taps = encoder(images)
    # non-finite values propagate through the residual stream, so the last tap suffices
    if not torch.isfinite(taps[-1]).all():
        bad = next(i for i, h in enumerate(taps, start=1) if not torch.isfinite(h).all())
        raise FloatingPointError(f"non-finite activation at encoder layer {bad}")
    return LayerFeatureStack(taps, "teacher" if encoder.frozen else "student")


class LatentProjection(nn.Linear):
    """Tokenwise linear map hidden_dim -> latent_dim, reshaped onto the patch grid."""

    def __init__(self, dim: int, latent_dim: int, bias: bool = True):
        super().__init__(dim, latent_dim, bias=bias)
        if latent_dim > dim:
            log.warning("latent_dim %d > hidden_dim %d: P_down expands rather than compresses",
                        latent_dim, dim)


def project_latent(final_layer: torch.Tensor, p_down: LatentProjection) -> torch.Tensor:
    b, s, _ = final_layer.shape
    g = int(round(s**0.5))
    if g * g != s:
        raise ValueError(f"token count {s} is not a square grid")
    return p_down(final_layer).reshape(b, g, g, -1)


def pretrain_probe_teacher(encoder: ViTEncoder, images: torch.Tensor, labels: torch.Tensor,
                           steps: int, batch_size: int, seed: int, lr: float = 1e-3) -> float:
    """Supervised warm-up of ``encoder`` with a linear head on pooled tokens.

    Returns the training-set accuracy of the head after the last step.
    """
    n_classes = int(labels.max()) + 1
    gen = torch.Generator().manual_seed(seed)
    head = nn.Linear(encoder.patch_embed.out_features, n_classes).to(images.dtype)
    opt = torch.optim.AdamW(list(encoder.parameters()) + list(head.parameters()), lr=lr)
    encoder.train()
    for _ in range(steps):
        idx = torch.randint(0, len(images), (min(batch_size, len(images)),), generator=gen)
        loss = F.cross_entropy(head(encoder.pooled(images[idx])), labels[idx])
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
    with torch.no_grad():
        correct = 0
        for lo in range(0, len(images), 256):
            pred = head(encoder.pooled(images[lo:lo + 256])).argmax(dim=1)
            correct += int((pred == labels[lo:lo + 256]).sum())
    return correct / len(images)


def make_teacher(cfg: RunConfig, student: ViTEncoder, images: torch.Tensor | None = None,
                 labels: torch.Tensor | None = None) -> tuple[ViTEncoder, float | None]:
    """Build the frozen teacher for ``student``.

    ``copy_of_student_init`` freezes a copy of the student as-is. For
    ``pretrained_probe_teacher`` the student is first trained on the labeled
    images, the teacher is frozen from the result, and the student keeps the
    same weights, so distillation starts at its fixed point in both modes.
    Returns the teacher and, for the pretrained mode, its probe accuracy.
    """
    accuracy = None
    if cfg.teacher_source == "pretrained_probe_teacher":
        if images is None or labels is None:
            raise ValueError("pretrained_probe_teacher needs labeled images")
        accuracy = pretrain_probe_teacher(student, images, labels, cfg.teacher_pretrain_steps,
                                          cfg.batch_size, cfg.seed)
        log.info("probe teacher pretrained: train accuracy %.3f", accuracy)
    teacher = freeze(copy.deepcopy(student))
    return teacher, accuracy
