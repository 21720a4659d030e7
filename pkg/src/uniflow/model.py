"""The full tokenizer: student/teacher encoders, latent projection, and flow decoder."""

from __future__ import annotations

import torch
import torch.nn as nn

from .config import RunConfig
from .encoder import (LatentProjection, LayerFeatureStack, ViTEncoder, build_encoder, encode_layers,
                      make_teacher, project_latent)
from .flowdec import FlowDecoder, decode, lift_and_globalize


class EncoderPair(nn.Module):
    def __init__(self, student: ViTEncoder, teacher: ViTEncoder, p_down: LatentProjection):
        super().__init__()
        self.student = student
        self.teacher = teacher
        self.p_down = p_down


class UniFlow(nn.Module):
    def __init__(self, cfg: RunConfig, encoder: EncoderPair, decoder: FlowDecoder):
        super().__init__()
        self.cfg = cfg
        self.encoder = encoder
        self.decoder = decoder
        self.teacher_probe_accuracy: float | None = None

    @property
    def student(self) -> ViTEncoder:
        return self.encoder.student

    @property
    def teacher(self) -> ViTEncoder:
        return self.encoder.teacher

    def trainable(self) -> dict[str, nn.Parameter]:
        return {n: p for n, p in self.named_parameters() if not n.startswith("encoder.teacher.")}

    def features(self, images: torch.Tensor) -> tuple[LayerFeatureStack, LayerFeatureStack]:
        return encode_layers(images, self.student), encode_layers(images, self.teacher)

    def latent(self, student: LayerFeatureStack) -> torch.Tensor:
        return project_latent(student.final, self.encoder.p_down)

    def conditions(self, images: torch.Tensor) -> torch.Tensor:
        return lift_and_globalize(self.latent(encode_layers(images, self.student)), self.decoder)

    @torch.no_grad()
    def reconstruct(self, images: torch.Tensor, steps: int = 1,
                    generator: torch.Generator | None = None) -> torch.Tensor:
        return decode(self.conditions(images), self.decoder, steps, generator)


def build_model(cfg: RunConfig, images: torch.Tensor | None = None,
                labels: torch.Tensor | None = None, dtype: torch.dtype = torch.float32) -> UniFlow:
    """Initialize every module from ``cfg.seed`` without touching the global RNG stream."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        student = build_encoder(cfg).to(dtype)
        p_down = LatentProjection(cfg.hidden_dim, cfg.latent_dim).to(dtype)
        decoder = FlowDecoder(cfg).to(dtype)
        if images is not None:
            images = images.to(dtype)
        teacher, acc = make_teacher(cfg, student, images, labels)
    model = UniFlow(cfg, EncoderPair(student, teacher, p_down), decoder)
    model.teacher_probe_accuracy = acc
    return model
