"""Layer-wise adaptive self-distillation.

Each layer gets a penalty ``alpha_l`` (mean tokenwise cosine distance between
student and teacher) and a weight

    w_l = (l/L) * exp(beta * alpha_l) / sum_k (k/L) * exp(beta * alpha_k)

The loss is ``sum_l w_l * alpha_l``. Weights are computed from detached
penalties, so the gradient is a convex combination of per-layer cosine-distance
gradients.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .encoder import LayerFeatureStack

EPS = 1e-8
STRATEGIES = ("final_layer", "uniform", "progressive", "adaptive")


@dataclass
class AdaptiveWeights:
    base: np.ndarray
    penalties: np.ndarray
    beta: float
    weights: np.ndarray


def cosine_distance(student: torch.Tensor, teacher: torch.Tensor) -> torch.Tensor:
    """Tokenwise ``1 - cos`` over the last axis, computed as ``0.5 * |s/|s| - t/|t||^2``.

    The two forms agree for nonzero tokens; this one is exactly zero, with an
    exactly zero gradient, whenever ``student`` and ``teacher`` are bitwise equal.
    Zero-norm tokens are guarded by ``EPS``.
    """
    s = student / student.norm(dim=-1, keepdim=True).clamp_min(EPS)
    t = teacher / teacher.norm(dim=-1, keepdim=True).clamp_min(EPS)
    return 0.5 * (s - t).pow(2).sum(dim=-1)


def alignment_penalty(student_l: torch.Tensor, teacher_l: torch.Tensor) -> torch.Tensor:
    """Mean over batch and tokens of ``1 - cos(student token, teacher token)``; in [0, 2]."""
    if student_l.shape != teacher_l.shape:
        raise ValueError(f"shape mismatch: {tuple(student_l.shape)} vs {tuple(teacher_l.shape)}")
    return cosine_distance(student_l, teacher_l).mean()


def base_weights(num_layers: int) -> np.ndarray:
    return np.arange(1, num_layers + 1, dtype=np.float64) / num_layers


def adaptive_weights(penalties: Sequence[float], beta: float) -> AdaptiveWeights:
    alpha = np.asarray(penalties, dtype=np.float64)
    if alpha.ndim != 1 or alpha.size < 1:
        raise ValueError("need at least one layer penalty")
    if not np.isfinite(alpha).all():
        raise ValueError("penalties must be finite")
    base = base_weights(alpha.size)
    # shift by max for overflow safety; cancels in the ratio
    logits = beta * alpha
    scaled = base * np.exp(logits - logits.max())
    return AdaptiveWeights(base, alpha, float(beta), scaled / scaled.sum())


def strategy_weights(penalties: Sequence[float], strategy: str, beta: float) -> np.ndarray:
    n = len(penalties)
    if strategy == "final_layer":
        w = np.zeros(n)
        w[-1] = 1.0
        return w
    if strategy == "uniform":
        return np.full(n, 1.0 / n)
    if strategy == "progressive":
        return adaptive_weights(penalties, 0.0).weights
    if strategy == "adaptive":
        return adaptive_weights(penalties, beta).weights
    raise ValueError(f"unknown distillation strategy {strategy!r}; expected one of {STRATEGIES}")


def layer_penalties(student: LayerFeatureStack, teacher: LayerFeatureStack) -> list[torch.Tensor]:
    if len(student) != len(teacher):
        raise ValueError(f"stack length mismatch: {len(student)} vs {len(teacher)}")
    return [alignment_penalty(s, t) for s, t in zip(student.per_layer, teacher.per_layer)]


def distillation_loss(student: LayerFeatureStack, teacher: LayerFeatureStack, beta: float,
                      strategy: str = "adaptive") -> tuple[torch.Tensor, AdaptiveWeights]:
    """Weighted per-layer cosine distance; the returned record carries the weights actually used."""
    alphas = layer_penalties(student, teacher)
    detached = np.array([a.detach().item() for a in alphas])
    w = strategy_weights(detached, strategy, beta)
    loss = sum(float(wl) * a for wl, a in zip(w, alphas))
    return loss, AdaptiveWeights(base_weights(len(w)), detached, float(beta), w)


def strategy_variant(student: LayerFeatureStack, teacher: LayerFeatureStack, mode: str,
                     beta: float = 2.0) -> torch.Tensor:
    return distillation_loss(student, teacher, beta, mode)[0]
