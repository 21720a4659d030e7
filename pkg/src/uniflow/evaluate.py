"""Model-level evaluation: reconstruct a split and score it."""

from __future__ import annotations

import numpy as np
import torch

from .data import ImageDataset
from .flowdec import decode
from .metrics import (MetricsReport, frechet_proxy, linear_probe, psnr, seam_energy, ssim,
                      teacher_alignment)
from .model import UniFlow

EVAL_BATCH = 128


def _chunks(data: ImageDataset, limit: int | None):
    n = len(data) if limit is None else min(limit, len(data))
    for lo in range(0, n, EVAL_BATCH):
        yield data.batch(np.arange(lo, min(lo + EVAL_BATCH, n)))


@torch.no_grad()
def reconstruct_split(model: UniFlow, data: ImageDataset, steps: int = 1, seed: int = 0,
                      limit: int | None = None, shuffle_conditions: bool = False):
    """Return (originals, reconstructions) as float tensors.

    With ``shuffle_conditions`` every image is decoded from another image's
    condition tokens (a cyclic shift within each chunk), the control for
    checking that reconstructions actually depend on the latent.
    """
    model.eval()
    gen = torch.Generator().manual_seed(seed)
    refs, recs = [], []
    for batch in _chunks(data, limit):
        cond = model.conditions(batch.data)
        if shuffle_conditions:
            cond = torch.roll(cond, shifts=1, dims=0)
        recs.append(decode(cond, model.decoder, steps, gen))
        refs.append(batch.data)
    return torch.cat(refs), torch.cat(recs)


@torch.no_grad()
def probe_features(model: UniFlow, images: torch.Tensor, which: str = "teacher") -> torch.Tensor:
    enc = model.teacher if which == "teacher" else model.student
    return torch.cat([enc.pooled(images[lo:lo + EVAL_BATCH]) for lo in range(0, len(images), EVAL_BATCH)])


@torch.no_grad()
def mean_alignment(model: UniFlow, images: torch.Tensor) -> float:
    vals = []
    for lo in range(0, len(images), EVAL_BATCH):
        chunk = images[lo:lo + EVAL_BATCH]
        vals.append(teacher_alignment(model.student(chunk)[-1], model.teacher(chunk)[-1]) * len(chunk))
    return float(sum(vals) / len(images))


def probe_accuracy(model: UniFlow, train: ImageDataset, test: ImageDataset,
                   limit: int = 2048) -> float | None:
    """Linear probe on pooled final-layer student features: fit on ``train``, score on ``test``."""
    if train.labels is None or test.labels is None:
        return None
    a = train.batch(np.arange(min(limit, len(train))))
    b = test.batch(np.arange(min(limit, len(test))))
    feats = torch.cat([probe_features(model, a.data, "student"), probe_features(model, b.data, "student")])
    labels = torch.cat([a.labels, b.labels])
    mask = np.r_[np.ones(len(a), bool), np.zeros(len(b), bool)]
    return linear_probe(feats, labels, mask).accuracy


def evaluate_model(model: UniFlow, data: ImageDataset, steps: int = 1, seed: int = 0,
                   limit: int | None = 512, probe_train: ImageDataset | None = None,
                   reference: ImageDataset | None = None, gen_source: str = "reconstruction") -> MetricsReport:
    """Score reconstructions of ``data``.

    The Fréchet proxy compares teacher features of ``reference`` (default:
    ``data`` itself) with those of the reconstructions, or, with
    ``gen_source="real"``, with the real images of ``data``.
    """
    refs, recs = reconstruct_split(model, data, steps, seed, limit)
    real = reference.all_images().data if reference is not None else refs
    if limit is not None:
        real = real[:limit]
    gen = recs if gen_source == "reconstruction" else refs
    fd = frechet_proxy(probe_features(model, real).numpy(), probe_features(model, gen).numpy())
    acc = probe_accuracy(model, probe_train, data) if probe_train is not None else None
    return MetricsReport(
        psnr_db=psnr(refs, recs),
        ssim=ssim(refs, recs),
        frechet_proxy=fd,
        seam_energy=seam_energy(recs, model.decoder.patch_size),
        teacher_alignment=mean_alignment(model, refs),
        probe_accuracy=acc,
    )
