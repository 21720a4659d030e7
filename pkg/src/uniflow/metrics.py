"""Reconstruction and representation metrics.

Images are (B, 3, H, W) arrays in [-1, 1] unless a ``data_range`` says
otherwise. Everything here is pure and accepts numpy arrays or tensors.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
from numpy.lib.stride_tricks import sliding_window_view
from scipy.optimize import minimize

from .distill import alignment_penalty

SSIM_WINDOW = 8
SSIM_K1, SSIM_K2 = 0.01, 0.03
FRECHET_EPS = 1e-6


def _np(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        return x.detach().cpu().double().numpy()
    return np.asarray(x, dtype=np.float64)


def psnr(ref, rec, data_range: float = 2.0, per_image: bool = False):
    """Per-image ``10 log10(range^2 / MSE)`` averaged over the batch.

    An image reconstructed exactly scores ``inf``; the batch mean is then
    ``inf`` as well.
    """
    ref, rec = _np(ref), _np(rec)
    if ref.shape != rec.shape:
        raise ValueError(f"shape mismatch: {ref.shape} vs {rec.shape}")
    mse = ((ref - rec) ** 2).reshape(len(ref), -1).mean(axis=1)
    with np.errstate(divide="ignore"):
        values = np.where(mse == 0, np.inf, 10.0 * np.log10(data_range**2 / np.where(mse == 0, 1, mse)))
    return values if per_image else float(values.mean())


def ssim(ref, rec, data_range: float = 2.0, window: int = SSIM_WINDOW, per_image: bool = False):
    """Mean SSIM over all ``window x window`` uniform windows (stride 1) and channels.

    Window statistics use population (1/N) moments and the usual stabilizers
    ``C1 = (0.01 R)^2``, ``C2 = (0.03 R)^2``.
    """
    ref, rec = _np(ref), _np(rec)
    if ref.shape != rec.shape:
        raise ValueError(f"shape mismatch: {ref.shape} vs {rec.shape}")
    if min(ref.shape[-2:]) < window:
        raise ValueError(f"image {ref.shape[-2:]} is smaller than the {window}x{window} SSIM window")
    c1, c2 = (SSIM_K1 * data_range) ** 2, (SSIM_K2 * data_range) ** 2

    def mean(a):
        return sliding_window_view(a, (window, window), axis=(-2, -1)).mean(axis=(-2, -1))

    mu_x, mu_y = mean(ref), mean(rec)
    var_x = mean(ref * ref) - mu_x**2
    var_y = mean(rec * rec) - mu_y**2
    cov = mean(ref * rec) - mu_x * mu_y
    smap = ((2 * mu_x * mu_y + c1) * (2 * cov + c2)) / ((mu_x**2 + mu_y**2 + c1) * (var_x + var_y + c2))
    values = smap.reshape(len(ref), -1).mean(axis=1)
    return values if per_image else float(values.mean())


def seam_energy(images, patch_size: int) -> float:
    """Mean |neighbor difference| across patch boundaries minus the same within patches."""
    x = _np(images)
    dx = np.abs(np.diff(x, axis=-1))
    dy = np.abs(np.diff(x, axis=-2))
    # diff index i compares pixels i and i+1; a boundary sits where (i+1) % p == 0
    bx = (np.arange(dx.shape[-1]) + 1) % patch_size == 0
    by = (np.arange(dy.shape[-2]) + 1) % patch_size == 0
    boundary = np.concatenate([dx[..., bx].ravel(), dy[..., by, :].ravel()])
    interior = np.concatenate([dx[..., ~bx].ravel(), dy[..., ~by, :].ravel()])
    return float(boundary.mean() - interior.mean())


def gaussian_fit(features) -> tuple[np.ndarray, np.ndarray]:
    f = _np(features)
    if f.ndim != 2 or len(f) < 2:
        raise ValueError("need a (N >= 2, D) feature matrix")
    return f.mean(axis=0), np.cov(f, rowvar=False).reshape(f.shape[1], f.shape[1])


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((m + m.T) / 2)
    return (vecs * np.sqrt(np.clip(vals, 0, None))) @ vecs.T


def frechet_distance(mu1, sigma1, mu2, sigma2, eps: float = FRECHET_EPS) -> float:
    """``|mu1 - mu2|^2 + Tr(S1 + S2 - 2 (S1 S2)^(1/2))`` with ``eps`` added to both diagonals.

    The trace of the matrix square root is taken as the sum of square roots of
    the eigenvalues of ``S1^(1/2) S2 S1^(1/2)``, which is symmetric PSD.
    """
    mu1, mu2 = np.atleast_1d(mu1), np.atleast_1d(mu2)
    s1 = np.atleast_2d(sigma1) + eps * np.eye(len(mu1))
    s2 = np.atleast_2d(sigma2) + eps * np.eye(len(mu2))
    r1 = _psd_sqrt(s1)
    inner = r1 @ s2 @ r1
    tr_sqrt = np.sqrt(np.clip(np.linalg.eigvalsh((inner + inner.T) / 2), 0, None)).sum()
    diff = mu1 - mu2
    return float(diff @ diff + np.trace(s1) + np.trace(s2) - 2 * tr_sqrt)


def frechet_proxy(real_features, gen_features) -> float:
    """Fréchet distance between Gaussian fits of two feature sets (a small-corpus proxy, not FID)."""
    return frechet_distance(*gaussian_fit(real_features), *gaussian_fit(gen_features))


def teacher_alignment(student_final: torch.Tensor, teacher_final: torch.Tensor) -> float:
    """Mean tokenwise cosine similarity; defined as ``1 - alignment_penalty``."""
    return 1.0 - float(alignment_penalty(student_final, teacher_final))


# ---------------------------------------------------------------- linear probe

def _softmax_xent(w_flat: np.ndarray, x: np.ndarray, y: np.ndarray, k: int, l2: float):
    d = x.shape[1]
    w = w_flat.reshape(d + 1, k)
    logits = x @ w[:-1] + w[-1]
    logits -= logits.max(axis=1, keepdims=True)
    logp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
    n = len(x)
    loss = -logp[np.arange(n), y].mean() + 0.5 * l2 * (w[:-1] ** 2).sum()
    p = np.exp(logp)
    p[np.arange(n), y] -= 1.0
    p /= n
    grad = np.vstack([x.T @ p + l2 * w[:-1], p.sum(axis=0, keepdims=True)])
    return loss, grad.ravel()


@dataclass
class ProbeResult:
    accuracy: float
    train_accuracy: float
    converged: bool
    iterations: int


def linear_probe(features, labels, split=0.8, seed: int = 0, l2: float = 1e-4,
                 gtol: float = 1e-6, max_iter: int = 5000) -> ProbeResult:
    """Multinomial logistic regression on frozen features; reports held-out accuracy.

    ``split`` is either a train fraction (rows shuffled with ``seed``) or a
    boolean mask marking training rows. Features are standardized with
    training-split statistics; the full-batch objective is minimized with
    L-BFGS to a gradient-norm tolerance ``gtol``.
    """
    x = _np(features).reshape(len(features), -1)
    y = np.asarray(labels.cpu() if isinstance(labels, torch.Tensor) else labels).astype(np.int64)
    classes, y = np.unique(y, return_inverse=True)
    if len(classes) < 2:
        raise ValueError("linear probe needs at least two classes")
    if isinstance(split, (float, int)) and not isinstance(split, bool):
        order = np.random.default_rng(seed).permutation(len(x))
        mask = np.zeros(len(x), dtype=bool)
        mask[order[: int(round(split * len(x)))]] = True
    else:
        mask = np.asarray(split, dtype=bool)
    if mask.all() or not mask.any():
        raise ValueError("split must leave both train and held-out rows")
    mu = x[mask].mean(axis=0)
    sd = x[mask].std(axis=0)
    sd[sd == 0] = 1.0
    x = (x - mu) / sd
    k = len(classes)
    w0 = np.zeros((x.shape[1] + 1) * k)
    res = minimize(_softmax_xent, w0, args=(x[mask], y[mask], k, l2), jac=True, method="L-BFGS-B",
                   options={"gtol": gtol, "maxiter": max_iter, "maxcor": 20})
    w = res.x.reshape(-1, k)
    pred = (x @ w[:-1] + w[-1]).argmax(axis=1)
    return ProbeResult(float((pred[~mask] == y[~mask]).mean()), float((pred[mask] == y[mask]).mean()),
                       bool(res.success), int(res.nit))


@dataclass
class MetricsReport:
    psnr_db: float
    ssim: float
    frechet_proxy: float
    seam_energy: float
    teacher_alignment: float
    probe_accuracy: float | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["psnr_db"] == float("inf"):
            d["psnr_db"] = "inf"
        return d
