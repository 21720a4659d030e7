"""Image ingestion, batching, and the procedural toy corpus."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np
import torch
from PIL import Image, ImageDraw

from .config import RunConfig

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg"}
TOY_CLASSES = ("disc", "square", "stripes", "triangle")  # sorted, so on-disk labels match


@dataclass
class ImageBatch:
    """Pixels in [-1, 1], shape (B, 3, H, W), with optional integer labels."""

    data: torch.Tensor
    labels: torch.Tensor | None = None

    def __post_init__(self) -> None:
        if self.data.ndim != 4 or self.data.shape[1] != 3:
            raise ValueError(f"expected (B, 3, H, W), got {tuple(self.data.shape)}")
        if not torch.isfinite(self.data).all():
            raise ValueError("image batch contains non-finite values")

    def __len__(self) -> int:
        return self.data.shape[0]


def to_unit_range(pixels: np.ndarray) -> np.ndarray:
    """uint8 HWC/NHWC -> float32 in [-1, 1] (255 -> 1.0, 0 -> -1.0)."""
    return pixels.astype(np.float32) / 127.5 - 1.0


def to_uint8(images: torch.Tensor | np.ndarray) -> np.ndarray:
    """(B, 3, H, W) in [-1, 1] -> (B, H, W, 3) uint8."""
    arr = images.detach().cpu().numpy() if isinstance(images, torch.Tensor) else np.asarray(images)
    arr = np.clip((arr + 1.0) * 127.5, 0, 255).round().astype(np.uint8)
    return arr.transpose(0, 2, 3, 1)


def fit_to_size(img: Image.Image, size: int) -> Image.Image:
    """Resize the short side to ``size`` then center-crop to a square."""
    img = img.convert("RGB")
    w, h = img.size
    scale = size / min(w, h)
    if scale != 1.0:
        img = img.resize((max(size, round(w * scale)), max(size, round(h * scale))), Image.BICUBIC)
    w, h = img.size
    left, top = (w - size) // 2, (h - size) // 2
    return img.crop((left, top, left + size, top + size))


class ImageDataset:
    """An in-memory uint8 image set with deterministic, seed-keyed epoch order."""

    def __init__(self, pixels: np.ndarray, labels: np.ndarray | None = None,
                 class_names: tuple[str, ...] = ()):
        if pixels.ndim != 4 or pixels.shape[-1] != 3 or pixels.dtype != np.uint8:
            raise ValueError("pixels must be uint8 with shape (N, H, W, 3)")
        if len(pixels) == 0:
            raise ValueError("dataset is empty")
        self.pixels = pixels
        self.labels = labels
        self.class_names = class_names
        self.skipped = 0

    def __len__(self) -> int:
        return len(self.pixels)

    def steps_per_epoch(self, batch_size: int) -> int:
        return -(-len(self) // batch_size)

    def epoch_order(self, seed: int, epoch: int, shuffle: bool = True) -> np.ndarray:
        if not shuffle:
            return np.arange(len(self))
        return np.random.default_rng([seed, epoch]).permutation(len(self))

    def batch(self, index: np.ndarray, augment_rng: np.random.Generator | None = None) -> ImageBatch:
        pix = self.pixels[index]
        if augment_rng is not None:
            pix = np.stack([_random_resized_crop(p, augment_rng) for p in pix])
        data = torch.from_numpy(to_unit_range(pix)).permute(0, 3, 1, 2).contiguous()
        labels = None if self.labels is None else torch.from_numpy(self.labels[index].astype(np.int64))
        return ImageBatch(data, labels)

    def iter_batches(self, batch_size: int, seed: int = 0, epoch: int = 0, shuffle: bool = True,
                     augment: bool = False, start: int = 0) -> Iterator[ImageBatch]:
        """Yield the batches of one epoch; ``start`` skips that many batches (for resume)."""
        order = self.epoch_order(seed, epoch, shuffle)
        aug_rng = np.random.default_rng([seed, epoch, 1]) if augment else None
        for b, lo in enumerate(range(0, len(order), batch_size)):
            idx = order[lo:lo + batch_size]
            if b < start:
                if aug_rng is not None:
                    # keep the augmentation stream aligned with an uninterrupted epoch
                    for _ in idx:
                        _crop_params(self.pixels.shape[1], aug_rng)
                continue
            yield self.batch(idx, aug_rng)

    def all_images(self) -> ImageBatch:
        return self.batch(np.arange(len(self)))


def _crop_params(size: int, rng: np.random.Generator) -> tuple[int, int, int]:
    side = int(round(size * np.sqrt(rng.uniform(0.7, 1.0))))
    top = int(rng.integers(0, size - side + 1))
    left = int(rng.integers(0, size - side + 1))
    return side, top, left


def _random_resized_crop(pix: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    size = pix.shape[0]
    side, top, left = _crop_params(size, rng)
    img = Image.fromarray(pix[top:top + side, left:left + side])
    return np.asarray(img.resize((size, size), Image.BICUBIC))


def ingest_dataset(root: str | Path, split: str, config: RunConfig) -> ImageDataset:
    """Load ``root/<split>/[<class>/]*.png|jpg`` resized and center-cropped to ``image_size``.

    Unreadable files are skipped with a warning. Class labels come from the
    sorted subdirectory names; loose files directly under the split carry none.
    """
    split_dir = Path(root) / split
    if not split_dir.is_dir():
        raise FileNotFoundError(f"no such split directory: {split_dir}")
    return ingest_directory(split_dir, config)


def ingest_directory(split_dir: str | Path, config: RunConfig) -> ImageDataset:
    """Load one directory of images, optionally grouped into class subdirectories."""
    split_dir = Path(split_dir)
    if not split_dir.is_dir():
        raise FileNotFoundError(f"no such directory: {split_dir}")
    class_dirs = sorted(p for p in split_dir.iterdir() if p.is_dir())
    entries: list[tuple[Path, int]] = []
    for label, cdir in enumerate(class_dirs):
        entries += [(f, label) for f in sorted(cdir.iterdir()) if f.suffix.lower() in IMAGE_SUFFIXES]
    loose = [(f, -1) for f in sorted(split_dir.iterdir()) if f.is_file() and f.suffix.lower() in IMAGE_SUFFIXES]
    entries += loose
    if not entries:
        raise ValueError(f"no images found under {split_dir}")

    pixels, labels, skipped = [], [], 0
    for path, label in entries:
        try:
            with Image.open(path) as img:
                pixels.append(np.asarray(fit_to_size(img, config.image_size), dtype=np.uint8))
            labels.append(label)
        except (OSError, ValueError) as exc:
            skipped += 1
            log.warning("skipping unreadable image %s: %s", path, exc)
    if skipped:
        log.warning("skipped %d unreadable file(s) in %s", skipped, split_dir)
    if not pixels:
        raise ValueError(f"no readable images under {split_dir}")
    label_arr = np.asarray(labels, dtype=np.int64)
    if (label_arr < 0).any():
        label_arr = None
    ds = ImageDataset(np.stack(pixels), label_arr, tuple(d.name for d in class_dirs))
    ds.skipped = skipped
    return ds


def toy_images(n: int, size: int = 32, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Procedural corpus: one colored shape on a two-tone gradient background.

    Labels index ``TOY_CLASSES``. Images are smooth with sharp shape edges, so
    reconstruction and seam statistics are both meaningful at 32x32.
    """
    rng = np.random.default_rng(seed)
    out = np.empty((n, size, size, 3), dtype=np.uint8)
    labels = rng.integers(0, len(TOY_CLASSES), size=n)
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    for i in range(n):
        c0, c1 = rng.uniform(0, 255, size=(2, 3))
        angle = rng.uniform(0, 2 * np.pi)
        ramp = (np.cos(angle) * xx + np.sin(angle) * yy + 1.0) / 2.0
        bg = c0[None, None] * (1 - ramp[..., None]) + c1[None, None] * ramp[..., None]
        img = Image.fromarray(bg.astype(np.uint8))
        draw = ImageDraw.Draw(img)
        color = tuple(int(v) for v in rng.integers(0, 256, size=3))
        r = rng.uniform(0.2, 0.35) * size
        cx, cy = rng.uniform(r, size - r, size=2)
        kind = TOY_CLASSES[labels[i]]
        if kind == "disc":
            draw.ellipse([cx - r, cy - r, cx + r, cy + r], fill=color)
        elif kind == "square":
            draw.rectangle([cx - r, cy - r, cx + r, cy + r], fill=color)
        elif kind == "triangle":
            draw.polygon([(cx, cy - r), (cx - r, cy + r), (cx + r, cy + r)], fill=color)
        else:
            period = int(rng.integers(4, 9))
            for x0 in range(int(rng.integers(0, period)), size, period):
                draw.rectangle([x0, 0, x0 + period // 2 - 1, size], fill=color)
        out[i] = np.asarray(img)
    return out, labels.astype(np.int64)


def toy_dataset(n: int, size: int = 32, seed: int = 0) -> ImageDataset:
    pixels, labels = toy_images(n, size, seed)
    return ImageDataset(pixels, labels, TOY_CLASSES)


def write_toy_corpus(root: str | Path, n_train: int, n_eval: int, size: int = 32, seed: int = 0) -> Path:
    """Write the toy corpus as ``root/{train,eval}/<class>/<idx>.png``."""
    root = Path(root)
    for split, n, s in (("train", n_train, seed), ("eval", n_eval, seed + 1)):
        pixels, labels = toy_images(n, size, s)
        for name in TOY_CLASSES:
            (root / split / name).mkdir(parents=True, exist_ok=True)
        for i, (pix, lab) in enumerate(zip(pixels, labels)):
            Image.fromarray(pix).save(root / split / TOY_CLASSES[lab] / f"{i:05d}.png")
    return root


def load_split(config: RunConfig, split: str) -> ImageDataset:
    """Dataset for ``split`` from ``config.data_root``, or the synthetic corpus when unset."""
    if config.data_root:
        return ingest_dataset(config.data_root, split, config)
    if split == "train":
        return toy_dataset(config.synthetic_size, config.image_size, config.seed)
    return toy_dataset(config.synthetic_eval_size, config.image_size, config.seed + 1)
