"""Datasets: the built-in synthetic image set and directory ingestion."""

from __future__ import annotations

import csv
import os
import warnings
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .seeding import derive_rng

_SALT_DATA = 0x444154


class IngestError(ValueError):
    """A file in an image directory could not be ingested."""


@dataclass
class Dataset:
    """Images in [0,1], NCHW float64, with integer class labels."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float64)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or len(self.labels) != len(self.images):
            raise ValueError("Dataset needs NCHW images and one label per image")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("Dataset labels out of range")
        if len(self.images) and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ValueError("Dataset image values must lie in [0,1]")

    def __len__(self) -> int:
        return len(self.images)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.num_classes, self.split)


def _smooth_field(rng: np.random.Generator, size: int, cells: int) -> np.ndarray:
    """Low-frequency random field in [0,1]: coarse noise upsampled bilinearly."""
    coarse = rng.uniform(0.0, 1.0, size=(3, cells, cells))
    src = np.linspace(0, cells - 1, size)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, cells - 1)
    f = src - i0
    rows = coarse[:, i0, :] * (1 - f)[None, :, None] + coarse[:, i1, :] * f[None, :, None]
    img = rows[:, :, i0] * (1 - f)[None, None, :] + rows[:, :, i1] * f[None, None, :]
    lo, hi = img.min(), img.max()
    return (img - lo) / (hi - lo + 1e-12)


def generate_synthetic_dataset(
    num_classes: int,
    per_class: int,
    size: int = 32,
    seed: int = 0,
    noise: float = 0.15,
    split: str = "train",
) -> Dataset:
    """Procedural class-conditional images: one smooth color template per class,
    perturbed by random cyclic shifts, contrast/brightness jitter, and pixel noise.

    Deterministic in (all arguments); balanced across classes.
    """
    if num_classes <= 0 or per_class <= 0 or size <= 0:
        raise ValueError("num_classes, per_class and size must be positive")
    split_tag = 0 if split == "train" else 1
    templates = [
        _smooth_field(derive_rng(seed, _SALT_DATA, c), size, cells=5)
        for c in range(num_classes)
    ]
    images = np.empty((num_classes * per_class, 3, size, size))
    labels = np.empty(num_classes * per_class, dtype=np.int64)
    max_shift = size // 8
    for c in range(num_classes):
        for k in range(per_class):
            rng = derive_rng(seed, _SALT_DATA, c, split_tag, k)
            dy, dx = rng.integers(-max_shift, max_shift + 1, size=2)
            img = np.roll(templates[c], (int(dy), int(dx)), axis=(1, 2))
            contrast = rng.uniform(0.75, 1.25)
            brightness = rng.uniform(-0.08, 0.08)
            img = 0.5 + (img - 0.5) * contrast + brightness
            img = img + rng.normal(0.0, noise, size=img.shape)
            idx = c * per_class + k
            images[idx] = np.clip(img, 0.0, 1.0)
            labels[idx] = c
    return Dataset(images, labels, num_classes, split)


def ingest_image_dir(path: str, labels_csv: str, num_classes: int = 10) -> Dataset:
    """Load uniform-size 8-bit RGB images listed in a "filename,label" CSV.

    Files are processed in lexicographic filename order; pixel values are
    scaled to [0,1] by division by 255.
    """
    with open(labels_csv, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    label_map = {}
    for row in rows:
        if len(row) != 2:
            raise IngestError(f"malformed CSV row: {row!r}")
        label_map[row[0]] = row[1]
    if not label_map:
        warnings.warn(f"empty labels CSV {labels_csv}: returning empty dataset")
        return Dataset(np.empty((0, 3, 1, 1)), np.empty(0, dtype=np.int64), num_classes)
    image_exts = (".png", ".jpg", ".jpeg", ".bmp")
    for name in sorted(os.listdir(path)):
        if name.lower().endswith(image_exts) and name not in label_map:
            raise IngestError(f"{name}: no label in {labels_csv}")
    images, labels = [], []
    shape = None
    for name in sorted(label_map):
        fpath = os.path.join(path, name)
        try:
            label = int(label_map[name])
        except ValueError as e:
            raise IngestError(f"{name}: non-integer label {label_map[name]!r}") from e
        if not 0 <= label < num_classes:
            raise IngestError(f"{name}: label {label} out of range [0,{num_classes})")
        try:
            with Image.open(fpath) as im:
                arr = np.asarray(im.convert("RGB"), dtype=np.float64)
        except OSError as e:
            raise IngestError(f"{name}: unreadable image ({e})") from e
        if shape is None:
            shape = arr.shape
        elif arr.shape != shape:
            raise IngestError(f"{name}: size {arr.shape[:2]} differs from {shape[:2]}")
        images.append(arr.transpose(2, 0, 1) / 255.0)
        labels.append(label)
    return Dataset(np.stack(images), np.array(labels), num_classes)


def export_image_dir(images: np.ndarray, labels: np.ndarray, path: str) -> None:
    """Write images as 8-bit PNGs plus a labels.csv suitable for ingest_image_dir."""
    os.makedirs(path, exist_ok=True)
    rows = []
    for i, (img, label) in enumerate(zip(images, labels)):
        name = f"img_{i:05d}.png"
        arr = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)
        Image.fromarray(arr).save(os.path.join(path, name))
        rows.append((name, int(label)))
    with open(os.path.join(path, "labels.csv"), "w", newline="") as fh:
        csv.writer(fh).writerows(rows)
