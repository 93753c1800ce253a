"""Labeled image sources: a procedural geometric-shapes generator and an
IDX-format loader for standard digit files.

Shapes images are single-channel, values in [0, 1], drawn on a dark
background with randomized position, scale and intensity plus bounded
additive noise.  Image i of class c within a split is a pure function of
(seed, split, c, i), so datasets are reproducible and prefix-stable in
per_class.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

SHAPE_CLASS_NAMES = (
    "disk",
    "square",
    "ring",
    "frame",
    "triangle",
    "cross",
    "xcross",
    "hbar",
    "vbar",
    "diamond",
)

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801

_SPLIT_CODES = {"train": 0, "test": 1}


class IdxFormatError(ValueError):
    """Raised for malformed IDX image/label files."""


@dataclass(frozen=True)
class LabeledImage:
    pixels: np.ndarray  # (channels, height, width), values in [0, 1]
    label: int


@dataclass
class Dataset:
    images: list[LabeledImage]
    num_classes: int
    split: str
    provenance: str = ""

    def __len__(self) -> int:
        return len(self.images)

    def labels(self) -> np.ndarray:
        return np.array([im.label for im in self.images], dtype=np.int64)

    def stacked_pixels(self) -> np.ndarray:
        """(n, channels, height, width) array of all images."""
        return np.stack([im.pixels for im in self.images])

    def by_class(self, label: int) -> list[int]:
        return [i for i, im in enumerate(self.images) if im.label == label]


def _draw_shape(canvas_size: int, label: int, rng: np.random.Generator) -> np.ndarray:
    s = float(canvas_size)
    cx = s / 2 + rng.uniform(-0.12, 0.12) * s
    cy = s / 2 + rng.uniform(-0.12, 0.12) * s
    half = s * rng.uniform(0.21, 0.30)
    amp = rng.uniform(0.3, 0.5)
    yy, xx = np.mgrid[0:canvas_size, 0:canvas_size] + 0.5
    dx = xx - cx
    dy = yy - cy
    r = np.hypot(dx, dy)
    t = 0.33 * half
    name = SHAPE_CLASS_NAMES[label]
    if name == "disk":
        mask = r <= half
    elif name == "square":
        mask = np.maximum(np.abs(dx), np.abs(dy)) <= 0.88 * half
    elif name == "ring":
        mask = (r <= half) & (r >= 0.55 * half)
    elif name == "frame":
        box = np.maximum(np.abs(dx), np.abs(dy))
        mask = (box <= 0.88 * half) & (box >= 0.5 * half)
    elif name == "triangle":
        h = 1.05 * half
        mask = (dy >= -h) & (dy <= 0.7 * h) & (np.abs(dx) <= 0.95 * h * (dy + h) / (1.7 * h))
    elif name == "cross":
        mask = ((np.abs(dx) <= t) & (np.abs(dy) <= 1.05 * half)) | (
            (np.abs(dy) <= t) & (np.abs(dx) <= 1.05 * half)
        )
    elif name == "xcross":
        lim = t * np.sqrt(2.0)
        mask = ((np.abs(dx - dy) <= lim) | (np.abs(dx + dy) <= lim)) & (r <= 1.15 * half)
    elif name == "hbar":
        mask = (np.abs(dy) <= 0.38 * half) & (np.abs(dx) <= 1.1 * half)
    elif name == "vbar":
        mask = (np.abs(dx) <= 0.38 * half) & (np.abs(dy) <= 1.1 * half)
    elif name == "diamond":
        mask = (np.abs(dx) + np.abs(dy)) <= 1.2 * half
    else:  # pragma: no cover
        raise ValueError(f"no renderer for class {label}")
    img = np.where(mask, amp, 0.0)
    img = img + rng.uniform(-0.05, 0.05, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def generate_shapes(
    seed: int,
    classes: int = 10,
    per_class: int = 500,
    size: int = 28,
    split: str = "train",
) -> Dataset:
    """Deterministic dataset of `classes` geometric primitives, `per_class` each."""
    if classes < 2:
        raise ValueError(f"generate_shapes: need at least 2 classes, got {classes}")
    if classes > len(SHAPE_CLASS_NAMES):
        raise ValueError(
            f"generate_shapes: {classes} classes requested but the shape library has "
            f"{len(SHAPE_CLASS_NAMES)}"
        )
    if size < 16:
        raise ValueError(f"generate_shapes: size must be >= 16, got {size}")
    if split not in _SPLIT_CODES:
        raise ValueError(f"generate_shapes: unknown split {split!r}")
    images = []
    code = _SPLIT_CODES[split]
    for label in range(classes):
        for i in range(per_class):
            rng = np.random.default_rng(np.random.SeedSequence([int(seed), code, label, i]))
            pixels = _draw_shape(size, label, rng)[None, :, :]
            pixels.setflags(write=False)
            images.append(LabeledImage(pixels=pixels, label=label))
    prov = f"shapes(seed={seed},classes={classes},per_class={per_class},size={size},split={split})"
    return Dataset(images=images, num_classes=classes, split=split, provenance=prov)


def _read_exact(f, n: int, path: str, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise IdxFormatError(f"{path}: truncated while reading {what} ({len(buf)} of {n} bytes)")
    return buf


def load_idx(images_path, labels_path, split: str = "train") -> Dataset:
    """Load ubyte IDX image/label files; pixels scale from [0,255] to [0,1]."""
    images_path, labels_path = str(images_path), str(labels_path)
    with open(images_path, "rb") as f:
        magic, count, rows, cols = struct.unpack(">IIII", _read_exact(f, 16, images_path, "header"))
        if magic != IDX_IMAGE_MAGIC:
            raise IdxFormatError(
                f"{images_path}: bad magic 0x{magic:08x}, expected 0x{IDX_IMAGE_MAGIC:08x}"
            )
        raw = _read_exact(f, count * rows * cols, images_path, "pixel data")
        pixels = np.frombuffer(raw, dtype=np.uint8).reshape(count, rows, cols)
    with open(labels_path, "rb") as f:
        magic, label_count = struct.unpack(">II", _read_exact(f, 8, labels_path, "header"))
        if magic != IDX_LABEL_MAGIC:
            raise IdxFormatError(
                f"{labels_path}: bad magic 0x{magic:08x}, expected 0x{IDX_LABEL_MAGIC:08x}"
            )
        labels = np.frombuffer(_read_exact(f, label_count, labels_path, "labels"), dtype=np.uint8)
    if count != label_count:
        raise IdxFormatError(
            f"image count {count} ({images_path}) does not match label count "
            f"{label_count} ({labels_path})"
        )
    digest = hashlib.sha256()
    digest.update(pixels.tobytes())
    digest.update(labels.tobytes())
    images = []
    for i in range(count):
        px = (pixels[i].astype(np.float64) / 255.0)[None, :, :]
        px.setflags(write=False)
        images.append(LabeledImage(pixels=px, label=int(labels[i])))
    num_classes = int(labels.max()) + 1 if count else 0
    prov = f"idx(sha256={digest.hexdigest()[:16]})"
    return Dataset(images=images, num_classes=num_classes, split=split, provenance=prov)
