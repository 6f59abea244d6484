"""Synthetic colored-shape images for desk-scale training runs.

Each class pairs a shape with a dominant color (red square, green disk,
blue triangle, ...), so the classes are separable from channel statistics
alone. That makes tiny models converge quickly, which is what the
end-to-end tests and the demo dataset need.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

__all__ = ["CLASS_NAMES", "make_shapes_dataset", "write_shapes_tree"]

CLASS_NAMES = ("disk", "square", "triangle", "cross", "ring", "stripe", "dot")

_COLORS = np.array([
    [0.9, 0.15, 0.1],
    [0.1, 0.85, 0.15],
    [0.15, 0.2, 0.9],
    [0.9, 0.85, 0.1],
    [0.85, 0.1, 0.9],
    [0.1, 0.9, 0.85],
    [0.95, 0.55, 0.1],
])


def _shape_mask(kind: str, size: int, cy: float, cx: float, r: float) -> np.ndarray:
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    dy, dx = yy - cy, xx - cx
    if kind == "disk":
        return dy * dy + dx * dx <= r * r
    if kind == "square":
        return (np.abs(dy) <= r) & (np.abs(dx) <= r)
    if kind == "triangle":
        return (dy >= -r) & (dy <= r) & (np.abs(dx) <= (dy + r) / 2.0)
    if kind == "cross":
        return ((np.abs(dy) <= r / 3) & (np.abs(dx) <= r)) | \
               ((np.abs(dx) <= r / 3) & (np.abs(dy) <= r))
    if kind == "ring":
        d2 = dy * dy + dx * dx
        return (d2 <= r * r) & (d2 >= (r / 2) ** 2)
    if kind == "stripe":
        return np.abs(dy) <= r / 2
    if kind == "dot":
        return dy * dy + dx * dx <= (r / 2) ** 2
    raise ValueError(f"unknown shape {kind!r}")


def make_shapes_dataset(n: int = 200, size: int = 32, num_classes: int = 3,
                        seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Return (images (N,3,size,size) in [0,1], labels (N,)), class-balanced."""
    if not 2 <= num_classes <= len(CLASS_NAMES):
        raise ValueError(f"num_classes must be in [2, {len(CLASS_NAMES)}]")
    rng = np.random.default_rng(seed)
    images = np.empty((n, 3, size, size))
    labels = np.array([i % num_classes for i in range(n)], dtype=np.int64)
    for i, label in enumerate(labels):
        background = rng.uniform(0.05, 0.25) + rng.normal(0, 0.03, (3, size, size))
        img = np.clip(background, 0.0, 1.0)
        cy = size / 2 + rng.uniform(-size / 8, size / 8)
        cx = size / 2 + rng.uniform(-size / 8, size / 8)
        r = size * rng.uniform(0.22, 0.34)
        mask = _shape_mask(CLASS_NAMES[label], size, cy, cx, r)
        color = _COLORS[label] * rng.uniform(0.85, 1.0)
        img[:, mask] = color[:, None] + rng.normal(0, 0.02, (3, int(mask.sum())))
        images[i] = np.clip(img, 0.0, 1.0)
    return images, labels


def write_shapes_tree(root, n: int = 200, size: int = 32, num_classes: int = 3,
                      seed: int = 0) -> Path:
    """Write the dataset as a folder-per-class PNG tree; returns the root."""
    root = Path(root)
    images, labels = make_shapes_dataset(n, size, num_classes, seed)
    for name in CLASS_NAMES[:num_classes]:
        (root / name).mkdir(parents=True, exist_ok=True)
    digits = len(str(n))
    for i, (img, label) in enumerate(zip(images, labels)):
        u8 = (img.transpose(1, 2, 0) * 255).round().astype(np.uint8)
        Image.fromarray(u8).save(root / CLASS_NAMES[label] / f"img{i:0{digits}d}.png")
    return root
