"""Dataset ingestion, pixel standardization, augmentation, and fold planning.

Images live in a folder-per-class tree; class indices come from the
lexicographically sorted folder names so they are reproducible across
machines. Pixels are float64 in [0, 1] with channels first.

Standardization subtracts the per-channel mean of the training pixels and
divides by their per-channel population standard deviation. The statistics
must come from training folds only; ``compute_stats`` enforces that when
role tags are supplied.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

__all__ = [
    "Sample",
    "Manifest",
    "PixelStats",
    "FoldPlan",
    "AugmentationPolicy",
    "TransformPlan",
    "load_manifest",
    "load_manifest_file",
    "load_image",
    "compute_stats",
    "standardize",
    "destandardize",
    "bilinear_resize",
    "resize_and_crop",
    "sample_transform_plan",
    "apply_transform_plan",
    "augment",
    "kfold_split",
    "save_manifest",
    "save_fold_plan",
]


@dataclass(frozen=True)
class Sample:
    path: Path
    class_index: int


@dataclass(frozen=True)
class Manifest:
    samples: tuple[Sample, ...]
    class_names: tuple[str, ...]
    skipped: tuple[tuple[str, str], ...] = ()  # (path, reason)

    @property
    def counts(self) -> list[int]:
        out = [0] * len(self.class_names)
        for s in self.samples:
            out[s.class_index] += 1
        return out

    def __len__(self) -> int:
        return len(self.samples)


def load_image(path) -> np.ndarray:
    """Decode to (3, H, W) float64 in [0, 1]; grayscale is promoted to RGB."""
    with Image.open(path) as img:
        rgb = img.convert("RGB")
        arr = np.asarray(rgb, dtype=np.float64) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def load_manifest(root) -> Manifest:
    """Scan a folder-per-class tree, skipping (and reporting) undecodable files."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} is not a directory")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if len(class_dirs) < 2:
        raise ValueError(
            f"dataset root {root} has {len(class_dirs)} class folders; need at least 2")
    samples: list[Sample] = []
    skipped: list[tuple[str, str]] = []
    for index, class_dir in enumerate(class_dirs):
        for file in sorted(p for p in class_dir.iterdir() if p.is_file()):
            try:
                with Image.open(file) as img:
                    img.verify()
            except (UnidentifiedImageError, OSError, ValueError) as exc:
                skipped.append((str(file), str(exc) or type(exc).__name__))
                continue
            samples.append(Sample(file, index))
    return Manifest(tuple(samples), tuple(d.name for d in class_dirs), tuple(skipped))


# ----------------------------------------------------------------------
# standardization
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class PixelStats:
    mean: np.ndarray  # (C,)
    std: np.ndarray   # (C,) population standard deviation, strictly positive

    @property
    def channels(self) -> int:
        return self.mean.shape[0]


def compute_stats(images: Iterable[np.ndarray],
                  roles: Sequence[str] | None = None) -> PixelStats:
    """Per-channel mean/std over every pixel of the given training images.

    ``roles``, when given, tags each image "train" or "val"; any "val" tag
    is a leakage bug and raises.
    """
    images = list(images)
    if not images:
        raise ValueError("compute_stats needs a non-empty training subset")
    if roles is not None:
        if len(roles) != len(images):
            raise ValueError("roles must align with images")
        bad = [i for i, r in enumerate(roles) if r != "train"]
        if bad:
            raise ValueError(
                f"compute_stats received non-training samples at indices {bad[:5]}; "
                "statistics must come from training folds only")
    channels = images[0].shape[0]
    total = np.zeros(channels)
    total_sq = np.zeros(channels)
    count = 0
    for img in images:
        if img.ndim != 3 or img.shape[0] != channels:
            raise ValueError(f"expected (C,H,W) images with C={channels}, "
                             f"got shape {img.shape}")
        total += img.sum(axis=(1, 2))
        total_sq += (img * img).sum(axis=(1, 2))
        count += img.shape[1] * img.shape[2]
    mean = total / count
    var = total_sq / count - mean * mean
    std = np.sqrt(np.maximum(var, 0.0))
    if (std < 1e-12).any():
        flat = [c for c in range(channels) if std[c] < 1e-12]
        raise ValueError(f"channel(s) {flat} are constant; standardization undefined")
    return PixelStats(mean, std)


def _stats_shape(stats: PixelStats, ndim: int):
    if ndim == 3:
        return (stats.channels, 1, 1)
    if ndim == 4:
        return (1, stats.channels, 1, 1)
    raise ValueError(f"expected a 3-d or 4-d image array, got {ndim}-d")


def standardize(x: np.ndarray, stats: PixelStats) -> np.ndarray:
    """(x - mean) / std per channel."""
    if x.shape[-3] != stats.channels:
        raise ValueError(f"input has {x.shape[-3]} channels, stats expect "
                         f"{stats.channels}")
    shape = _stats_shape(stats, x.ndim)
    return (x - stats.mean.reshape(shape)) / stats.std.reshape(shape)


def destandardize(x: np.ndarray, stats: PixelStats) -> np.ndarray:
    shape = _stats_shape(stats, x.ndim)
    return x * stats.std.reshape(shape) + stats.mean.reshape(shape)


# ----------------------------------------------------------------------
# geometric resampling
# ----------------------------------------------------------------------


def _bilinear_sample(img: np.ndarray, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
    """Sample (C,H,W) at fractional coordinates, clamping to the edges."""
    _, h, w = img.shape
    y0 = np.floor(yy)
    x0 = np.floor(xx)
    wy = yy - y0
    wx = xx - x0
    y0 = y0.astype(np.int64)
    x0 = x0.astype(np.int64)
    y0c = np.clip(y0, 0, h - 1)
    y1c = np.clip(y0 + 1, 0, h - 1)
    x0c = np.clip(x0, 0, w - 1)
    x1c = np.clip(x0 + 1, 0, w - 1)
    top = img[:, y0c, x0c] * (1 - wx) + img[:, y0c, x1c] * wx
    bottom = img[:, y1c, x0c] * (1 - wx) + img[:, y1c, x1c] * wx
    return top * (1 - wy) + bottom * wy


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Pixel-center-aligned bilinear resize; identity when sizes match."""
    _, h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return _bilinear_sample(img, yy, xx)


def resize_and_crop(img: np.ndarray, resize_to: int = 256, crop: int = 224,
                    mode: str = "center",
                    rng: np.random.Generator | None = None) -> np.ndarray:
    """Resize so the short side equals ``resize_to``, then cut a crop x crop window.

    "center" is deterministic (validation path); "random" draws the window
    offset from ``rng`` (training path).
    """
    if crop > resize_to:
        raise ValueError(f"crop {crop} exceeds resize target {resize_to}")
    _, h, w = img.shape
    if h < 1 or w < 1:
        raise ValueError(f"degenerate image shape {img.shape}")
    if h <= w:
        new_h, new_w = resize_to, max(resize_to, round(w * resize_to / h))
    else:
        new_h, new_w = max(resize_to, round(h * resize_to / w)), resize_to
    img = bilinear_resize(img, new_h, new_w)
    if mode == "center":
        top = (new_h - crop) // 2
        left = (new_w - crop) // 2
    elif mode == "random":
        if rng is None:
            raise ValueError("random crop needs an rng")
        top = int(rng.integers(0, new_h - crop + 1))
        left = int(rng.integers(0, new_w - crop + 1))
    else:
        raise ValueError(f"unknown crop mode {mode!r}")
    return np.ascontiguousarray(img[:, top:top + crop, left:left + crop])


# ----------------------------------------------------------------------
# augmentation
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class AugmentationPolicy:
    """Per-transform enable probabilities and magnitudes.

    Magnitudes: rotation in degrees, zoom as a factor >= 1, lighting and
    contrast as fractional ranges, warp as the trapezoidal tilt fraction.
    Applied to training samples only; the validation path never augments.
    """

    p_hflip: float = 0.5
    p_vflip: float = 0.5
    p_rotate: float = 0.75
    max_rotation: float = 10.0
    p_zoom: float = 0.75
    max_zoom: float = 1.1
    p_lighting: float = 0.75
    max_lighting: float = 0.2
    p_contrast: float = 0.75
    max_contrast: float = 0.2
    p_warp: float = 0.75
    max_warp: float = 0.2

    def __post_init__(self):
        for f in fields(self):
            if f.name.startswith("p_"):
                v = getattr(self, f.name)
                if not 0.0 <= v <= 1.0:
                    raise ValueError(f"{f.name} must be in [0, 1], got {v}")
        if self.max_zoom < 1.0:
            raise ValueError(f"max_zoom must be >= 1, got {self.max_zoom}")
        if self.max_rotation < 0.0:
            raise ValueError(f"max_rotation must be >= 0, got {self.max_rotation}")

    @classmethod
    def disabled(cls) -> "AugmentationPolicy":
        return cls(p_hflip=0, p_vflip=0, p_rotate=0, p_zoom=0,
                   p_lighting=0, p_contrast=0, p_warp=0)


@dataclass(frozen=True)
class TransformPlan:
    """One concrete draw from a policy; applying it is deterministic."""

    hflip: bool = False
    vflip: bool = False
    rotation: float = 0.0   # degrees
    zoom: float = 1.0
    lighting: float = 0.0
    contrast: float = 0.0
    warp: float = 0.0


def sample_transform_plan(policy: AugmentationPolicy,
                          rng: np.random.Generator) -> TransformPlan:
    """Draw pass/magnitude decisions for every transform, in a fixed order."""
    def gated(p, draw):
        apply = rng.random() < p
        value = draw()
        return value if apply else None

    rotation = gated(policy.p_rotate,
                     lambda: float(rng.uniform(-policy.max_rotation, policy.max_rotation)))
    zoom = gated(policy.p_zoom, lambda: float(rng.uniform(1.0, policy.max_zoom)))
    warp = gated(policy.p_warp,
                 lambda: float(rng.uniform(-policy.max_warp, policy.max_warp)))
    hflip = rng.random() < policy.p_hflip
    vflip = rng.random() < policy.p_vflip
    lighting = gated(policy.p_lighting,
                     lambda: float(rng.uniform(-policy.max_lighting, policy.max_lighting)))
    contrast = gated(policy.p_contrast,
                     lambda: float(rng.uniform(-policy.max_contrast, policy.max_contrast)))
    return TransformPlan(
        hflip=hflip, vflip=vflip,
        rotation=rotation if rotation is not None else 0.0,
        zoom=zoom if zoom is not None else 1.0,
        lighting=lighting if lighting is not None else 0.0,
        contrast=contrast if contrast is not None else 0.0,
        warp=warp if warp is not None else 0.0,
    )


def _rotate(img: np.ndarray, degrees: float) -> np.ndarray:
    _, h, w = img.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    theta = math.radians(degrees)
    cos, sin = math.cos(theta), math.sin(theta)
    yy, xx = np.meshgrid(np.arange(h, dtype=float), np.arange(w, dtype=float),
                         indexing="ij")
    dy, dx = yy - cy, xx - cx
    src_y = cos * dy - sin * dx + cy
    src_x = sin * dy + cos * dx + cx
    return _bilinear_sample(img, src_y, src_x)


def _zoom(img: np.ndarray, factor: float) -> np.ndarray:
    _, h, w = img.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h, dtype=float), np.arange(w, dtype=float),
                         indexing="ij")
    return _bilinear_sample(img, (yy - cy) / factor + cy, (xx - cx) / factor + cx)


def _warp(img: np.ndarray, magnitude: float) -> np.ndarray:
    # symmetric trapezoid: each row is scaled about the vertical midline,
    # linearly from 1-m at the top to 1+m at the bottom
    _, h, w = img.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h, dtype=float), np.arange(w, dtype=float),
                         indexing="ij")
    row_scale = 1.0 + magnitude * (yy - cy) / max(cy, 1.0)
    return _bilinear_sample(img, yy, (xx - cx) * row_scale + cx)


def apply_transform_plan(img: np.ndarray, plan: TransformPlan) -> np.ndarray:
    """Geometric transforms, flips, then photometric; clamped to [0, 1]."""
    out = img
    if plan.rotation != 0.0:
        out = _rotate(out, plan.rotation)
    if plan.zoom != 1.0:
        out = _zoom(out, plan.zoom)
    if plan.warp != 0.0:
        out = _warp(out, plan.warp)
    if plan.hflip:
        out = out[:, :, ::-1]
    if plan.vflip:
        out = out[:, ::-1, :]
    if plan.lighting != 0.0:
        out = out + plan.lighting
    if plan.contrast != 0.0:
        mean = out.mean()
        out = (out - mean) * (1.0 + plan.contrast) + mean
    return np.ascontiguousarray(np.clip(out, 0.0, 1.0))


def augment(img: np.ndarray, policy: AugmentationPolicy,
            rng: np.random.Generator) -> np.ndarray:
    return apply_transform_plan(img, sample_transform_plan(policy, rng))


# ----------------------------------------------------------------------
# fold planning
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class FoldPlan:
    k: int
    assignments: np.ndarray  # per-sample fold index in [0, k)

    def fold_sizes(self) -> list[int]:
        return [int((self.assignments == f).sum()) for f in range(self.k)]

    def val_indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.assignments == fold)

    def train_indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.assignments != fold)


def kfold_split(n: int, k: int, seed: int,
                labels: Sequence[int] | None = None,
                stratified: bool = False) -> FoldPlan:
    """Seeded shuffle then round-robin fold assignment; sizes differ by <= 1.

    Stratified mode round-robins within each class (needs ``labels``) while
    keeping the global cycle, so overall sizes still differ by at most 1.
    """
    if k < 2:
        raise ValueError(f"need at least 2 folds, got {k}")
    if n < k:
        raise ValueError(f"cannot split {n} samples into {k} folds")
    rng = np.random.default_rng(seed)
    assignments = np.empty(n, dtype=np.int64)
    if stratified:
        if labels is None:
            raise ValueError("stratified split needs labels")
        labels = np.asarray(labels)
        if labels.shape != (n,):
            raise ValueError("labels must have one entry per sample")
        cursor = 0
        for cls in np.unique(labels):
            idx = np.flatnonzero(labels == cls)
            rng.shuffle(idx)
            for i in idx:
                assignments[i] = cursor % k
                cursor += 1
    else:
        order = rng.permutation(n)
        assignments[order] = np.arange(n) % k
    return FoldPlan(k, assignments)


# ----------------------------------------------------------------------
# exports
# ----------------------------------------------------------------------


def save_manifest(path, manifest: Manifest) -> None:
    lines = [f"# classes\t{len(manifest.class_names)}"]
    for i, name in enumerate(manifest.class_names):
        lines.append(f"# class\t{i}\t{name}")
    for s in manifest.samples:
        lines.append(f"{s.path}\t{s.class_index}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_manifest_file(path) -> Manifest:
    """Read a manifest export back; accepts subsets of the original rows."""
    names: dict[int, str] = {}
    samples: list[Sample] = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if parts[0] == "# class":
            names[int(parts[1])] = parts[2]
        elif line.startswith("#"):
            continue
        else:
            if len(parts) != 2:
                raise ValueError(f"{path}:{lineno}: expected 'path<TAB>class'")
            samples.append(Sample(Path(parts[0]), int(parts[1])))
    if len(names) < 2 or sorted(names) != list(range(len(names))):
        raise ValueError(f"{path}: manifest needs a complete class table")
    class_names = tuple(names[i] for i in range(len(names)))
    for s in samples:
        if not 0 <= s.class_index < len(class_names):
            raise ValueError(f"{path}: class index {s.class_index} out of range")
    return Manifest(tuple(samples), class_names)


def save_fold_plan(path, plan: FoldPlan) -> None:
    lines = [f"# k\t{plan.k}"]
    lines += [f"{i}\t{int(f)}" for i, f in enumerate(plan.assignments)]
    Path(path).write_text("\n".join(lines) + "\n")
