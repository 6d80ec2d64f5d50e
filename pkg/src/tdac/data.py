"""PNG I/O, dataset manifests and the synthetic building-like datasets.

Synthetic images are drawn with ``numpy.random.default_rng(seed)`` (PCG64),
so a given seed yields the same pixels on every platform.  Each image has
1-4 non-overlapping axis-aligned rectangles or disks on a flat background,
an intensity contrast between object and background, and additive Gaussian
noise.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .train import Sample

STYLES = ("disks", "rects", "huts")
MAX_PLACEMENT_TRIES = 200
MANIFEST_HEADER = ("image", "mask", "split")


class DataError(RuntimeError):
    pass


# --- PNG --------------------------------------------------------------------


def load_image(path):
    """Read an 8-bit grayscale or RGB PNG as float64 in [0, 1] (``H x W x 3``)."""
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            arr = np.asarray(im)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    if mode == "L":
        arr = np.repeat(arr[..., None], 3, axis=2)
    elif mode != "RGB":
        raise DataError(f"{path}: unsupported PNG mode {mode!r} (need 8-bit L or RGB)")
    return arr.astype(np.float64) / 255.0


def load_mask(path):
    """Read a grayscale PNG mask; values >= 128 are foreground."""
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            arr = np.asarray(im)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read mask {path}: {exc}") from exc
    if mode not in ("L", "1"):
        raise DataError(f"{path}: unsupported mask mode {mode!r} (need 8-bit grayscale)")
    if mode == "1":
        return arr.astype(np.uint8)
    return (arr >= 128).astype(np.uint8)


def save_image(path, image):
    arr = np.asarray(image, dtype=np.float64)
    u8 = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(u8).save(path, format="PNG")


def save_mask(path, mask):
    Image.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255).save(path, format="PNG")


def save_field(path, field):
    """Render a real field as an 8-bit grayscale PNG after per-image min-max normalization."""
    a = np.asarray(field, dtype=np.float64)
    lo, hi = float(a.min()), float(a.max())
    norm = (a - lo) / (hi - lo) if hi > lo else np.zeros_like(a)
    save_image(path, norm)


def load_pair(image_path, mask_path, sample_id=""):
    image = load_image(image_path)
    mask = load_mask(mask_path)
    if image.shape[:2] != mask.shape:
        raise DataError(
            f"{sample_id or image_path}: image {image.shape[:2]} and mask {mask.shape} sizes differ"
        )
    return Sample(image, mask, sample_id)


# --- manifests ----------------------------------------------------------------


@dataclass
class ManifestEntry:
    image: str
    mask: str
    split: str


@dataclass
class DatasetManifest:
    """CSV manifest with header ``image,mask,split``; paths are relative to ``root``."""

    root: str
    entries: list

    @classmethod
    def read(cls, path):
        root = os.path.dirname(os.path.abspath(path))
        entries = []
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or [c.strip() for c in reader.fieldnames] != list(MANIFEST_HEADER):
                raise DataError(f"{path}: header must be {','.join(MANIFEST_HEADER)}")
            for row in reader:
                split = row["split"].strip()
                if split not in ("train", "test"):
                    raise DataError(f"{path}: bad split tag {split!r}")
                entries.append(ManifestEntry(row["image"].strip(), row["mask"].strip(), split))
        return cls(root, entries)

    def write(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(MANIFEST_HEADER)
            for e in self.entries:
                w.writerow([e.image, e.mask, e.split])

    def load(self, split=None):
        """Load every pair (optionally only one split) as :class:`Sample` objects."""
        out = []
        for e in self.entries:
            if split is not None and e.split != split:
                continue
            img_path = os.path.join(self.root, e.image)
            mask_path = os.path.join(self.root, e.mask)
            for p in (img_path, mask_path):
                if not os.path.exists(p):
                    raise DataError(f"manifest references missing file {p}")
            out.append(load_pair(img_path, mask_path, os.path.splitext(os.path.basename(e.image))[0]))
        return out


# --- synthetic data -----------------------------------------------------------


def _style_params(style, rng, noise):
    if style == "huts":
        contrast, sigma = 0.15, 0.05 if noise is None else noise
    else:
        contrast, sigma = rng.uniform(0.25, 0.6), 0.05 if noise is None else noise
    return contrast, sigma


def _place_shapes(rng, size, style, n_shapes):
    """Rejection-sample ``n_shapes`` shapes separated by at least two pixels."""
    mask = np.zeros((size, size), dtype=bool)
    shapes = []
    yy, xx = np.mgrid[:size, :size]
    lo, hi = max(4, size // 8), max(6, size * 3 // 8)
    for _ in range(n_shapes):
        for _ in range(MAX_PLACEMENT_TRIES):
            if style == "disks":
                r = rng.uniform(lo / 2, hi / 2)
                cy, cx = rng.uniform(r, size - r, size=2)
                shape = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
                geom = ("disk", float(cy), float(cx), float(r))
            else:
                h, w = rng.integers(lo, hi + 1, size=2)
                y0 = int(rng.integers(0, size - h + 1))
                x0 = int(rng.integers(0, size - w + 1))
                shape = np.zeros_like(mask)
                shape[y0 : y0 + h, x0 : x0 + w] = True
                geom = ("rect", y0, x0, int(h), int(w))
            grown = np.zeros_like(mask)
            ys, xs = np.nonzero(shape)
            grown[max(ys.min() - 2, 0) : ys.max() + 3, max(xs.min() - 2, 0) : xs.max() + 3] = True
            if not (grown & mask).any() and shape.any():
                mask |= shape
                shapes.append(geom)
                break
        else:
            raise DataError(f"could not place shape after {MAX_PLACEMENT_TRIES} tries")
    return mask, shapes


def make_sample(rng, size, style="rects", noise=None, sample_id=""):
    """Draw one synthetic image/mask pair; also returns the shape geometry."""
    if style not in STYLES:
        raise ValueError(f"style must be one of {STYLES}")
    if size % 8:
        raise ValueError("size must be divisible by 8")
    # small canvases hold fewer shapes: one at 16 px, up to four from 32 px
    n_shapes = int(rng.integers(1, min(4, (size // 16) ** 2) + 1))
    contrast, sigma = _style_params(style, rng, noise)
    mask, shapes = _place_shapes(rng, size, "disks" if style == "disks" else "rects", n_shapes)
    base = rng.uniform(0.3, 0.7)
    sign = 1.0 if rng.random() < 0.5 else -1.0
    tint = rng.uniform(-0.05, 0.05, size=3)
    lum = np.where(mask, base + sign * contrast, base)
    image = lum[..., None] + tint[None, None, :]
    image = image + rng.normal(0.0, sigma, size=image.shape)
    image = np.clip(image, 0.0, 1.0)
    return Sample(image, mask.astype(np.uint8), sample_id), shapes


def make_synthetic_samples(count, size=64, seed=0, style="rects", noise=None):
    rng = np.random.default_rng(seed)
    return [make_sample(rng, size, style, noise, f"{style}_{i:04d}")[0] for i in range(count)]


def generate_synthetic(out_dir, count, size=64, seed=0, style="rects", test_count=None, noise=None):
    """Write ``count`` synthetic PNG pairs plus ``manifest.csv`` under ``out_dir``.

    The last ``test_count`` samples (default: a quarter) are tagged ``test``.
    Images are quantized to 8 bits on disk.  Returns the manifest path.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    if test_count is None:
        test_count = count // 4
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "masks"), exist_ok=True)
    entries = []
    for i, s in enumerate(make_synthetic_samples(count, size, seed, style, noise)):
        img_rel = os.path.join("images", f"{s.sample_id}.png")
        mask_rel = os.path.join("masks", f"{s.sample_id}.png")
        save_image(os.path.join(out_dir, img_rel), s.image)
        save_mask(os.path.join(out_dir, mask_rel), s.mask)
        entries.append(ManifestEntry(img_rel, mask_rel, "test" if i >= count - test_count else "train"))
    path = os.path.join(out_dir, "manifest.csv")
    DatasetManifest(out_dir, entries).write(path)
    return path


def measured_contrast(sample):
    """Absolute difference of mean luminance between foreground and background."""
    lum = sample.image @ np.array([0.299, 0.587, 0.114])
    m = sample.mask.astype(bool)
    return abs(float(lum[m].mean() - lum[~m].mean()))
