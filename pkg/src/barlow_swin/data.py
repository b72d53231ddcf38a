"""Image/mask I/O, resizing, seeded dataset splits, and synthetic desk-scale datasets."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image, UnidentifiedImageError

from .exceptions import ConfigError, DataError

SPLITS = ("train", "val", "test")
MASK_THRESHOLD = 127


# --- resizing (half-pixel convention) ----------------------------------


def _source_coords(n_out: int, n_in: int) -> np.ndarray:
    return (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5


def resize_nearest(arr: np.ndarray, size: Tuple[int, int]) -> np.ndarray:
    """Nearest-neighbour resize of an ``(H, W, ...)`` array to ``size=(h, w)``."""
    h_in, w_in = arr.shape[:2]
    h, w = size
    rows = np.clip(np.floor((np.arange(h) + 0.5) * h_in / h).astype(int), 0, h_in - 1)
    cols = np.clip(np.floor((np.arange(w) + 0.5) * w_in / w).astype(int), 0, w_in - 1)
    return arr[rows][:, cols]


def resize_bilinear(arr: np.ndarray, size: Tuple[int, int]) -> np.ndarray:
    """Bilinear resize of an ``(H, W, C)`` float array, edges clamped."""
    h_in, w_in = arr.shape[:2]
    h, w = size
    if (h, w) == (h_in, w_in):
        return arr.copy()
    y = np.clip(_source_coords(h, h_in), 0, h_in - 1)
    x = np.clip(_source_coords(w, w_in), 0, w_in - 1)
    y0 = np.floor(y).astype(int)
    x0 = np.floor(x).astype(int)
    y1 = np.minimum(y0 + 1, h_in - 1)
    x1 = np.minimum(x0 + 1, w_in - 1)
    wy = (y - y0)[:, None, None]
    wx = (x - x0)[None, :, None]
    a = arr[y0][:, x0]
    b = arr[y0][:, x1]
    c = arr[y1][:, x0]
    d = arr[y1][:, x1]
    top = a * (1 - wx) + b * wx
    bottom = c * (1 - wx) + d * wx
    return (top * (1 - wy) + bottom * wy).astype(arr.dtype, copy=False)


# --- file I/O ------------------------------------------------------------


def read_raster(path) -> np.ndarray:
    """Decode an 8-bit grayscale or RGB PNG/PGM/PPM into ``(H, W, C)`` uint8."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"no such image file: {path}")
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            if mode == "P":
                im = im.convert("RGB")
            elif mode == "1":
                im = im.convert("L")
            elif mode not in ("L", "RGB"):
                raise DataError(f"{path}: unsupported pixel format {mode!r}; need 8-bit grayscale or RGB")
            arr = np.asarray(im)
    except (UnidentifiedImageError, OSError) as exc:
        if isinstance(exc, DataError):
            raise
        raise DataError(f"{path}: cannot decode image ({exc})") from None
    if arr.dtype != np.uint8:
        raise DataError(f"{path}: unsupported bit depth {arr.dtype}")
    if arr.size == 0:
        raise DataError(f"{path}: zero-area image")
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return arr


def write_png(path, arr: np.ndarray) -> None:
    """Save a uint8 ``(H, W)``/``(H, W, 1)``/``(H, W, 3)`` array as PNG."""
    arr = np.asarray(arr)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    try:
        Image.fromarray(arr.astype(np.uint8)).save(path, format="PNG")
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc}") from None


def load_image(path, target_size: int) -> np.ndarray:
    """``(S, S, 3)`` float32 in [0, 1]; grayscale replicated to three channels."""
    raw = read_raster(path)
    img = raw.astype(np.float32) / 255.0
    if img.shape[2] == 1:
        img = np.repeat(img, 3, axis=2)
    img = resize_bilinear(img, (target_size, target_size))
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def load_mask(path, target_size: int) -> np.ndarray:
    """``(S, S, 1)`` float32 in {0, 1}: nearest resize, then value > 127 is foreground."""
    raw = read_raster(path)
    if raw.shape[2] == 3:
        raw = np.round(raw.astype(np.float32).mean(axis=2, keepdims=True)).astype(np.uint8)
    raw = resize_nearest(raw, (target_size, target_size))
    return (raw > MASK_THRESHOLD).astype(np.float32)


def load_sample(image_path, mask_path, target_size: int):
    image = load_image(image_path, target_size)
    mask = load_mask(mask_path, target_size) if mask_path is not None else None
    return image, mask


# --- manifest and split --------------------------------------------------


@dataclass
class DatasetManifest:
    entries: List[Tuple[str, Optional[str]]]
    splits: List[str]
    seed: int = 0
    root: Optional[Path] = field(default=None, compare=False)

    def indices(self, split: str) -> List[int]:
        return [i for i, s in enumerate(self.splits) if s == split]

    def subset(self, split: str) -> List[Tuple[str, Optional[str]]]:
        return [self.entries[i] for i in self.indices(split)]

    def counts(self) -> dict:
        return {s: self.splits.count(s) for s in SPLITS}

    def resolve(self, path: Optional[str]) -> Optional[Path]:
        if path is None:
            return None
        p = Path(path)
        return p if p.is_absolute() or self.root is None else self.root / p

    def save(self, path) -> None:
        lines = []
        for (img, mask), split in zip(self.entries, self.splits):
            lines.append(f"{split}\t{img}\t{mask if mask is not None else ''}")
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        if not path.is_file():
            raise DataError(f"manifest not found: {path}")
        entries, splits = [], []
        for n, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3 or parts[0] not in SPLITS:
                raise DataError(f"{path}:{n}: expected 'split<TAB>image<TAB>mask' with split in {SPLITS}")
            splits.append(parts[0])
            entries.append((parts[1], parts[2] or None))
        return cls(entries, splits, root=path.parent)


def split_sizes(n: int) -> Tuple[int, int, int]:
    """70/15/15: val and test rounded half-up, the remainder given to train."""
    n_val = int(np.floor(0.15 * n + 0.5))
    return n - 2 * n_val, n_val, n_val


def split_dataset(entries: Sequence[Tuple[str, Optional[str]]], seed: int) -> DatasetManifest:
    entries = list(entries)
    n = len(entries)
    if n < 3:
        raise ConfigError(f"need at least 3 entries to split, got {n}")
    n_train, n_val, _ = split_sizes(n)
    order = np.random.default_rng(seed).permutation(n)
    splits = [""] * n
    for rank, i in enumerate(order):
        splits[i] = "train" if rank < n_train else ("val" if rank < n_train + n_val else "test")
    return DatasetManifest(entries, splits, seed)


# --- synthetic data ------------------------------------------------------


def disk_mask(size: int, cy: float, cx: float, r: float) -> np.ndarray:
    """Boolean ``(size, size)`` raster of pixel centres inside the circle."""
    yy, xx = np.mgrid[0:size, 0:size]
    return (yy + 0.5 - cy) ** 2 + (xx + 0.5 - cx) ** 2 <= r * r


def _segment_mask(size: int, p0, p1, half_width: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    d = np.asarray(p1, float) - np.asarray(p0, float)
    length2 = max(float(d @ d), 1e-12)
    t = np.clip(((yy - p0[0]) * d[0] + (xx - p0[1]) * d[1]) / length2, 0.0, 1.0)
    dy = yy - (p0[0] + t * d[0])
    dx = xx - (p0[1] + t * d[1])
    return dy * dy + dx * dx <= half_width * half_width


def _disks_sample(size: int, rng: np.random.Generator):
    mask = np.zeros((size, size), bool)
    for _ in range(int(rng.integers(1, 4))):
        r = rng.uniform(0.08, 0.2) * size
        cy, cx = rng.uniform(r, size - r, 2)
        mask |= disk_mask(size, cy, cx, r)
    bg = rng.uniform(0.1, 0.4, 3)
    fg = np.clip(bg + rng.uniform(0.3, 0.5, 3), 0.0, 1.0)
    img = np.where(mask[..., None], fg, bg) + rng.normal(0.0, 0.05, (size, size, 3))
    return np.clip(img, 0, 1).astype(np.float32), mask


def _vessels_sample(size: int, rng: np.random.Generator):
    mask = np.zeros((size, size), bool)
    for _ in range(int(rng.integers(2, 5))):
        p = rng.uniform(0, size, 2)
        heading = rng.uniform(0, 2 * np.pi)
        half_width = rng.choice([0.5, 1.0])
        for _ in range(int(rng.integers(3, 7))):
            heading += rng.normal(0.0, 0.5)
            step = rng.uniform(0.1, 0.25) * size
            q = p + step * np.array([np.sin(heading), np.cos(heading)])
            mask |= _segment_mask(size, p, q, half_width)
            p = np.clip(q, 0, size)
    yy, xx = np.mgrid[0:size, 0:size] / size
    base = 0.55 + 0.15 * np.cos(np.pi * (yy - 0.5)) * np.cos(np.pi * (xx - 0.5))
    tint = np.array([1.0, 0.55, 0.35])
    img = base[..., None] * tint - mask[..., None] * 0.3 * tint
    img = img + rng.normal(0.0, 0.02, (size, size, 3))
    return np.clip(img, 0, 1).astype(np.float32), mask


def synth_dataset(n: int, size: int, shape_kind: str = "disks", seed: int = 0):
    """``n`` (image ``(S, S, 3)`` float32, mask ``(S, S, 1)`` float32) pairs."""
    if n < 1:
        raise ConfigError(f"n must be at least 1, got {n}")
    if size < 16 or size % 16:
        raise ConfigError(f"size must be a positive multiple of 16, got {size}")
    makers = {"disks": _disks_sample, "vessels": _vessels_sample}
    if shape_kind not in makers:
        raise ConfigError(f"shape_kind must be one of {sorted(makers)}, got {shape_kind!r}")
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        img, mask = makers[shape_kind](size, rng)
        out.append((img, mask[..., None].astype(np.float32)))
    return out


def write_dataset(pairs, out_dir, seed: int = 0) -> DatasetManifest:
    """Write PNG images/masks under ``out_dir`` plus ``manifest.tsv`` with a seeded split."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (img, mask) in enumerate(pairs):
        name = f"{i:04d}.png"
        write_png(out_dir / "images" / name, np.round(img * 255.0).astype(np.uint8))
        write_png(out_dir / "masks" / name, (mask > 0.5).astype(np.uint8) * 255)
        entries.append((os.path.join("images", name), os.path.join("masks", name)))
    if len(entries) >= 3:
        manifest = split_dataset(entries, seed)
    else:
        manifest = DatasetManifest(entries, ["train"] * len(entries), seed)
    manifest.root = out_dir
    manifest.save(out_dir / "manifest.tsv")
    return manifest


def load_split(manifest: DatasetManifest, split: str, target_size: int, require_masks: bool = True):
    """Load every (image, mask) of one split; masks may be None when not required."""
    images, masks, names = [], [], []
    for img_path, mask_path in manifest.subset(split):
        if require_masks and mask_path is None:
            raise DataError(f"{img_path}: split {split!r} entry has no mask")
        image, mask = load_sample(manifest.resolve(img_path), manifest.resolve(mask_path), target_size)
        images.append(image)
        masks.append(mask)
        names.append(Path(img_path).stem)
    return images, masks, names
