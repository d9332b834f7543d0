"""Dataset ingestion, fold splitting, synthetic data and augmentation."""
from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .functional import interp_matrix

IMAGE_EXTS = (".png", ".jpg", ".jpeg", ".bmp")


class DataError(IOError):
    pass


@dataclass
class Sample:
    image: np.ndarray  # [3, H, W] float32 in [0, 1]
    mask: np.ndarray  # [H, W] int64 class indices, 0 = background
    name: str = ""


# ---------------------------------------------------------------------------
# file loading

def _type_max(arr: np.ndarray) -> float:
    if np.issubdtype(arr.dtype, np.integer):
        return float(np.iinfo(arr.dtype).max)
    return 1.0


def _read(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            if im.mode in ("P", "PA", "RGBA", "LA", "CMYK", "YCbCr"):
                im = im.convert("RGB")
            elif im.mode == "1":
                im = im.convert("L")
            arr = np.array(im)
    except (OSError, ValueError) as e:
        raise DataError(f"cannot read {path}: {e}") from e
    if arr.dtype == np.int32 and arr.min() >= 0 and arr.max() <= 65535:  # PIL 'I' for 16-bit PNGs
        arr = arr.astype(np.uint16)
    return arr


def resize_bilinear(img: np.ndarray, size: int) -> np.ndarray:
    """``[C, H, W]`` -> ``[C, size, size]`` in float64, half-pixel convention."""
    ah = interp_matrix(img.shape[1], size, "bilinear", np.float64)
    aw = interp_matrix(img.shape[2], size, "bilinear", np.float64)
    return ah @ img.astype(np.float64) @ aw.T


def resize_nearest(mask: np.ndarray, size: int) -> np.ndarray:
    h, w = mask.shape[:2]
    rows = np.minimum((np.arange(size) * h) // size, h - 1)
    cols = np.minimum((np.arange(size) * w) // size, w - 1)
    return mask[rows][:, cols]


def mask_to_indices(arr: np.ndarray, palette: dict | None = None) -> np.ndarray:
    """Decode a mask image to class indices.

    Without a palette, gray levels are binarised at half the type maximum.
    A palette maps class index -> gray level or RGB triple (the background
    is index 0); each pixel takes the nearest palette colour.
    """
    if palette:
        items = sorted((int(k), np.atleast_1d(np.asarray(v, dtype=np.float64))) for k, v in palette.items())
        if 0 not in dict(items):
            items = [(0, np.zeros_like(items[0][1]))] + items
        px = arr.astype(np.float64)
        if px.ndim == 2:
            px = px[..., None]
        dists = []
        for _, colour in items:
            if colour.size != px.shape[-1]:
                if colour.size == 1:
                    colour = np.repeat(colour, px.shape[-1])
                else:
                    raise DataError(f"palette colour {colour} does not match mask channels {px.shape[-1]}")
            dists.append(((px - colour) ** 2).sum(axis=-1))
        labels = np.array([k for k, _ in items])
        return labels[np.argmin(np.stack(dists), axis=0)].astype(np.int64)
    if arr.ndim == 3:
        arr = arr.max(axis=-1)
    return (arr.astype(np.float64) >= _type_max(arr) / 2).astype(np.int64)


def load_image(path, target: int) -> tuple[np.ndarray, tuple[int, int]]:
    """Image as ``[3, target, target]`` float32 in [0, 1], plus its original (H, W)."""
    img = _read(Path(path))
    scale = _type_max(img)
    chw = img[None] if img.ndim == 2 else img.transpose(2, 0, 1)
    if chw.shape[0] == 1:
        chw = np.repeat(chw, 3, axis=0)
    elif chw.shape[0] > 3:
        chw = chw[:3]
    out = np.clip(resize_bilinear(chw, target) / scale, 0.0, 1.0).astype(np.float32)
    return out, img.shape[:2]


def load_sample(image_path, mask_path, target: int = 512, palette: dict | None = None) -> Sample:
    image_path, mask_path = Path(image_path), Path(mask_path)
    img = _read(image_path)
    mask = _read(mask_path)
    if img.shape[:2] != mask.shape[:2]:
        raise DataError(f"{image_path.name}: image {img.shape[:2]} and mask {mask.shape[:2]} sizes differ")
    chw, _ = load_image(image_path, target)
    idx = mask_to_indices(resize_nearest(mask, target), palette)
    return Sample(chw, idx, image_path.stem)


def list_names(data_dir) -> list[str]:
    """Sorted sample names that have both an image and a ``masks/<name>.png``."""
    data_dir = Path(data_dir)
    img_dir, mask_dir = data_dir / "images", data_dir / "masks"
    if not img_dir.is_dir() or not mask_dir.is_dir():
        raise DataError(f"{data_dir} must contain images/ and masks/ directories")
    names = []
    for p in img_dir.iterdir():
        if p.suffix.lower() in IMAGE_EXTS:
            if not (mask_dir / f"{p.stem}.png").exists():
                raise DataError(f"no mask for image {p.name}")
            names.append(p.stem)
    return sorted(names)


def image_path(data_dir, name: str) -> Path:
    for ext in IMAGE_EXTS:
        for cand in (ext, ext.upper()):
            p = Path(data_dir) / "images" / f"{name}{cand}"
            if p.exists():
                return p
    raise DataError(f"no image for sample {name!r}")


def load_dataset(data_dir, target: int, names: Sequence[str] | None = None,
                 palette: dict | None = None) -> list[Sample]:
    data_dir = Path(data_dir)
    names = list_names(data_dir) if names is None else names
    return [load_sample(image_path(data_dir, n), data_dir / "masks" / f"{n}.png", target, palette)
            for n in names]


# ---------------------------------------------------------------------------
# folds

@dataclass
class FoldSpec:
    k: int
    K: int
    classes: dict[str, list[str]]
    train: list[str]
    test: list[str]


def chunk_bounds(length: int, K: int) -> list[tuple[int, int]]:
    return [((j * length) // K, ((j + 1) * length) // K) for j in range(K)]


def kfold_split(names_per_class: dict[str, Sequence[str]], K: int, k: int) -> FoldSpec:
    """Slice every class list into K contiguous chunks; chunk k of every class is the test fold."""
    if K < 2:
        raise ValueError("K must be >= 2")
    if not 0 <= k < K:
        raise ValueError(f"fold index {k} outside [0, {K})")
    train, test = [], []
    for cls, names in names_per_class.items():
        names = list(names)
        if len(names) < K:
            raise ValueError(f"class {cls!r} has {len(names)} items, fewer than K={K}")
        for j, (lo, hi) in enumerate(chunk_bounds(len(names), K)):
            (test if j == k else train).extend(names[lo:hi])
    return FoldSpec(k, K, {c: list(v) for c, v in names_per_class.items()}, train, test)


def group_by_class(names: Sequence[str], pattern: str = r"^[A-Za-z]+") -> dict[str, list[str]]:
    """Group sorted names by the regex match at their start (e.g. 'benign (12)' -> 'benign')."""
    rx = re.compile(pattern)
    groups: dict[str, list[str]] = {}
    for name in sorted(names):
        m = rx.match(name)
        groups.setdefault(m.group(0) if m else "", []).append(name)
    return groups


# ---------------------------------------------------------------------------
# synthetic ellipses

def _ellipse(size, rng):
    cy, cx = rng.uniform(0.15, 0.85, size=2) * size
    a, b = rng.uniform(0.08, 0.22, size=2) * size
    theta = rng.uniform(0, np.pi)
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dy, dx = yy - cy, xx - cx
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def synth_sample(size: int, num_classes: int, rng: np.random.Generator, name: str = "") -> Sample:
    background = rng.uniform(0.1, 0.4, size=3)
    img = np.broadcast_to(background[:, None, None], (3, size, size)).copy()
    mask = np.zeros((size, size), dtype=np.int64)
    for c in range(1, num_classes + 1):
        for _ in range(rng.integers(1, 4)):
            region = _ellipse(size, rng)
            colour = np.clip(background + 0.35 + 0.25 * (c - 1) / max(num_classes, 1)
                             + rng.uniform(-0.05, 0.05, size=3), 0, 1)
            img[:, region] = colour[:, None]
            mask[region] = c
    img += rng.normal(0, 0.08, size=img.shape)
    return Sample(np.clip(img, 0, 1).astype(np.float32), mask, name)


def synth_dataset(count: int, size: int = 64, N: int = 1, seed: int = 0) -> list[Sample]:
    """Noisy images with 1-3 filled ellipses per class; masks are the rasterised ellipses."""
    if size % 32:
        raise ValueError("synthetic image size must be divisible by 32")
    rng = np.random.default_rng(seed)
    return [synth_sample(size, N, rng, f"synth_{i:05d}") for i in range(count)]


# ---------------------------------------------------------------------------
# augmentation

def augment(sample: Sample, rng) -> Sample:
    """Random horizontal flip, vertical flip and quarter-turn rotation, shared by image and mask."""
    img, mask = sample.image, sample.mask
    if rng.random() < 0.5:
        img, mask = img[:, :, ::-1], mask[:, ::-1]
    if rng.random() < 0.5:
        img, mask = img[:, ::-1, :], mask[::-1, :]
    turns = int(rng.integers(0, 4))
    if turns:
        img, mask = np.rot90(img, turns, axes=(1, 2)), np.rot90(mask, turns)
    return Sample(np.ascontiguousarray(img), np.ascontiguousarray(mask), sample.name)


def stack(samples: Sequence[Sample]) -> tuple[np.ndarray, np.ndarray]:
    return np.stack([s.image for s in samples]), np.stack([s.mask for s in samples])


def mask_to_png_levels(mask: np.ndarray, num_classes: int) -> np.ndarray:
    """Class indices -> 8-bit gray levels ``round(index * 255 / N)``."""
    return np.rint(mask.astype(np.float64) * 255.0 / num_classes).astype(np.uint8)


def write_dataset(samples: Sequence[Sample], out_dir, num_classes: int = 1) -> Path:
    """Write samples in the ``images/<name>.png`` + ``masks/<name>.png`` layout."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    for s in samples:
        img = np.rint(s.image.transpose(1, 2, 0) * 255.0).astype(np.uint8)
        Image.fromarray(img).save(out_dir / "images" / f"{s.name}.png")
        Image.fromarray(mask_to_png_levels(s.mask, num_classes)).save(out_dir / "masks" / f"{s.name}.png")
    return out_dir


def palette_for_levels(num_classes: int) -> dict[int, int] | None:
    """Gray-level palette matching :func:`mask_to_png_levels` (None for binary masks)."""
    if num_classes == 1:
        return None
    return {c: int(round(c * 255.0 / num_classes)) for c in range(num_classes + 1)}
