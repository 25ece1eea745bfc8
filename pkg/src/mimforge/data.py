"""Synthetic shape datasets, fixed-record binary ingestion, augmentation, patch view.

Images are numpy float arrays of shape (H, W, C) with values in [0, 1].
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np


class DataError(ValueError):
    """Raised for malformed dataset files or inconsistent dimensions."""


@dataclass
class LabeledExample:
    image: np.ndarray  # (H, W, C) float32 in [0, 1]
    label: int


@dataclass
class SegExample:
    image: np.ndarray
    label: int  # shape class in [0, num_classes)
    seg: np.ndarray  # (H, W) int32; 0 = background, label + 1 = shape


@dataclass
class PatchGrid:
    h: int
    w: int
    patches: np.ndarray  # (h*w, P*P*C), row-major over the grid

    @property
    def n(self) -> int:
        return self.h * self.w


@dataclass
class AugmentConfig:
    crop_scale: tuple[float, float] = (0.4, 1.0)
    crop_aspect: tuple[float, float] = (3 / 4, 4 / 3)
    flip_prob: float = 0.5
    jitter: float = 0.4

    def __post_init__(self):
        lo, hi = self.crop_scale
        if not 0 < lo <= hi <= 1:
            raise ValueError(f"crop_scale must satisfy 0 < lo <= hi <= 1, got {self.crop_scale}")
        if not 0 <= self.flip_prob <= 1:
            raise ValueError(f"flip_prob must be in [0, 1], got {self.flip_prob}")
        if self.jitter < 0:
            raise ValueError(f"jitter must be non-negative, got {self.jitter}")


@dataclass
class BinaryLayout:
    """Fixed-record layout: 1 label byte followed by H*W*C pixel bytes."""

    height: int
    width: int
    channels: int
    num_classes: int

    @property
    def record_size(self) -> int:
        return 1 + self.height * self.width * self.channels


# ---------------------------------------------------------------------------
# synthetic shapes
# ---------------------------------------------------------------------------

SHAPE_NAMES = ("square", "disk", "cross", "triangle", "ring")


def _shape_mask(kind: int, size: int, cx: float, cy: float, r: float) -> np.ndarray:
    y, x = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    dx, dy = x - cx, y - cy
    if kind == 0:  # square
        return (np.abs(dx) <= r) & (np.abs(dy) <= r)
    if kind == 1:  # disk
        return dx * dx + dy * dy <= r * r
    if kind == 2:  # cross
        third = r / 3.0
        return ((np.abs(dx) <= third) & (np.abs(dy) <= r)) | (
            (np.abs(dy) <= third) & (np.abs(dx) <= r)
        )
    if kind == 3:  # upward triangle
        return (dy >= -r) & (dy <= r) & (np.abs(dx) <= (dy + r) / 2.0)
    if kind == 4:  # ring
        d2 = dx * dx + dy * dy
        return (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)
    raise ValueError(f"unknown shape kind {kind}")


def _textured_background(size: int, rng: np.random.Generator) -> np.ndarray:
    base = rng.uniform(0.15, 0.75, size=3)
    coarse = rng.uniform(-1, 1, size=(4, 4, 3))
    texture = resize_bilinear(coarse, size, size) * 0.12
    grain = rng.uniform(-1, 1, size=(size, size, 3)) * 0.04
    return np.clip(base + texture + grain, 0.0, 1.0)


def generate_shapes_dataset(
    count: int, size: int, num_classes: int, seed: int
) -> list[SegExample]:
    """One colored shape per image on a textured background; deterministic per seed.

    Each example draws from its own (seed, index) substream, so the output is
    independent of generation order.
    """
    if not 1 <= num_classes <= len(SHAPE_NAMES):
        raise ValueError(f"num_classes must be in [1, {len(SHAPE_NAMES)}], got {num_classes}")
    out = []
    for i in range(count):
        rng = np.random.default_rng([seed, i])
        label = int(rng.integers(num_classes))
        img = _textured_background(size, rng)
        cx, cy = rng.uniform(size * 0.3, size * 0.7, size=2)
        r = rng.uniform(size * 0.18, size * 0.30)
        color = rng.uniform(0.0, 1.0, size=3)
        bg_mean = img.mean(axis=(0, 1))
        if np.abs(color - bg_mean).sum() < 0.75:  # keep the shape visible
            color = 1.0 - bg_mean
        mask = _shape_mask(label, size, cx, cy, r)
        img[mask] = color
        seg = np.zeros((size, size), dtype=np.int32)
        seg[mask] = label + 1
        out.append(SegExample(image=img.astype(np.float32), label=label, seg=seg))
    return out


# ---------------------------------------------------------------------------
# binary records
# ---------------------------------------------------------------------------


def read_binary_dataset(path: str | os.PathLike, layout: BinaryLayout) -> list[LabeledExample]:
    with open(path, "rb") as f:
        raw = f.read()
    rec = layout.record_size
    if len(raw) % rec != 0:
        raise DataError(
            f"{path}: file length {len(raw)} is not a multiple of record size {rec}; "
            f"truncated record starts at byte offset {len(raw) - len(raw) % rec}"
        )
    shape = (layout.height, layout.width, layout.channels)
    out = []
    for start in range(0, len(raw), rec):
        label = raw[start]
        if label >= layout.num_classes:
            raise DataError(
                f"{path}: label {label} out of range [0, {layout.num_classes}) "
                f"at byte offset {start}"
            )
        pixels = np.frombuffer(raw, dtype=np.uint8, count=rec - 1, offset=start + 1)
        img = (pixels.astype(np.float32) / 255.0).reshape(shape)
        out.append(LabeledExample(image=img, label=int(label)))
    return out


def write_binary_dataset(path: str | os.PathLike, examples: list[LabeledExample]) -> None:
    with open(path, "wb") as f:
        for ex in examples:
            f.write(bytes([ex.label]))
            f.write(np.round(ex.image * 255.0).astype(np.uint8).tobytes())


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


def _axis_lin(src: int, dst: int):
    pos = (np.arange(dst) + 0.5) * (src / dst) - 0.5
    lo = np.floor(pos).astype(np.intp)
    frac = pos - lo
    return np.clip(lo, 0, src - 1), np.clip(lo + 1, 0, src - 1), frac


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-center bilinear resize of an (H, W, C) array."""
    h, w = img.shape[:2]
    if (h, w) == (out_h, out_w):
        return img.copy()
    i0, i1, fy = _axis_lin(h, out_h)
    j0, j1, fx = _axis_lin(w, out_w)
    fy = fy[:, None, None]
    fx = fx[None, :, None]
    rows0 = img[i0]
    rows1 = img[i1]
    top = rows0[:, j0] * (1 - fx) + rows0[:, j1] * fx
    bot = rows1[:, j0] * (1 - fx) + rows1[:, j1] * fx
    return (top * (1 - fy) + bot * fy).astype(img.dtype)


def augment(img: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Random resized crop + horizontal flip + color jitter; keeps input dims."""
    h, w = img.shape[:2]
    out = _random_resized_crop(img, cfg, rng, h, w)
    if cfg.flip_prob > 0 and rng.random() < cfg.flip_prob:
        out = out[:, ::-1].copy()
    if cfg.jitter > 0:
        out = _color_jitter(out, cfg.jitter, rng)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def _random_resized_crop(img, cfg, rng, out_h, out_w):
    h, w = img.shape[:2]
    lo, hi = cfg.crop_scale
    log_lo, log_hi = np.log(cfg.crop_aspect[0]), np.log(cfg.crop_aspect[1])
    for _ in range(10):
        area = rng.uniform(lo, hi) * h * w
        ratio = np.exp(rng.uniform(log_lo, log_hi))
        cw = int(round(np.sqrt(area * ratio)))
        ch = int(round(np.sqrt(area / ratio)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            crop = img[top : top + ch, left : left + cw]
            return resize_bilinear(crop, out_h, out_w)
    return img.copy()  # fallback: keep the full frame


def _color_jitter(img, strength, rng):
    fb, fc, fs = rng.uniform(1 - strength, 1 + strength, size=3)
    out = np.clip(img * fb, 0.0, 1.0)
    mean = out.mean()
    out = np.clip(mean + fc * (out - mean), 0.0, 1.0)
    gray = out.mean(axis=2, keepdims=True)
    out = np.clip(gray + fs * (out - gray), 0.0, 1.0)
    return out


# ---------------------------------------------------------------------------
# patch view
# ---------------------------------------------------------------------------


def patchify(img: np.ndarray, patch: int) -> PatchGrid:
    """Split (H, W, C) into HW/P^2 flattened patch vectors in row-major grid order."""
    h_px, w_px, c = img.shape
    if h_px % patch or w_px % patch:
        raise DataError(f"image dims {h_px}x{w_px} not divisible by patch size {patch}")
    gh, gw = h_px // patch, w_px // patch
    patches = (
        img.reshape(gh, patch, gw, patch, c)
        .transpose(0, 2, 1, 3, 4)
        .reshape(gh * gw, patch * patch * c)
    )
    return PatchGrid(h=gh, w=gw, patches=patches)


def unpatchify(grid: PatchGrid, patch: int, h_px: int, w_px: int, c: int) -> np.ndarray:
    """Exact inverse of patchify for consistent dims."""
    if grid.h * patch != h_px or grid.w * patch != w_px:
        raise DataError(
            f"grid {grid.h}x{grid.w} with patch {patch} cannot produce a {h_px}x{w_px} image"
        )
    if grid.patches.shape != (grid.n, patch * patch * c):
        raise DataError(
            f"patch array shape {grid.patches.shape} inconsistent with "
            f"{grid.n} patches of length {patch * patch * c}"
        )
    return (
        grid.patches.reshape(grid.h, grid.w, patch, patch, c)
        .transpose(0, 2, 1, 3, 4)
        .reshape(h_px, w_px, c)
    )
