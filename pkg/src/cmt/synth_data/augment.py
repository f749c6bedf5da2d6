"""Weak (flip, crop-resize) and strong (jitter, blur, Cutout) augmentation.

Every view keeps the input's pixel size. An :class:`AugRecord` stores the
axis-aligned affine map from original image coordinates into the view, so
boxes can be carried between any two views of the same image.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from ..errors import BoxOutsideView
from .scene import Box, gaussian_blur

CUTOUT_FILL = 0.5


@dataclass
class AugRecord:
    width: int
    height: int
    flip: bool = False
    crop_offset: Tuple[float, float] = (0.0, 0.0)
    crop_scale: float = 1.0
    cutout_rects: List[Box] = field(default_factory=list)
    brightness: float = 1.0
    contrast: float = 1.0
    blur_sigma: float = 0.0
    dropped: List[int] = field(default_factory=list)

    @classmethod
    def identity(cls, width: int, height: int) -> "AugRecord":
        return cls(width, height)

    # x_view = sx * x + bx ; y_view = sy * y + by
    def _coeffs(self):
        dx, dy = self.crop_offset
        s = self.crop_scale
        sx, bx = 1.0 / s, -dx / s
        if self.flip:
            sx, bx = -sx, self.width - bx
        return sx, bx, 1.0 / s, -dy / s

    def point_to_view(self, x, y):
        sx, bx, sy, by = self._coeffs()
        return sx * np.asarray(x) + bx, sy * np.asarray(y) + by

    def point_from_view(self, u, v):
        sx, bx, sy, by = self._coeffs()
        return (np.asarray(u) - bx) / sx, (np.asarray(v) - by) / sy

    def box_to_view(self, box: Box) -> Box:
        xa, ya = self.point_to_view(box[0], box[1])
        xb, yb = self.point_to_view(box[2], box[3])
        return (float(min(xa, xb)), float(min(ya, yb)), float(max(xa, xb)), float(max(ya, yb)))

    def box_from_view(self, box: Box) -> Box:
        xa, ya = self.point_from_view(box[0], box[1])
        xb, yb = self.point_from_view(box[2], box[3])
        return (float(min(xa, xb)), float(min(ya, yb)), float(max(xa, xb)), float(max(ya, yb)))

    def clamp(self, box: Box) -> Optional[Box]:
        x1, y1 = max(box[0], 0.0), max(box[1], 0.0)
        x2, y2 = min(box[2], float(self.width)), min(box[3], float(self.height))
        if x2 <= x1 or y2 <= y1:
            return None
        return (x1, y1, x2, y2)

    def with_photometric(self, other: "AugRecord") -> "AugRecord":
        """Geometry of ``self`` combined with the photometric part of ``other``."""
        return replace(self, cutout_rects=list(other.cutout_rects), brightness=other.brightness,
                       contrast=other.contrast, blur_sigma=other.blur_sigma)


def transform_box(box: Box, from_record: AugRecord, to_record: AugRecord, clamp: bool = True) -> Box:
    """Map ``box`` from one view of an image into another view of the same image."""
    mapped = to_record.box_to_view(from_record.box_from_view(box))
    if not clamp:
        return mapped
    out = to_record.clamp(mapped)
    if out is None:
        raise BoxOutsideView(f"box {box} maps outside the destination view")
    return out


def _sample_weights(coords: np.ndarray, size: int) -> np.ndarray:
    """Point bilinear weights, shape (len(coords), size); pixel i centred at i + 0.5."""
    u = np.clip(coords - 0.5, 0.0, size - 1)
    i0 = np.floor(u).astype(np.int64)
    i1 = np.minimum(i0 + 1, size - 1)
    frac = u - i0
    w = np.zeros((coords.size, size))
    rows = np.arange(coords.size)
    np.add.at(w, (rows, i0), 1.0 - frac)
    np.add.at(w, (rows, i1), frac)
    return w


def resample(img: np.ndarray, src: AugRecord, dst: AugRecord) -> np.ndarray:
    """Render ``img`` (given in ``src``'s view) in ``dst``'s view geometry.

    Bilinear; samples falling outside the source are clamped to its border.
    """
    _, h, w = img.shape
    centres_x = np.arange(dst.width) + 0.5
    centres_y = np.arange(dst.height) + 0.5
    ox, oy = dst.point_from_view(centres_x, centres_y)
    sx, sy = src.point_to_view(ox, oy)
    wx = _sample_weights(np.asarray(sx, dtype=np.float64), w)
    wy = _sample_weights(np.asarray(sy, dtype=np.float64), h)
    return wy @ img @ wx.T


def warp_to_view(img: np.ndarray, record: AugRecord) -> np.ndarray:
    _, h, w = img.shape
    return resample(img, AugRecord.identity(w, h), record)


@dataclass(frozen=True)
class WeakAugConfig:
    flip_prob: float = 0.5
    min_crop_scale: float = 0.9
    max_crop_scale: float = 1.0


@dataclass(frozen=True)
class StrongAugConfig:
    brightness: Tuple[float, float] = (0.85, 1.15)
    contrast: Tuple[float, float] = (0.85, 1.15)
    blur_sigma: Tuple[float, float] = (0.0, 1.0)
    max_cutouts: int = 2
    cutout_size: Tuple[float, float] = (24.0, 40.0)


def weak_from_params(img: np.ndarray, boxes: Sequence[Box], flip: bool,
                     crop_offset=(0.0, 0.0), crop_scale: float = 1.0):
    _, h, w = img.shape
    rec = AugRecord(w, h, flip=flip, crop_offset=(float(crop_offset[0]), float(crop_offset[1])),
                    crop_scale=float(crop_scale))
    out_img = img.copy() if (not flip and crop_scale == 1.0 and tuple(crop_offset) == (0, 0)) \
        else warp_to_view(img, rec)
    out_boxes = []
    for k, box in enumerate(boxes):
        mapped = rec.clamp(rec.box_to_view(box))
        if mapped is None:
            rec.dropped.append(k)
        else:
            out_boxes.append(mapped)
    return out_img, out_boxes, rec


def apply_weak(img: np.ndarray, boxes: Sequence[Box], rng: np.random.Generator,
               cfg: WeakAugConfig = WeakAugConfig()):
    """Random horizontal flip and crop-resize; returns (img', boxes', record).

    Boxes that end up fully outside the crop are dropped and their input
    indices listed in ``record.dropped``.
    """
    _, h, w = img.shape
    flip = bool(rng.random() < cfg.flip_prob)
    scale = float(rng.uniform(cfg.min_crop_scale, cfg.max_crop_scale))
    dx = float(rng.uniform(0.0, (1.0 - scale) * w))
    dy = float(rng.uniform(0.0, (1.0 - scale) * h))
    return weak_from_params(img, boxes, flip, (dx, dy), scale)


def strong_from_params(img: np.ndarray, brightness: float = 1.0, contrast: float = 1.0,
                       blur_sigma: float = 0.0, cutouts: Sequence[Box] = ()):
    _, h, w = img.shape
    out = img
    if brightness != 1.0:
        out = np.clip(out * brightness, 0.0, 1.0)
    if contrast != 1.0:
        m = out.mean()
        out = np.clip((out - m) * contrast + m, 0.0, 1.0)
    if blur_sigma > 0:
        out = gaussian_blur(out, blur_sigma)
    out = out.copy() if out is img else out
    rects = []
    for rect in cutouts:
        x1, y1 = max(0, int(round(rect[0]))), max(0, int(round(rect[1])))
        x2, y2 = min(w, int(round(rect[2]))), min(h, int(round(rect[3])))
        if x2 > x1 and y2 > y1:
            out[:, y1:y2, x1:x2] = CUTOUT_FILL
            rects.append((float(x1), float(y1), float(x2), float(y2)))
    rec = AugRecord(w, h, cutout_rects=rects, brightness=brightness, contrast=contrast,
                    blur_sigma=blur_sigma)
    return out, rec


def apply_strong(img: np.ndarray, rng: np.random.Generator, cfg: StrongAugConfig = StrongAugConfig()):
    """Colour jitter, Gaussian blur and 0..max_cutouts Cutout rectangles."""
    _, h, w = img.shape
    brightness = float(rng.uniform(*cfg.brightness))
    contrast = float(rng.uniform(*cfg.contrast))
    sigma = float(rng.uniform(*cfg.blur_sigma))
    rects = []
    for _ in range(int(rng.integers(0, cfg.max_cutouts + 1))):
        rw, rh = rng.uniform(*cfg.cutout_size, size=2)
        cx, cy = rng.uniform(0, w), rng.uniform(0, h)
        rects.append((cx - rw / 2, cy - rh / 2, cx + rw / 2, cy + rh / 2))
    return strong_from_params(img, brightness, contrast, sigma, rects)


def student_view(img: np.ndarray, boxes: Sequence[Box], rng: np.random.Generator,
                 weak: WeakAugConfig = WeakAugConfig(), strong: StrongAugConfig = StrongAugConfig()):
    """Independent weak geometry followed by strong photometric augmentation."""
    wimg, wboxes, wrec = apply_weak(img, boxes, rng, weak)
    simg, srec = apply_strong(wimg, rng, strong)
    return simg, wboxes, wrec.with_photometric(srec)
