"""Synthetic shape scenes rendered in a clean source domain and a foggy target domain."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import List, Optional, Tuple

import numpy as np
from scipy.ndimage import gaussian_filter

from ..errors import ConfigInvalid

Box = Tuple[float, float, float, float]

CLASS_NAMES = ("disc", "square", "triangle", "diamond", "cross")
# Base RGB per class; each object jitters around its class colour.
CLASS_COLORS = np.array([
    [0.90, 0.30, 0.25],
    [0.30, 0.80, 0.35],
    [0.30, 0.40, 0.90],
    [0.90, 0.80, 0.25],
    [0.75, 0.35, 0.85],
])
FOG_COLOR = np.array([0.8, 0.8, 0.8])


@dataclass(frozen=True)
class DomainParams:
    fog_density: float = 0.5
    blur_sigma: float = 1.0
    brightness_shift: float = 0.0
    noise_std: float = 0.02

    def __post_init__(self):
        if not 0.0 <= self.fog_density <= 1.0:
            raise ConfigInvalid(f"fog_density must be in [0, 1], got {self.fog_density}")
        if self.blur_sigma < 0 or self.noise_std < 0:
            raise ConfigInvalid("blur_sigma and noise_std must be non-negative")

    @property
    def is_identity(self) -> bool:
        return (self.fog_density == 0 and self.blur_sigma == 0
                and self.brightness_shift == 0 and self.noise_std == 0)


@dataclass(frozen=True)
class GenConfig:
    image_size: int = 64
    min_objects: int = 1
    max_objects: int = 6
    num_classes: int = 3
    min_object_size: int = 10
    max_object_size: int = 22
    color_jitter: float = 0.08
    max_overlap_iou: float = 0.5
    max_attempts: int = 500
    domain: DomainParams = field(default_factory=DomainParams)

    def __post_init__(self):
        if self.image_size < 8:
            raise ConfigInvalid("image_size must be at least 8")
        if not 1 <= self.min_objects <= self.max_objects:
            raise ConfigInvalid("need 1 <= min_objects <= max_objects")
        if not 1 <= self.num_classes <= len(CLASS_NAMES):
            raise ConfigInvalid(f"num_classes must be in [1, {len(CLASS_NAMES)}]")
        if not 3 <= self.min_object_size <= self.max_object_size <= self.image_size:
            raise ConfigInvalid("object size range must fit inside the image")
        if isinstance(self.domain, dict):
            object.__setattr__(self, "domain", DomainParams(**self.domain))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GenConfig":
        d = dict(d)
        d["domain"] = DomainParams(**d.get("domain", {}))
        return cls(**d)


@dataclass
class SceneObject:
    class_id: int
    box: Box

    def to_json(self) -> dict:
        return {"class_id": int(self.class_id), "box": [float(v) for v in self.box]}

    @classmethod
    def from_json(cls, d: dict) -> "SceneObject":
        return cls(int(d["class_id"]), tuple(float(v) for v in d["box"]))


@dataclass
class Scene:
    id: int
    objects: List[SceneObject]
    image_source: np.ndarray
    image_target: np.ndarray


def box_iou(a: Box, b: Box) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def scene_rng(seed: int, scene_id: int, stream: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(scene_id), stream]))


def quantize(img: np.ndarray) -> np.ndarray:
    """Round to the 8-bit grid so PNG round trips are lossless."""
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / size
    base = rng.uniform(0.12, 0.24, 3)
    img = np.empty((3, size, size))
    for c in range(3):
        fx, fy = rng.uniform(1.0, 4.0, 2)
        phase = rng.uniform(0, 2 * np.pi, 2)
        wave = np.sin(2 * np.pi * fx * xx + phase[0]) * np.sin(2 * np.pi * fy * yy + phase[1])
        img[c] = base[c] + 0.06 * wave
    img += rng.normal(0.0, 0.015, img.shape)
    return np.clip(img, 0.0, 1.0)


def _shape_mask(class_id: int, cx: float, cy: float, half: float, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dx, dy = xx - cx, yy - cy
    name = CLASS_NAMES[class_id]
    if name == "disc":
        return dx * dx + dy * dy <= half * half
    if name == "square":
        return (np.abs(dx) <= half) & (np.abs(dy) <= half)
    if name == "triangle":
        # apex up, base at the bottom edge of the square footprint
        t = (dy + half) / (2 * half)
        return (np.abs(dy) <= half) & (np.abs(dx) <= t * half)
    if name == "diamond":
        return np.abs(dx) + np.abs(dy) <= half
    arm = half / 3.0
    return ((np.abs(dx) <= half) & (np.abs(dy) <= arm)) | ((np.abs(dy) <= half) & (np.abs(dx) <= arm))


def _mask_box(mask: np.ndarray) -> Optional[Box]:
    rows, cols = np.nonzero(mask.any(axis=1))[0], np.nonzero(mask.any(axis=0))[0]
    if rows.size == 0:
        return None
    return (float(cols[0]), float(rows[0]), float(cols[-1] + 1), float(rows[-1] + 1))


def render_source(rng: np.random.Generator, cfg: GenConfig) -> Tuple[np.ndarray, List[SceneObject]]:
    size = cfg.image_size
    img = _background(rng, size)
    n_objects = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    objects: List[SceneObject] = []
    masks: List[np.ndarray] = []
    attempts = 0
    class_id = None
    while len(objects) < n_objects:
        attempts += 1
        if attempts > cfg.max_attempts:
            raise ConfigInvalid(f"could not place {n_objects} objects in a {size}x{size} image "
                                f"after {cfg.max_attempts} attempts")
        # the class is fixed per slot so rejections do not bias the class mix
        if class_id is None:
            class_id = int(rng.integers(cfg.num_classes))
        side = rng.uniform(cfg.min_object_size, cfg.max_object_size)
        half = side / 2.0
        cx = rng.uniform(half, size - half)
        cy = rng.uniform(half, size - half)
        mask = _shape_mask(class_id, cx, cy, half, size)
        box = _mask_box(mask)
        if box is None or any(box_iou(box, o.box) >= cfg.max_overlap_iou for o in objects):
            continue
        # keep earlier shapes mostly visible
        if any((mask & m).sum() > 0.25 * m.sum() for m in masks):
            continue
        color = np.clip(CLASS_COLORS[class_id] + rng.uniform(-cfg.color_jitter, cfg.color_jitter, 3), 0, 1)
        img[:, mask] = color[:, None]
        objects.append(SceneObject(class_id, box))
        masks.append(mask)
        class_id = None
    # Later shapes can occlude earlier ones; keep boxes tight to what is visible.
    visible = []
    covered = np.zeros((size, size), dtype=bool)
    for obj, mask in reversed(list(zip(objects, masks))):
        box = _mask_box(mask & ~covered)
        covered |= mask
        if box is not None:
            visible.append(SceneObject(obj.class_id, box))
    visible.reverse()
    return img, visible


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    if sigma <= 0:
        return img.copy()
    return np.stack([gaussian_filter(ch, sigma, mode="nearest") for ch in img])


def render_target(scene: Scene, domain: DomainParams, seed: int = 0) -> np.ndarray:
    """Foggy rendering of ``scene.image_source``; annotations are untouched.

    Returns unquantized floats in [0, 1].
    """
    img = scene.image_source
    if domain.is_identity:
        return img.copy()
    out = gaussian_blur(img, domain.blur_sigma)
    if domain.fog_density:
        out = (1.0 - domain.fog_density) * out + domain.fog_density * FOG_COLOR[:, None, None]
    if domain.brightness_shift:
        out = out + domain.brightness_shift
    if domain.noise_std:
        out = out + scene_rng(seed, scene.id, stream=1).normal(0.0, domain.noise_std, out.shape)
    return np.clip(out, 0.0, 1.0)


def generate_scene(rng_seed: int, gen_config: Optional[GenConfig] = None, scene_id: int = 0) -> Scene:
    """Deterministic scene for ``(rng_seed, scene_id, gen_config)``."""
    cfg = gen_config or GenConfig()
    rng = scene_rng(rng_seed, scene_id)
    img, objects = render_source(rng, cfg)
    scene = Scene(scene_id, objects, quantize(img), np.empty(0))
    scene.image_target = quantize(render_target(scene, cfg.domain, rng_seed))
    return scene
