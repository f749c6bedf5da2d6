"""Paired source/target datasets, on-disk layout, and target ground-truth quarantine.

Layout written by :func:`save_dataset`::

    root/
      manifest.json
      source_train/  images/00000.png ...  annotations.json
      target_train/  images/...            annotations.json
      target_eval/   images/...            annotations.json

Target annotations are written to disk (evaluation needs them) but are loaded
behind :class:`SealedAnnotations`, which only :mod:`cmt.evaluation` may open.
"""
from __future__ import annotations

import contextlib
import hashlib
import json
import sys
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np
from PIL import Image

from ..errors import QuarantineError
from .scene import GenConfig, SceneObject, generate_scene

SPLITS = ("source_train", "target_train", "target_eval")
_ALLOWED_READERS = frozenset({"cmt.evaluation"})
_guard = threading.local()


@contextlib.contextmanager
def training_guard():
    """Forbid any unsealing of target annotations inside the block."""
    depth = getattr(_guard, "depth", 0)
    _guard.depth = depth + 1
    try:
        yield
    finally:
        _guard.depth = depth


def guard_active() -> bool:
    return getattr(_guard, "depth", 0) > 0


class SealedAnnotations:
    """Target-domain ground truth that only the evaluation module can read."""

    __slots__ = ("_SealedAnnotations__data",)

    def __init__(self, data: Dict[int, List[SceneObject]]):
        self.__data = data

    def __len__(self) -> int:
        return len(self.__data)

    def __repr__(self) -> str:
        return f"SealedAnnotations({len(self)} images)"

    def unseal(self) -> Dict[int, List[SceneObject]]:
        caller = sys._getframe(1).f_globals.get("__name__", "")
        if caller not in _ALLOWED_READERS:
            raise QuarantineError(f"target annotations are readable only by evaluation, not {caller!r}")
        if guard_active():
            raise QuarantineError("target annotations read during training")
        return self.__data

    def export_json(self) -> Dict[str, list]:
        """Serialized form for writing the dataset to disk."""
        return {str(k): [o.to_json() for o in v] for k, v in self.__data.items()}


@dataclass
class Split:
    name: str
    ids: List[int]
    images: np.ndarray  # (n, 3, H, W) in [0, 1]
    annotations: Union[Dict[int, List[SceneObject]], SealedAnnotations]

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def labeled(self) -> bool:
        return not isinstance(self.annotations, SealedAnnotations)

    def objects(self, i: int) -> List[SceneObject]:
        if not self.labeled:
            raise QuarantineError(f"split {self.name!r} is unlabeled")
        return self.annotations[self.ids[i]]


@dataclass
class SyntheticDataset:
    source_train: Split
    target_train: Split
    target_eval: Split
    gen_config: GenConfig
    seed: int

    def split(self, name: str) -> Split:
        return getattr(self, name)

    def manifest(self) -> dict:
        return {
            "seed": self.seed,
            "gen_config": self.gen_config.to_dict(),
            "splits": {name: {"count": len(self.split(name)),
                              "sha256": _split_digest(self.split(name))} for name in SPLITS},
        }


def _split_digest(split: Split) -> str:
    h = hashlib.sha256()
    h.update(np.round(split.images * 255).astype(np.uint8).tobytes())
    h.update(json.dumps(split.ids).encode())
    return h.hexdigest()


def generate_dataset(seed: int, gen_config: Optional[GenConfig] = None,
                     n_train: int = 500, n_eval: int = 100) -> SyntheticDataset:
    """Pure function of ``(seed, gen_config, n_train, n_eval)``.

    Source-train and target-train use disjoint scene ids, so the student
    never sees the same geometry in both domains.
    """
    cfg = gen_config or GenConfig()
    ranges = {
        "source_train": range(0, n_train),
        "target_train": range(n_train, 2 * n_train),
        "target_eval": range(2 * n_train, 2 * n_train + n_eval),
    }
    splits = {}
    for name, id_range in ranges.items():
        scenes = [generate_scene(seed, cfg, scene_id=i) for i in id_range]
        domain_key = "image_source" if name.startswith("source") else "image_target"
        size = cfg.image_size
        images = np.stack([getattr(s, domain_key) for s in scenes]) if scenes else np.zeros((0, 3, size, size))
        ann = {s.id: s.objects for s in scenes}
        splits[name] = Split(name, [s.id for s in scenes], images,
                             ann if name.startswith("source") else SealedAnnotations(ann))
    return SyntheticDataset(splits["source_train"], splits["target_train"], splits["target_eval"], cfg, seed)


# ------------------------------------------------------------------ disk I/O

def _write_png(path: Path, img: np.ndarray) -> None:
    arr = np.round(np.clip(img, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(arr, mode="RGB").save(path, optimize=False)


def _read_png(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr.transpose(2, 0, 1) / 255.0


def save_dataset(ds: SyntheticDataset, root: Union[str, Path]) -> dict:
    root = Path(root)
    for name in SPLITS:
        split = ds.split(name)
        d = root / name / "images"
        d.mkdir(parents=True, exist_ok=True)
        for i, sid in enumerate(split.ids):
            _write_png(d / f"{sid:05d}.png", split.images[i])
        if split.labeled:
            payload = {str(sid): [o.to_json() for o in split.annotations[sid]] for sid in split.ids}
        else:
            payload = split.annotations.export_json()
        (root / name / "annotations.json").write_text(json.dumps(payload, indent=1, sort_keys=True))
    manifest = ds.manifest()
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def load_dataset(root: Union[str, Path]) -> SyntheticDataset:
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    splits = {}
    for name in SPLITS:
        raw = json.loads((root / name / "annotations.json").read_text())
        ids = sorted(int(k) for k in raw)
        images = np.stack([_read_png(root / name / "images" / f"{sid:05d}.png") for sid in ids])
        ann = {int(k): [SceneObject.from_json(o) for o in v] for k, v in raw.items()}
        splits[name] = Split(name, ids, images, ann if name.startswith("source") else SealedAnnotations(ann))
    return SyntheticDataset(splits["source_train"], splits["target_train"], splits["target_eval"],
                            GenConfig.from_dict(manifest["gen_config"]), int(manifest["seed"]))


def manifest_hash(manifest: dict) -> str:
    return hashlib.sha256(json.dumps(manifest, sort_keys=True).encode()).hexdigest()
