"""Synthetic source/target detection data and augmentation."""
from .augment import (CUTOUT_FILL, AugRecord, StrongAugConfig, WeakAugConfig, apply_strong, apply_weak,
                      resample, strong_from_params, student_view, transform_box, warp_to_view,
                      weak_from_params)
from .dataset import (SPLITS, SealedAnnotations, Split, SyntheticDataset, generate_dataset, guard_active,
                      load_dataset, manifest_hash, save_dataset, training_guard)
from .scene import (CLASS_COLORS, CLASS_NAMES, FOG_COLOR, Box, DomainParams, GenConfig, Scene, SceneObject,
                    box_iou, gaussian_blur, generate_scene, quantize, render_target, scene_rng)

__all__ = [
    "CUTOUT_FILL", "AugRecord", "StrongAugConfig", "WeakAugConfig", "apply_strong", "apply_weak",
    "resample", "strong_from_params", "student_view", "transform_box", "warp_to_view", "weak_from_params",
    "SPLITS", "SealedAnnotations", "Split", "SyntheticDataset", "generate_dataset", "guard_active",
    "load_dataset", "manifest_hash", "save_dataset", "training_guard", "CLASS_COLORS", "CLASS_NAMES",
    "FOG_COLOR", "Box", "DomainParams", "GenConfig", "Scene", "SceneObject", "box_iou", "gaussian_blur",
    "generate_scene", "quantize", "render_target", "scene_rng",
]
