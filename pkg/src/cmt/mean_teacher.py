"""Teacher lifecycle: EMA updates, pseudo-labels, Cutout exclusion, label noise."""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import List, Optional

import numpy as np

from . import numerics as nx
from .detector import DetectorConfig, DetectorParams, decode, forward
from .errors import ShapeMismatch
from .synth_data.augment import AugRecord, resample
from .synth_data.scene import Box

DEFAULT_ALPHA = 0.9996
DEFAULT_GAMMA = 0.6
CUTOUT_PIXEL_DIFF = 40.0 / 255.0
CUTOUT_MAX_RATIO = 0.5


@dataclass
class PseudoLabelSet:
    boxes: List[Box]
    classes: List[int]
    scores: List[float]
    view: Optional[AugRecord] = None

    def __post_init__(self):
        if not len(self.boxes) == len(self.classes) == len(self.scores):
            raise ShapeMismatch("boxes, classes and scores must have equal lengths")

    def __len__(self) -> int:
        return len(self.boxes)

    def subset(self, keep: List[int]) -> "PseudoLabelSet":
        return PseudoLabelSet([self.boxes[k] for k in keep], [self.classes[k] for k in keep],
                              [self.scores[k] for k in keep], self.view)

    def as_labels(self):
        return list(zip(self.boxes, self.classes))


def ema_update(teacher: DetectorParams, student: DetectorParams, alpha: float = DEFAULT_ALPHA) -> None:
    """In place: ``teacher <- alpha * teacher + (1 - alpha) * student``."""
    if not 0.0 <= alpha < 1.0:
        raise ValueError(f"alpha must be in [0, 1), got {alpha}")
    teacher.check_compatible(student)
    for name, t in teacher.items():
        t.data *= alpha
        t.data += (1.0 - alpha) * student[name].data


def pseudo_label(teacher: DetectorParams, img_weak, gamma: float = DEFAULT_GAMMA, nms_iou: float = 0.5,
                 det_cfg: DetectorConfig = DetectorConfig(), view: Optional[AugRecord] = None,
                 max_dets: int = 100) -> PseudoLabelSet:
    """Teacher detections on one weak view with score >= ``gamma``.

    Runs with recording suspended, so the teacher never enters a tape.
    """
    with nx.no_grad():
        _, pred = forward(img_weak, teacher, det_cfg, levels=det_cfg.head_level + 1)
    return labels_from_prediction(pred, gamma, nms_iou, view=view, max_dets=max_dets)


def labels_from_prediction(pred, gamma: float, nms_iou: float = 0.5, image: int = 0,
                           view: Optional[AugRecord] = None, max_dets: int = 100) -> PseudoLabelSet:
    dets = decode(pred, score_thresh=gamma, nms_iou=nms_iou, max_dets=max_dets, image=image)
    return PseudoLabelSet([d.box for d in dets], [d.class_id for d in dets], [d.score for d in dets], view)


def cutout_exclusion(img_teacher_view: np.ndarray, img_student_view: np.ndarray, labels: PseudoLabelSet,
                     student_record: AugRecord, teacher_record: Optional[AugRecord] = None,
                     pixel_thresh: float = CUTOUT_PIXEL_DIFF, max_ratio: float = CUTOUT_MAX_RATIO
                     ) -> PseudoLabelSet:
    """Drop pseudo-labels whose object looks erased in the student's view.

    The teacher view is resampled into student coordinates; inside each
    mapped box, a pixel counts as changed when its largest per-channel
    absolute difference exceeds ``pixel_thresh``. Boxes with a changed-pixel
    ratio above ``max_ratio`` are dropped.
    """
    if len(labels) == 0:
        return labels
    t_rec = teacher_record or labels.view or AugRecord.identity(img_teacher_view.shape[2],
                                                                img_teacher_view.shape[1])
    aligned = resample(img_teacher_view, t_rec, student_record)
    changed = np.abs(aligned - img_student_view).max(axis=0) > pixel_thresh
    h, w = changed.shape
    keep = []
    for k, box in enumerate(labels.boxes):
        sb = student_record.clamp(student_record.box_to_view(t_rec.box_from_view(box)))
        if sb is None:
            # not visible in the student view at all
            continue
        region = changed[_pixel_span(sb[1], sb[3], h), _pixel_span(sb[0], sb[2], w)]
        if region.size and region.mean() > max_ratio:
            continue
        keep.append(k)
    return labels.subset(keep)


def _pixel_span(lo: float, hi: float, size: int) -> slice:
    """Pixels whose centres fall inside ``[lo, hi]``; at least one pixel."""
    a = max(int(np.ceil(lo - 0.5)), 0)
    b = min(int(np.floor(hi - 0.5)), size - 1)
    if b < a:
        a = b = min(max(int(np.floor((lo + hi) / 2)), 0), size - 1)
    return slice(a, b + 1)


def inject_label_noise(labels: PseudoLabelSet, fraction: float, num_classes: int,
                       rng: np.random.Generator) -> PseudoLabelSet:
    """Re-draw the class of ``round(fraction * N)`` labels uniformly over all classes."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"fraction must be in [0, 1], got {fraction}")
    n = len(labels)
    count = int(round(fraction * n))
    if count == 0:
        return labels
    picked = rng.choice(n, size=count, replace=False)
    classes = list(labels.classes)
    for k, c in zip(picked, rng.integers(0, num_classes, size=count)):
        classes[int(k)] = int(c)
    return replace(labels, classes=classes)
