"""VOC-style detection metrics: IoU, greedy matching, all-point AP, mAP@0.5.

This is the only module allowed to open target-domain ground truth.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import numerics as nx
from .detector import (EVAL_MAX_DETS, EVAL_NMS_IOU, EVAL_SCORE_THRESH, DetectorConfig, DetectorParams,
                       Detection, decode, forward)
from .errors import DegenerateBox
from .synth_data.dataset import SealedAnnotations, Split
from .synth_data.scene import Box, SceneObject

IOU_THRESH = 0.5
INTERPOLATION = "all-point"


def iou(a: Box, b: Box) -> float:
    for box in (a, b):
        if not (box[2] > box[0] and box[3] > box[1]):
            raise DegenerateBox(f"box {box} has non-positive extent")
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union


def match_detections(dets: Sequence[Box], gts: Sequence[Box], iou_thresh: float = IOU_THRESH) -> List[bool]:
    """TP flags for score-sorted detections of one class in one image.

    Each detection takes the highest-IoU ground truth still unmatched,
    provided that IoU reaches ``iou_thresh``.
    """
    used = [False] * len(gts)
    flags = []
    for d in dets:
        best, best_iou = -1, iou_thresh
        for g, gt in enumerate(gts):
            if used[g]:
                continue
            v = iou(d, gt)
            if v >= best_iou and (best < 0 or v > best_iou):
                best, best_iou = g, v
        if best >= 0:
            used[best] = True
        flags.append(best >= 0)
    return flags


def average_precision(flags: Sequence[bool], scores: Sequence[float], num_gt: int) -> float:
    """Area under the right-max interpolated precision/recall curve."""
    if num_gt == 0:
        return 0.0
    if len(flags) == 0:
        return 0.0
    order = sorted(range(len(scores)), key=lambda k: -scores[k])  # stable: ties keep input order
    tp = np.cumsum([1.0 if flags[k] else 0.0 for k in order])
    fp = np.cumsum([0.0 if flags[k] else 1.0 for k in order])
    recall = tp / num_gt
    precision = tp / np.maximum(tp + fp, np.finfo(np.float64).eps)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(mpre.size - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


@dataclass
class EvalResult:
    per_class_ap: Dict[int, float]
    map50: float
    counts: Dict[int, Dict[str, int]]
    interpolation: str = INTERPOLATION
    iou_thresh: float = IOU_THRESH

    def to_json(self) -> dict:
        return {
            "map50": self.map50,
            "per_class_ap": {str(k): v for k, v in self.per_class_ap.items()},
            "counts": {str(k): v for k, v in self.counts.items()},
            "interpolation": self.interpolation,
            "iou_thresh": self.iou_thresh,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True)


def evaluate_detections(detections: Sequence[Sequence[Detection]], ground_truth: Sequence[Sequence[SceneObject]],
                        num_classes: int, iou_thresh: float = IOU_THRESH) -> EvalResult:
    """mAP over a dataset from per-image detections and ground truth."""
    flags: Dict[int, List[bool]] = {c: [] for c in range(num_classes)}
    scores: Dict[int, List[float]] = {c: [] for c in range(num_classes)}
    num_gt = {c: 0 for c in range(num_classes)}
    for dets, gts in zip(detections, ground_truth):
        for c in range(num_classes):
            g = [o.box for o in gts if o.class_id == c]
            num_gt[c] += len(g)
            d = sorted((x for x in dets if x.class_id == c), key=lambda x: -x.score)
            flags[c].extend(match_detections([x.box for x in d], g, iou_thresh))
            scores[c].extend(x.score for x in d)
    per_class, counts = {}, {}
    for c in range(num_classes):
        per_class[c] = average_precision(flags[c], scores[c], num_gt[c])
        tp = int(sum(flags[c]))
        counts[c] = {"tp": tp, "fp": len(flags[c]) - tp, "fn": num_gt[c] - tp, "num_gt": num_gt[c]}
    present = [c for c in range(num_classes) if num_gt[c] > 0]
    map50 = float(np.mean([per_class[c] for c in present])) if present else 0.0
    return EvalResult(per_class, map50, counts, iou_thresh=iou_thresh)


def target_annotations(split: Split) -> List[List[SceneObject]]:
    """Ground truth of ``split`` in id order, unsealing target annotations."""
    ann = split.annotations.unseal() if isinstance(split.annotations, SealedAnnotations) else split.annotations
    return [ann[i] for i in split.ids]


def predict(model: DetectorParams, images: np.ndarray, det_cfg: DetectorConfig, batch_size: int = 25,
            score_thresh: float = EVAL_SCORE_THRESH, nms_iou: float = EVAL_NMS_IOU,
            max_dets: int = EVAL_MAX_DETS) -> List[List[Detection]]:
    out: List[List[Detection]] = []
    h, w = images.shape[-2:]
    with nx.no_grad():
        for start in range(0, len(images), batch_size):
            chunk = images[start:start + batch_size]
            _, pred = forward(chunk, model, det_cfg, levels=det_cfg.head_level + 1)
            for i in range(len(chunk)):
                out.append(decode(pred, score_thresh, nms_iou, max_dets, image=i, image_size=(h, w)))
    return out


def evaluate(model: DetectorParams, split: Split, det_cfg: DetectorConfig,
             detections: Optional[Sequence[Sequence[Detection]]] = None) -> EvalResult:
    """Decode ``model`` on ``split`` with evaluation thresholds and score mAP@0.5."""
    if detections is None:
        detections = predict(model, split.images, det_cfg)
    return evaluate_detections(detections, target_annotations(split), det_cfg.num_classes)


def dump_detections(split: Split, detections: Sequence[Sequence[Detection]], out_dir, scale: int = 4) -> None:
    """Write PNG copies of the split's images with detections drawn in."""
    from pathlib import Path

    from PIL import Image, ImageDraw

    from .synth_data.scene import CLASS_COLORS

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for sid, img, dets in zip(split.ids, split.images, detections):
        arr = np.round(np.clip(img, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
        im = Image.fromarray(arr, mode="RGB").resize((arr.shape[1] * scale, arr.shape[0] * scale), Image.NEAREST)
        draw = ImageDraw.Draw(im)
        for d in dets:
            color = tuple(int(255 * v) for v in CLASS_COLORS[d.class_id % len(CLASS_COLORS)])
            draw.rectangle([v * scale for v in d.box], outline=color, width=2)
            draw.text((d.box[0] * scale + 2, d.box[1] * scale + 1), f"{d.score:.2f}", fill=color)
        im.save(out / f"{sid:05d}.png")
