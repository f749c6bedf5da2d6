"""Object-level contrastive learning between student and teacher features.

Pseudo-label boxes pool RoI features from matching backbone levels of both
models; the class-based loss treats every object with the same predicted
class as a positive. A batch-local MoCo-style loss is kept as a reference.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import numerics as nx
from .errors import BoxOutsideView, EmptyBatch, ShapeMismatch
from .numerics import Tensor
from .synth_data.augment import AugRecord, transform_box
from .synth_data.scene import Box

DEFAULT_TAU = 0.07
DEFAULT_LAMBDA = 0.05
ROI_OUT_SIZE = (3, 3)


@dataclass
class ObjectFeature:
    vec: Tensor
    object_index: int
    level: int
    source: str  # "student" | "teacher"


def positive_sets(classes: Sequence[int]) -> List[List[int]]:
    """``P(i)``: indices of every object sharing object i's class, i included."""
    if len(classes) == 0:
        raise EmptyBatch("positive_sets needs at least one class")
    by_class: Dict[int, List[int]] = {}
    for i, c in enumerate(classes):
        by_class.setdefault(int(c), []).append(i)
    return [by_class[int(c)] for c in classes]


def positive_weights(classes: Sequence[int]) -> np.ndarray:
    """Row-normalised positive mask: ``M[i, p] = 1/|P(i)|`` for p in P(i)."""
    c = np.asarray(classes)
    mask = (c[:, None] == c[None, :]).astype(np.float64)
    return mask / mask.sum(axis=1, keepdims=True)


def _stack(vectors) -> Tensor:
    if isinstance(vectors, Tensor):
        return vectors
    vectors = list(vectors)
    if vectors and isinstance(vectors[0], ObjectFeature):
        vectors = [v.vec for v in vectors]
    if vectors and all(isinstance(v, Tensor) for v in vectors):
        return nx.stack(vectors)
    return Tensor(np.asarray(vectors, dtype=np.float64))


def contrastive_loss(zS, zT, classes: Sequence[int], tau: float = DEFAULT_TAU,
                     lam: float = DEFAULT_LAMBDA) -> Tensor:
    """Class-based contrastive loss between student and teacher object features.

    ``zS`` and ``zT`` hold N unit vectors each (a (N, d) Tensor or a list).
    Teacher features are detached; gradients reach ``zS`` only.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    zs = _stack(zS)
    zt = _stack(zT)
    n = zs.shape[0] if zs.ndim else 0
    if n == 0:
        raise EmptyBatch("contrastive loss needs at least one object")
    if zt.shape != zs.shape or len(classes) != n:
        raise ShapeMismatch(f"student {zs.shape}, teacher {zt.shape}, {len(classes)} classes")
    sim = nx.mul(nx.matmul(zs, Tensor(zt.data.T)), 1.0 / tau)
    logp = nx.log_softmax(sim, axis=1)  # max-shifted log-sum-exp
    per_object = nx.sum(nx.mul(logp, positive_weights(classes)), axis=1)
    return nx.mul(nx.sum(per_object), -lam / n)


def moco_loss(zQ, zK, tau: float = DEFAULT_TAU) -> Tensor:
    """Batch-local InfoNCE: the other keys in the batch are the negatives."""
    zq = _stack(zQ)
    zk = _stack(zK)
    n = zq.shape[0] if zq.ndim else 0
    if n < 2:
        raise EmptyBatch("moco loss needs at least two samples")
    if zk.shape != zq.shape:
        raise ShapeMismatch(f"query {zq.shape} vs key {zk.shape}")
    sim = nx.mul(nx.matmul(zq, Tensor(zk.data.T)), 1.0 / tau)
    logp = nx.log_softmax(sim, axis=1)
    return nx.mul(nx.sum(nx.mul(logp, np.eye(n))), -1.0 / n)


def feature_box(box: Box, stride: int) -> Box:
    return tuple(v / stride for v in box)


def min_cell_ok(box: Box, stride: int) -> bool:
    """A box must span at least one feature cell in both directions."""
    return (box[2] - box[0]) >= stride and (box[3] - box[1]) >= stride


def extract_object_features(F: Tensor, boxes: Sequence[Box], view: AugRecord, target_view: AugRecord,
                            stride: int, out_size=ROI_OUT_SIZE, level: int = 0, source: str = "student",
                            skip_small: bool = False) -> Tuple[Tensor, List[int]]:
    """Pool, flatten and L2-normalise each box's features.

    Boxes are given in ``view`` coordinates and pooled from ``F`` (C, H, W),
    which lives in ``target_view``. Returns an (n, d) Tensor of unit rows
    and the indices of the boxes that produced them; boxes that map outside
    ``target_view`` or degenerate are left out.
    """
    mapped, kept = [], []
    for k, box in enumerate(boxes):
        try:
            b = transform_box(box, view, target_view)
        except BoxOutsideView:
            continue
        if skip_small and not min_cell_ok(b, stride):
            continue
        fb = feature_box(b, stride)
        if fb[2] - fb[0] <= 0 or fb[3] - fb[1] <= 0:
            continue
        mapped.append(fb)
        kept.append(k)
    if not kept:
        return Tensor(np.zeros((0, 0))), []
    pooled = nx.roi_align_many(F, mapped, out_size)
    flat = nx.reshape(pooled, (len(kept), -1))
    return nx.l2_normalize(flat), kept


def object_features(F: Tensor, boxes: Sequence[Box], view: AugRecord, target_view: AugRecord, stride: int,
                    out_size=ROI_OUT_SIZE, level: int = 0, source: str = "student") -> List[ObjectFeature]:
    """Per-object wrapper of :func:`extract_object_features`."""
    z, kept = extract_object_features(F, boxes, view, target_view, stride, out_size)
    return [ObjectFeature(nx.index(z, r), k, level, source) for r, k in enumerate(kept)]


def _valid_objects(boxes, view_t: AugRecord, view_s: AugRecord, stride: int) -> List[int]:
    """Objects usable at one level: visible in both views and at least one cell wide in each."""
    ok = []
    for k, box in enumerate(boxes):
        try:
            bt = transform_box(box, view_t, view_t)
            bs = transform_box(box, view_t, view_s)
        except BoxOutsideView:
            continue
        if min_cell_ok(bt, stride) and min_cell_ok(bs, stride):
            ok.append(k)
    return ok


def multi_scale_contrastive(featS, featT, labels, recS, recT, levels: Sequence[int],
                            tau: float = DEFAULT_TAU, lam: float = DEFAULT_LAMBDA,
                            class_based: bool = True, out_size=ROI_OUT_SIZE,
                            trace: Optional[dict] = None) -> Tensor:
    """Sum over ``levels`` of the contrastive loss over all objects in the batch.

    ``featS``/``featT`` are :class:`BackboneFeatures` of batched views and
    ``labels``/``recS``/``recT`` hold one PseudoLabelSet / AugRecord per
    image (a single image may be passed unwrapped). Pseudo-label boxes are in
    teacher-view coordinates. With ``class_based=False`` every object gets
    its own class (plain instance discrimination).
    """
    if not isinstance(labels, (list, tuple)):
        labels, recS, recT = [labels], [recS], [recT]
    total: Optional[Tensor] = None
    used_levels = []
    for level in levels:
        stride = featS.strides[level]
        zs_parts, zt_parts, classes = [], [], []
        offset = 0
        for i, (lab, rs, rt) in enumerate(zip(labels, recS, recT)):
            ok = _valid_objects(lab.boxes, rt, rs, stride)
            if ok:
                boxes = [lab.boxes[k] for k in ok]
                FS = _image_map(featS.maps[level], i)
                FT = _image_map(featT.maps[level], i)
                zs, ks = extract_object_features(FS, boxes, rt, rs, stride, out_size)
                with nx.no_grad():
                    zt, kt = extract_object_features(FT, boxes, rt, rt, stride, out_size)
                assert ks == kt == list(range(len(boxes)))
                zs_parts.append(zs)
                zt_parts.append(zt.data)
                if class_based:
                    classes.extend(lab.classes[k] for k in ok)
                else:
                    classes.extend(range(offset, offset + len(ok)))
            offset += len(lab.boxes)
        if not classes:
            continue
        zs_all = zs_parts[0] if len(zs_parts) == 1 else nx.concat(zs_parts, axis=0)
        loss = contrastive_loss(zs_all, Tensor(np.concatenate(zt_parts, axis=0)), classes, tau, lam)
        total = loss if total is None else nx.add(total, loss)
        used_levels.append((level, len(classes)))
    if trace is not None:
        trace["levels"] = used_levels
        trace["class_based"] = class_based
    if total is None:
        raise EmptyBatch("no pseudo-label yields a usable object at any level")
    return total


def _image_map(m: Tensor, i: int) -> Tensor:
    return m if m.ndim == 3 else nx.index(m, i)
