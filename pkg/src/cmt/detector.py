"""Toy anchor-free dense detector.

Backbone: ``k`` stages of conv3x3-relu-conv3x3-relu-maxpool2, exposing every
stage output as a feature map. Head: reads the stride-8 map, two conv3x3
layers, then 1x1 projections to class logits (last channel = background)
and to four edge distances passed through ``exp``.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from . import numerics as nx
from .errors import ShapeMismatch
from .numerics import Tensor
from .synth_data.scene import Box, box_iou

EVAL_SCORE_THRESH = 0.05
EVAL_NMS_IOU = 0.5
EVAL_MAX_DETS = 20


@dataclass(frozen=True)
class DetectorConfig:
    num_classes: int = 3
    widths: Tuple[int, ...] = (16, 32, 64, 64)
    head_width: int = 32
    head_level: int = 2  # index into backbone maps; level 2 has stride 8
    init_gain: float = 2.0

    @property
    def num_levels(self) -> int:
        return len(self.widths)

    @property
    def head_stride(self) -> int:
        return 2 ** (self.head_level + 1)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DetectorConfig":
        d = dict(d)
        d["widths"] = tuple(d.get("widths", cls.widths))
        return cls(**d)


class DetectorParams:
    """Named weight tensors of one detector (student or teacher)."""

    def __init__(self, tensors: Dict[str, Tensor]):
        self.tensors = dict(tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def names(self) -> List[str]:
        return list(self.tensors)

    def shapes(self) -> Dict[str, Tuple[int, ...]]:
        return {k: v.shape for k, v in self.tensors.items()}

    def copy(self, requires_grad: Optional[bool] = None) -> "DetectorParams":
        return DetectorParams({
            k: Tensor(v.data.copy(), requires_grad=v.requires_grad if requires_grad is None else requires_grad,
                      name=k)
            for k, v in self.tensors.items()})

    def replace(self, name: str, value: Tensor) -> "DetectorParams":
        tensors = dict(self.tensors)
        tensors[name] = value
        return DetectorParams(tensors)

    def check_compatible(self, other: "DetectorParams") -> None:
        if self.shapes() != other.shapes():
            raise ShapeMismatch("detector parameter sets differ in names or shapes")

    def distance(self, other: "DetectorParams") -> float:
        """Euclidean norm of the flattened difference."""
        self.check_compatible(other)
        return float(np.sqrt(sum(np.sum((self[k].data - other[k].data) ** 2) for k in self)))

    def max_abs_diff(self, other: "DetectorParams") -> float:
        self.check_compatible(other)
        return float(max(np.max(np.abs(self[k].data - other[k].data)) for k in self))

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def all_finite(self) -> bool:
        return all(np.isfinite(t.data).all() for t in self.tensors.values())

    def to_json(self) -> dict:
        return {k: {"shape": list(v.shape), "data": v.data.reshape(-1).tolist()} for k, v in self.tensors.items()}

    @classmethod
    def from_json(cls, d: dict, requires_grad: bool = False) -> "DetectorParams":
        return cls({k: Tensor(np.asarray(v["data"], dtype=np.float64).reshape(v["shape"]),
                              requires_grad=requires_grad, name=k) for k, v in d.items()})

    def equals(self, other: "DetectorParams") -> bool:
        return self.names() == other.names() and all(
            np.array_equal(self[k].data, other[k].data) for k in self)




def init_params(cfg: DetectorConfig, seed: int, gain: Optional[float] = None) -> DetectorParams:
    """Uniform ``[-s, s]`` weights with ``s = sqrt(gain / fan_in)``; zero biases."""
    gain = cfg.init_gain if gain is None else gain
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xDE7]))
    tensors: Dict[str, Tensor] = {}

    def conv(name, cout, cin, k):
        s = np.sqrt(gain / (cin * k * k))
        tensors[f"{name}.w"] = Tensor(rng.uniform(-s, s, (cout, cin, k, k)), True, f"{name}.w")
        tensors[f"{name}.b"] = Tensor(np.zeros(cout), True, f"{name}.b")

    cin = 3
    for j, width in enumerate(cfg.widths):
        conv(f"backbone.{j}.conv1", width, cin, 3)
        conv(f"backbone.{j}.conv2", width, width, 3)
        cin = width
    head_in = cfg.widths[cfg.head_level]
    conv("head.conv1", cfg.head_width, head_in, 3)
    conv("head.conv2", cfg.head_width, cfg.head_width, 3)
    conv("head.cls", cfg.num_classes + 1, cfg.head_width, 1)
    conv("head.box", 4, cfg.head_width, 1)
    return DetectorParams(tensors)


def zero_params(cfg: DetectorConfig) -> DetectorParams:
    p = init_params(cfg, 0)
    for t in p.tensors.values():
        t.data[...] = 0.0
    return p


@dataclass
class BackboneFeatures:
    maps: List[Tensor]  # each (N, C_j, H_j, W_j) or (C_j, H_j, W_j)
    strides: List[int]

    def level(self, j: int, image: Optional[int] = None) -> Tensor:
        m = self.maps[j]
        return m if image is None else nx.index(m, image)


@dataclass
class DensePrediction:
    logits: Tensor   # (N, C+1, Hp, Wp) or (C+1, Hp, Wp)
    offsets: Tensor  # (N, 4, Hp, Wp) or (4, Hp, Wp), pixels, positive
    stride: int

    @property
    def num_classes(self) -> int:
        return self.logits.shape[-3] - 1


@dataclass
class Detection:
    box: Box
    class_id: int
    score: float


def forward_backbone(img, params: DetectorParams, cfg: DetectorConfig,
                     levels: Optional[int] = None) -> BackboneFeatures:
    """Feature maps of the first ``levels`` stages (all stages by default)."""
    x = nx.as_tensor(img)
    if x.shape[-3] != 3:
        raise ShapeMismatch(f"expected 3 input channels, got shape {x.shape}")
    h, w = x.shape[-2:]
    if h % 2 ** cfg.num_levels or w % 2 ** cfg.num_levels:
        raise ShapeMismatch(f"image {h}x{w} not divisible by 2^{cfg.num_levels}")
    levels = cfg.num_levels if levels is None else levels
    maps, strides = [], []
    for j in range(levels):
        x = nx.relu(nx.conv2d(x, params[f"backbone.{j}.conv1.w"], params[f"backbone.{j}.conv1.b"], 1, 1))
        x = nx.relu(nx.conv2d(x, params[f"backbone.{j}.conv2.w"], params[f"backbone.{j}.conv2.b"], 1, 1))
        x = nx.max_pool2d(x, 2)
        maps.append(x)
        strides.append(2 ** (j + 1))
    return BackboneFeatures(maps, strides)


def forward_head(features: BackboneFeatures, params: DetectorParams, cfg: DetectorConfig) -> DensePrediction:
    if len(features.maps) <= cfg.head_level:
        raise ShapeMismatch(f"head needs backbone level {cfg.head_level}")
    x = features.maps[cfg.head_level]
    x = nx.relu(nx.conv2d(x, params["head.conv1.w"], params["head.conv1.b"], 1, 1))
    x = nx.relu(nx.conv2d(x, params["head.conv2.w"], params["head.conv2.b"], 1, 1))
    logits = nx.conv2d(x, params["head.cls.w"], params["head.cls.b"])
    offsets = nx.exp(nx.conv2d(x, params["head.box.w"], params["head.box.b"]))
    return DensePrediction(logits, offsets, features.strides[cfg.head_level])


def forward(img, params: DetectorParams, cfg: DetectorConfig, levels: Optional[int] = None):
    feats = forward_backbone(img, params, cfg, levels=max(levels or cfg.num_levels, cfg.head_level + 1))
    return feats, forward_head(feats, params, cfg)


def image_prediction(pred: DensePrediction, i: int) -> Tuple[np.ndarray, np.ndarray]:
    """Raw (logits, offsets) arrays of image ``i`` of a batched prediction."""
    if pred.logits.ndim == 3:
        return pred.logits.data, pred.offsets.data
    return pred.logits.data[i], pred.offsets.data[i]


# ------------------------------------------------------------------ decoding

def softmax(logits: np.ndarray, axis: int = 0) -> np.ndarray:
    e = np.exp(logits - logits.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def cell_centres(hp: int, wp: int, stride: int) -> Tuple[np.ndarray, np.ndarray]:
    ys, xs = np.mgrid[0:hp, 0:wp]
    return (xs + 0.5) * stride, (ys + 0.5) * stride


def nms(boxes: Sequence[Box], scores: Sequence[float], iou_thresh: float,
        order: Optional[Sequence[int]] = None) -> List[int]:
    """Greedy NMS over candidates already sorted in ``order`` (default: by score desc, stable)."""
    if order is None:
        order = sorted(range(len(boxes)), key=lambda k: -scores[k])
    keep: List[int] = []
    for k in order:
        if all(box_iou(boxes[k], boxes[j]) <= iou_thresh for j in keep):
            keep.append(k)
    return keep


def decode(pred: DensePrediction, score_thresh: float = EVAL_SCORE_THRESH, nms_iou: float = EVAL_NMS_IOU,
           max_dets: int = EVAL_MAX_DETS, image: int = 0, image_size: Optional[Tuple[int, int]] = None
           ) -> List[Detection]:
    """Detections of one image; ``image`` selects from a batched prediction."""
    logits, offsets = image_prediction(pred, image)
    c1, hp, wp = logits.shape
    bg = c1 - 1
    probs = softmax(logits, axis=0)
    cls = probs.argmax(axis=0)
    score = np.take_along_axis(probs, cls[None], axis=0)[0]
    cx, cy = cell_centres(hp, wp, pred.stride)
    h_img, w_img = image_size or (hp * pred.stride, wp * pred.stride)
    x1 = np.clip(cx - offsets[0], 0, w_img)
    y1 = np.clip(cy - offsets[1], 0, h_img)
    x2 = np.clip(cx + offsets[2], 0, w_img)
    y2 = np.clip(cy + offsets[3], 0, h_img)
    cand = [k for k in range(hp * wp)
            if cls.flat[k] != bg and score.flat[k] >= score_thresh
            and x2.flat[k] > x1.flat[k] and y2.flat[k] > y1.flat[k]]
    # score descending, then row-major cell index ascending
    cand.sort(key=lambda k: (-score.flat[k], k))
    boxes = {k: (float(x1.flat[k]), float(y1.flat[k]), float(x2.flat[k]), float(y2.flat[k])) for k in cand}
    kept: List[int] = []
    for k in cand:
        if all(cls.flat[j] != cls.flat[k] or box_iou(boxes[k], boxes[j]) <= nms_iou for j in kept):
            kept.append(k)
            if len(kept) == max_dets:
                break
    return [Detection(boxes[k], int(cls.flat[k]), float(score.flat[k])) for k in kept]


# -------------------------------------------------------------------- losses

def assign_targets(labels: Sequence[Tuple[Box, int]], hp: int, wp: int, stride: int, num_classes: int):
    """Per-cell class targets (background = ``num_classes``), edge distances and positive mask.

    A cell is positive for the smallest-area box that strictly contains its centre.
    """
    cls = np.full((hp, wp), num_classes, dtype=np.int64)
    dist = np.zeros((4, hp, wp))
    best_area = np.full((hp, wp), np.inf)
    cx, cy = cell_centres(hp, wp, stride)
    for box, class_id in labels:
        x1, y1, x2, y2 = box
        inside = (cx > x1) & (cx < x2) & (cy > y1) & (cy < y2)
        area = (x2 - x1) * (y2 - y1)
        take = inside & (area < best_area)
        best_area[take] = area
        cls[take] = class_id
        dist[0][take] = (cx - x1)[take]
        dist[1][take] = (cy - y1)[take]
        dist[2][take] = (x2 - cx)[take]
        dist[3][take] = (y2 - cy)[take]
    return cls, dist, cls != num_classes


def detection_loss(pred: DensePrediction, labels) -> Tensor:
    ce, reg = detection_loss_terms(pred, labels)
    return ce if reg is None else nx.add(ce, reg)


def detection_loss_terms(pred: DensePrediction, labels):
    """Mean cross-entropy over all cells plus mean smooth-L1 over offset
    channels of positive cells, weighted 1:1. Returns ``(ce, reg)``; ``reg``
    is None when no cell is positive.

    ``labels`` is a list of ``(box, class_id)`` for an unbatched prediction,
    or one such list per image for a batched one. Offsets enter the
    regression term divided by the head stride.
    """
    batched = pred.logits.ndim == 4
    per_image = labels if batched else [labels]
    logits = pred.logits if batched else nx.reshape(pred.logits, (1,) + pred.logits.shape)
    offsets = pred.offsets if batched else nx.reshape(pred.offsets, (1,) + pred.offsets.shape)
    n, c1, hp, wp = logits.shape
    if len(per_image) != n:
        raise ShapeMismatch(f"{len(per_image)} label lists for {n} images")
    onehot = np.zeros((n, c1, hp, wp))
    dist = np.zeros((n, 4, hp, wp))
    pos = np.zeros((n, 1, hp, wp))
    for i, lab in enumerate(per_image):
        cls, d, p = assign_targets(lab, hp, wp, pred.stride, c1 - 1)
        np.put_along_axis(onehot[i], cls[None], 1.0, axis=0)
        dist[i] = d
        pos[i, 0] = p
    logp = nx.log_softmax(logits, axis=1)
    ce = nx.mul(nx.sum(nx.mul(logp, onehot)), -1.0 / (n * hp * wp))
    npos = int(pos.sum())
    if npos == 0:
        return ce, None
    scale = 1.0 / pred.stride
    pred_off = nx.mul(offsets, pos * scale)
    reg = nx.sum(nx.smooth_l1(pred_off, dist * pos * scale))
    return ce, nx.mul(reg, 1.0 / (4 * npos))


# --------------------------------------------------------------- checkpoints

def save_checkpoint(path, student: DetectorParams, teacher: DetectorParams, det_cfg: DetectorConfig,
                    train_config: Optional[dict] = None, extra: Optional[dict] = None) -> None:
    payload = {
        "format": "cmt-checkpoint/1",
        "detector_config": det_cfg.to_dict(),
        "train_config": train_config or {},
        "student": student.to_json(),
        "teacher": teacher.to_json(),
    }
    if extra:
        payload.update(extra)
    Path(path).write_text(json.dumps(payload))


def load_checkpoint(path):
    """Returns ``(student, teacher, detector_config, train_config)``."""
    payload = json.loads(Path(path).read_text())
    return (DetectorParams.from_json(payload["student"]), DetectorParams.from_json(payload["teacher"]),
            DetectorConfig.from_dict(payload["detector_config"]), payload.get("train_config", {}))
