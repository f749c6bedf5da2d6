"""Contrastive mean-teacher training loop and experiment drivers."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import numerics as nx
from .contrastive import multi_scale_contrastive
from .detector import (BackboneFeatures, DensePrediction, DetectorConfig, DetectorParams, detection_loss_terms,
                       forward, init_params, save_checkpoint)
from .errors import BoxOutsideView, ConfigInvalid, EmptyBatch, TrainingDiverged
from .evaluation import evaluate
from .mean_teacher import (PseudoLabelSet, cutout_exclusion, ema_update, inject_label_noise,
                           labels_from_prediction)
from .numerics import GradTape, Tensor
from .synth_data.augment import StrongAugConfig, apply_weak, student_view, transform_box
from .synth_data.dataset import SyntheticDataset, training_guard

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    alpha: float = 0.99
    tau: float = 0.07
    lambda_contrast: float = 0.05
    lambda_unsup_det: float = 1.0
    lambda_sup_det: float = 1.0
    gamma: float = 0.6
    lr: float = 0.01
    momentum: float = 0.9
    burn_in_iters: int = 1600
    max_iters: int = 600
    batch_size: int = 4
    eval_interval: int = 200
    feature_levels: List[int] = field(default_factory=lambda: [0, 1, 2, 3])
    noise_fraction: float = 0.0
    class_based_contrast: bool = True
    multi_scale: bool = True
    contrastive_enabled: bool = True
    cutout_exclusion: bool = True
    pseudo_nms_iou: float = 0.5
    seed: int = 0
    num_classes: int = 3
    widths: List[int] = field(default_factory=lambda: [16, 32, 64, 64])
    head_width: int = 32
    init_gain: float = 2.0
    max_cutouts: int = 2
    cutout_min: float = 24.0
    cutout_max: float = 40.0

    def __post_init__(self):
        self.feature_levels = [int(v) for v in self.feature_levels]
        self.widths = [int(v) for v in self.widths]
        self.validate()

    def validate(self) -> None:
        if not 0.0 <= self.alpha < 1.0:
            raise ConfigInvalid("alpha must be in [0, 1)")
        if self.tau <= 0 or self.lr <= 0:
            raise ConfigInvalid("tau and lr must be positive")
        if min(self.lambda_contrast, self.lambda_unsup_det, self.lambda_sup_det) < 0:
            raise ConfigInvalid("loss weights must be non-negative")
        if not 0.0 <= self.noise_fraction <= 1.0 or not 0.0 < self.gamma < 1.0:
            raise ConfigInvalid("noise_fraction must be in [0, 1] and gamma in (0, 1)")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigInvalid("momentum must be in [0, 1)")
        if self.batch_size < 1 or self.burn_in_iters < 0 or self.max_iters < 0 or self.eval_interval < 1:
            raise ConfigInvalid("batch_size/eval_interval must be >= 1 and iteration counts >= 0")
        if not self.feature_levels or any(not 0 <= j < len(self.widths) for j in self.feature_levels):
            raise ConfigInvalid(f"feature_levels {self.feature_levels} outside backbone of {len(self.widths)}")

    @property
    def detector(self) -> DetectorConfig:
        return DetectorConfig(num_classes=self.num_classes, widths=tuple(self.widths),
                              head_width=self.head_width, init_gain=self.init_gain)

    @property
    def strong_aug(self) -> StrongAugConfig:
        return StrongAugConfig(max_cutouts=self.max_cutouts, cutout_size=(self.cutout_min, self.cutout_max))

    def active_levels(self) -> List[int]:
        levels = sorted(set(self.feature_levels))
        return levels if self.multi_scale else levels[:1]

    def contrast_active(self) -> bool:
        return self.contrastive_enabled and self.lambda_contrast > 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigInvalid(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def burn_in_key(self) -> tuple:
        return (self.seed, self.burn_in_iters, self.batch_size, self.lr, self.momentum, self.lambda_sup_det,
                self.num_classes, tuple(self.widths), self.head_width, self.init_gain, self.max_cutouts,
                self.cutout_min, self.cutout_max)


class MetricLog:
    """Append-only list of iteration and evaluation records."""

    def __init__(self, records: Optional[List[dict]] = None):
        self._records: List[dict] = list(records or [])

    def append(self, record: dict) -> None:
        self._records.append(dict(record))

    @property
    def records(self) -> Tuple[dict, ...]:
        return tuple(self._records)

    def iterations(self) -> List[dict]:
        return [r for r in self._records if r.get("kind") == "iter"]

    def evals(self) -> List[dict]:
        return [r for r in self._records if r.get("kind") == "eval"]

    def __len__(self) -> int:
        return len(self._records)

    def __eq__(self, other) -> bool:
        return isinstance(other, MetricLog) and self.to_jsonl() == other.to_jsonl()

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self._records)

    def write(self, path) -> None:
        Path(path).write_text(self.to_jsonl())

    @classmethod
    def read(cls, path) -> "MetricLog":
        return cls([json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()])


@dataclass
class TrainState:
    student: DetectorParams
    teacher: DetectorParams
    velocity: Dict[str, np.ndarray]
    rng: np.random.Generator
    iteration: int = 0


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), stream]))


def sgd_step(params: DetectorParams, velocity: Dict[str, np.ndarray], lr: float, momentum: float) -> None:
    """``v <- momentum * v + grad ; theta <- theta - lr * v`` for every tensor with a gradient."""
    for name, t in params.items():
        if t.grad is None:
            continue
        v = velocity.get(name)
        v = t.grad.copy() if v is None else momentum * v + t.grad
        velocity[name] = v
        t.data -= lr * v


def _labeled_batch(ds: SyntheticDataset, idx, rng, cfg: TrainConfig):
    src = ds.source_train
    imgs, labels = [], []
    for i in idx:
        objs = src.objects(int(i))
        img, boxes, rec = student_view(src.images[int(i)], [o.box for o in objs], rng, strong=cfg.strong_aug)
        kept = [k for k in range(len(objs)) if k not in rec.dropped]
        imgs.append(img)
        labels.append([(b, objs[k].class_id) for b, k in zip(boxes, kept)])
    return np.stack(imgs), labels


def _check_finite(value: float, what: str, iteration: int) -> None:
    if not math.isfinite(value):
        raise TrainingDiverged(f"non-finite {what} at iteration {iteration}")


def burn_in(student: DetectorParams, ds: SyntheticDataset, cfg: TrainConfig,
            log_fn: Optional[Callable[[dict], None]] = None) -> Tuple[DetectorParams, Dict[str, np.ndarray]]:
    """Supervised-only SGD on labeled source scenes, in place on ``student``.

    Returns the student and the optimizer state; the caller copies the
    student into the teacher.
    """
    rng = _rng(cfg.seed, 1)
    velocity: Dict[str, np.ndarray] = {}
    det = cfg.detector
    n = len(ds.source_train)
    for it in range(cfg.burn_in_iters):
        idx = rng.choice(n, size=min(cfg.batch_size, n), replace=False)
        imgs, labels = _labeled_batch(ds, idx, rng, cfg)
        with GradTape() as tape:
            _, pred = forward(imgs, student, det, levels=det.head_level + 1)
            ce, reg = detection_loss_terms(pred, labels)
            loss = ce if reg is None else nx.add(ce, reg)
            loss = nx.mul(loss, cfg.lambda_sup_det)
        value = loss.item()
        _check_finite(value, "burn-in loss", it)
        student.zero_grad()
        tape.backward(loss)
        sgd_step(student, velocity, cfg.lr, cfg.momentum)
        if log_fn is not None:
            log_fn({"kind": "burn_in", "iter": it, "L_sup_det": value})
    student.zero_grad()
    return student, velocity


def _slice_features(feats: BackboneFeatures, sl: slice) -> BackboneFeatures:
    return BackboneFeatures([nx.index(m, sl) for m in feats.maps], feats.strides)


def _slice_prediction(pred: DensePrediction, sl: slice) -> DensePrediction:
    return DensePrediction(nx.index(pred.logits, sl), nx.index(pred.offsets, sl), pred.stride)


def train_step(state: TrainState, ds: SyntheticDataset, labeled_idx, unlabeled_idx, cfg: TrainConfig,
               force_contrast: bool = False, trace: Optional[dict] = None) -> dict:
    """One adaptation iteration; returns the metric record.

    ``force_contrast`` evaluates the contrastive branch even when its weight
    is zero (used to check that a zero weight leaves the trajectory intact).
    """
    det = cfg.detector
    rng = state.rng
    state.iteration += 1
    it = state.iteration

    # 1. load and augment: strong views for the student, weak views for the teacher
    lab_imgs, lab_labels = _labeled_batch(ds, labeled_idx, rng, cfg)
    tgt = ds.target_train
    weak_imgs, weak_recs, strong_imgs, strong_recs = [], [], [], []
    for i in unlabeled_idx:
        img = tgt.images[int(i)]
        wi, _, wr = apply_weak(img, [], rng)
        si, _, sr = student_view(img, [], rng, strong=cfg.strong_aug)
        weak_imgs.append(wi)
        weak_recs.append(wr)
        strong_imgs.append(si)
        strong_recs.append(sr)
    weak_imgs = np.stack(weak_imgs)
    strong_imgs = np.stack(strong_imgs)

    # 2. EMA teacher update
    ema_update(state.teacher, state.student, cfg.alpha)

    # 3. pseudo-labels from the teacher's weak views (no tape)
    use_contrast = cfg.contrast_active() or (force_contrast and cfg.contrastive_enabled)
    levels = cfg.active_levels()
    n_feat = max(max(levels) + 1, det.head_level + 1) if use_contrast else det.head_level + 1
    with nx.no_grad():
        feats_t, pred_t = forward(weak_imgs, state.teacher, det, levels=n_feat)
    pseudo: List[PseudoLabelSet] = []
    for k in range(len(unlabeled_idx)):
        lab = labels_from_prediction(pred_t, cfg.gamma, cfg.pseudo_nms_iou, image=k, view=weak_recs[k])
        if cfg.noise_fraction > 0:
            lab = inject_label_noise(lab, cfg.noise_fraction, cfg.num_classes, rng)
        pseudo.append(lab)
    num_pseudo = sum(len(p) for p in pseudo)

    # 4. student forward on labeled + unlabeled strong views; its maps double as contrastive features
    n_lab = len(lab_imgs)
    batch = np.concatenate([lab_imgs, strong_imgs], axis=0)
    with GradTape() as tape:
        feats_s, pred_s = forward(batch, state.student, det, levels=n_feat)
        pred_lab = _slice_prediction(pred_s, slice(0, n_lab))
        pred_unl = _slice_prediction(pred_s, slice(n_lab, None))

        # 5. object-level contrastive loss
        l_contrast: Optional[Tensor] = None
        num_excluded = 0
        contrast_labels = pseudo
        if use_contrast and num_pseudo > 0:
            if cfg.cutout_exclusion:
                contrast_labels = [cutout_exclusion(weak_imgs[k], strong_imgs[k], pseudo[k], strong_recs[k],
                                                    weak_recs[k]) for k in range(len(pseudo))]
                num_excluded = num_pseudo - sum(len(p) for p in contrast_labels)
            feats_unl = _slice_features(feats_s, slice(n_lab, None))
            try:
                l_contrast = multi_scale_contrastive(feats_unl, feats_t, contrast_labels, strong_recs, weak_recs,
                                                     levels, tau=cfg.tau, lam=1.0,
                                                     class_based=cfg.class_based_contrast, trace=trace)
            except EmptyBatch:
                l_contrast = None

        # 6. unsupervised detection loss against pseudo-labels mapped into the student's view
        unl_labels = []
        for k, lab in enumerate(pseudo):
            mapped = []
            for box, c in zip(lab.boxes, lab.classes):
                try:
                    mapped.append((transform_box(box, weak_recs[k], strong_recs[k]), c))
                except BoxOutsideView:
                    pass
            unl_labels.append(mapped)
        ce_u, reg_u = detection_loss_terms(pred_unl, unl_labels)
        l_unsup = ce_u if reg_u is None else nx.add(ce_u, reg_u)

        # 7. supervised detection loss on labeled source views
        ce_s, reg_s = detection_loss_terms(pred_lab, lab_labels)
        l_sup = ce_s if reg_s is None else nx.add(ce_s, reg_s)

        # 8. weighted total
        total = nx.add(nx.mul(l_unsup, cfg.lambda_unsup_det), nx.mul(l_sup, cfg.lambda_sup_det))
        if l_contrast is not None:
            total = nx.add(total, nx.mul(l_contrast, cfg.lambda_contrast))

    record = {
        "kind": "iter",
        "iter": it,
        "L_contrast": 0.0 if l_contrast is None else l_contrast.item(),
        "L_unsup_det": l_unsup.item(),
        "L_sup_det": l_sup.item(),
        "L_total": total.item(),
        "num_pseudo_labels": num_pseudo,
        "num_excluded": num_excluded,
    }
    _check_finite(record["L_total"], "total loss", it)
    state.student.zero_grad()
    tape.backward(total)
    assert all(t.grad is None and not t.requires_grad for t in state.teacher.tensors.values()), \
        "gradient reached the teacher"
    sgd_step(state.student, state.velocity, cfg.lr, cfg.momentum)
    state.student.zero_grad()
    if trace is not None:
        trace["used_contrast"] = l_contrast is not None
    return record


@dataclass
class RunResult:
    student: DetectorParams
    teacher: DetectorParams
    log: MetricLog
    burn_in_map: float
    final_map: float


def _eval_record(it: int, result) -> dict:
    return {"kind": "eval", "iter": it, "mAP50": result.map50,
            "per_class_ap": {str(k): v for k, v in result.per_class_ap.items()}}


_BURN_IN_CACHE: Dict[tuple, Tuple[dict, Dict[str, np.ndarray], float]] = {}


def _burned_in(ds: SyntheticDataset, cfg: TrainConfig, cache: bool):
    key = cfg.burn_in_key() + (ds.seed, tuple(ds.source_train.ids), ds.gen_config)
    if cache and key in _BURN_IN_CACHE:
        weights, velocity, burn_map = _BURN_IN_CACHE[key]
        return DetectorParams.from_json(weights, requires_grad=True), \
            {k: v.copy() for k, v in velocity.items()}, burn_map
    student = init_params(cfg.detector, cfg.seed)
    student, velocity = burn_in(student, ds, cfg)
    burn_map = evaluate(student, ds.target_eval, cfg.detector).map50
    if cache:
        _BURN_IN_CACHE[key] = (student.to_json(), {k: v.copy() for k, v in velocity.items()}, burn_map)
    return student, velocity, burn_map


def run(cfg: TrainConfig, ds: SyntheticDataset, out_dir=None, cache_burn_in: bool = True,
        force_contrast: bool = False, progress: Optional[Callable[[dict], None]] = None) -> RunResult:
    """Burn-in, then ``max_iters`` adaptation steps; the teacher is evaluated
    on the target eval split every ``eval_interval`` iterations and at the end."""
    cfg.validate()
    student, velocity, burn_map = _burned_in(ds, cfg, cache_burn_in)
    teacher = student.copy(requires_grad=False)
    state = TrainState(student, teacher, velocity, _rng(cfg.seed, 2))
    metric_log = MetricLog()
    metric_log.append({"kind": "eval", "iter": 0, "mAP50": burn_map, "phase": "burn_in"})
    n_src, n_tgt = len(ds.source_train), len(ds.target_train)
    bs = cfg.batch_size
    final_map = burn_map
    for it in range(1, cfg.max_iters + 1):
        lab_idx = state.rng.choice(n_src, size=min(bs, n_src), replace=False)
        unl_idx = state.rng.choice(n_tgt, size=min(bs, n_tgt), replace=False)
        with training_guard():
            record = train_step(state, ds, lab_idx, unl_idx, cfg, force_contrast=force_contrast)
        metric_log.append(record)
        if progress is not None:
            progress(record)
        if it % cfg.eval_interval == 0 or it == cfg.max_iters:
            result = evaluate(state.teacher, ds.target_eval, cfg.detector)
            final_map = result.map50
            metric_log.append(_eval_record(it, result))
            log.info("iter %d teacher mAP50 %.4f", it, result.map50)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        metric_log.write(out / "metrics.jsonl")
        save_checkpoint(out / "checkpoint.json", state.student, state.teacher, cfg.detector, cfg.to_dict())
    return RunResult(state.student, state.teacher, metric_log, burn_map, final_map)


# ------------------------------------------------------------- experiments

VARIANTS = {"baseline": {"contrastive_enabled": False}, "cmt": {"contrastive_enabled": True}}

ABLATIONS = [
    ("baseline", {"contrastive_enabled": False}),
    ("instance_single", {"contrastive_enabled": True, "class_based_contrast": False, "multi_scale": False}),
    ("class_single", {"contrastive_enabled": True, "class_based_contrast": True, "multi_scale": False}),
    ("instance_multi", {"contrastive_enabled": True, "class_based_contrast": False, "multi_scale": True}),
    ("class_multi", {"contrastive_enabled": True, "class_based_contrast": True, "multi_scale": True}),
]


def _final_map(args) -> float:
    cfg, ds = args
    return run(cfg, ds).final_map


def run_grid(cfgs: Sequence[TrainConfig], ds: SyntheticDataset, jobs: int = 1) -> List[float]:
    """Final teacher mAP for each config; independent runs, optionally in processes."""
    if jobs <= 1:
        return [run(c, ds).final_map for c in cfgs]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_final_map, [(c, ds) for c in cfgs]))


def _row(prefix: dict, seeds: Sequence[int], values: Sequence[float]) -> dict:
    row = dict(prefix)
    for s, v in zip(seeds, values):
        row[f"seed_{s}"] = v
    row["mean"] = float(np.mean(values))
    row["std"] = float(np.std(values))
    return row


def noise_sweep(cfg: TrainConfig, ds: SyntheticDataset, fractions: Sequence[float], seeds: Sequence[int],
                jobs: int = 1) -> List[dict]:
    """Final teacher mAP for baseline and CMT at each label-noise fraction."""
    cells = [(f, name) for f in fractions for name in VARIANTS]
    cfgs = [replace(cfg, noise_fraction=float(f), seed=int(s), **VARIANTS[name])
            for f, name in cells for s in seeds]
    values = run_grid(cfgs, ds, jobs)
    rows = []
    for c, (f, name) in enumerate(cells):
        vals = values[c * len(seeds):(c + 1) * len(seeds)]
        rows.append(_row({"fraction": float(f), "variant": name}, seeds, vals))
    return rows


def ablate(cfg: TrainConfig, ds: SyntheticDataset, seeds: Sequence[int] = (0, 1, 2), jobs: int = 1) -> List[dict]:
    """Baseline plus the 2x2 grid of {class-based contrast, multi-scale}."""
    cfgs = [replace(cfg, seed=int(s), **over) for _, over in ABLATIONS for s in seeds]
    values = run_grid(cfgs, ds, jobs)
    rows = []
    for c, (name, over) in enumerate(ABLATIONS):
        vals = values[c * len(seeds):(c + 1) * len(seeds)]
        prefix = {"config": name, "contrastive": over["contrastive_enabled"],
                  "class_based": over.get("class_based_contrast", False), "multi_scale": over.get("multi_scale", False)}
        rows.append(_row(prefix, seeds, vals))
    return rows


def rows_to_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    if rows:
        writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    return buf.getvalue()
