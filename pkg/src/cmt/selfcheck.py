"""Built-in correctness checks run by ``cmt selfcheck``.

Each check compares a fast implementation against a slow reference on
seeded random fixtures and returns the worst deviation seen.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable, List, Optional

import numpy as np

from . import numerics as nx
from .contrastive import contrastive_loss, moco_loss
from .detector import DensePrediction, DetectorConfig, detection_loss, init_params
from .evaluation import average_precision
from .mean_teacher import ema_update
from .numerics import Tensor, grad_check


@dataclass
class CheckResult:
    category: str
    name: str
    passed: bool
    worst: float
    tolerance: float
    seconds: float


def _unit_rows(rng, n, d):
    z = rng.normal(size=(n, d))
    return z / np.linalg.norm(z, axis=1, keepdims=True)


def _bilinear_reference(F, box, out_size, samples):
    c, h, w = F.shape
    x1, y1, x2, y2 = box
    oh, ow = out_size
    bh, bw = (y2 - y1) / oh, (x2 - x1) / ow
    out = np.zeros((c, oh, ow))
    for a in range(oh):
        for b in range(ow):
            for sy in range(samples):
                for sx in range(samples):
                    y = min(max(y1 + a * bh + (sy + 0.5) * bh / samples - 0.5, 0.0), h - 1.0)
                    x = min(max(x1 + b * bw + (sx + 0.5) * bw / samples - 0.5, 0.0), w - 1.0)
                    y0, x0 = int(math.floor(y)), int(math.floor(x))
                    y1_, x1_ = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
                    fy, fx = y - y0, x - x0
                    out[:, a, b] += ((1 - fy) * (1 - fx) * F[:, y0, x0] + (1 - fy) * fx * F[:, y0, x1_]
                                     + fy * (1 - fx) * F[:, y1_, x0] + fy * fx * F[:, y1_, x1_])
            out[:, a, b] /= samples * samples
    return out


def _contrastive_reference(zs, zt, classes, tau, lam):
    n = len(classes)
    total = 0.0
    for i in range(n):
        logits = [float(zs[i] @ zt[k]) / tau for k in range(n)]
        m = max(logits)
        lse = m + math.log(sum(math.exp(v - m) for v in logits))
        pos = [p for p in range(n) if classes[p] == classes[i]]
        total += sum(logits[p] - lse for p in pos) / len(pos)
    return -lam * total / n


def check_gradients(rng) -> float:
    worst = 0.0
    x = rng.normal(size=(3, 4))
    m = Tensor(rng.normal(size=(4, 2)))
    cases = [
        lambda t: nx.sum(nx.mul(nx.exp(nx.mul(t, 0.3)), t)),
        lambda t: nx.sum(nx.log_softmax(t, axis=1)[0:1]),
        lambda t: nx.sum(nx.smooth_l1(t, np.zeros_like(x))),
        lambda t: nx.sum(nx.l2_normalize(t)),
        lambda t: nx.sum(nx.relu(nx.matmul(t, m))),
    ]
    for f in cases:
        worst = max(worst, grad_check(f, x))
    img = rng.normal(size=(2, 6, 6))
    w = rng.normal(size=(3, 2, 3, 3))
    worst = max(worst, grad_check(lambda t: nx.sum(nx.max_pool2d(nx.conv2d(Tensor(img), t, None, 1, 1), 2)), w))
    return worst


def check_detector_gradients(rng) -> float:
    cfg = DetectorConfig(widths=(2, 2, 2, 2), head_width=2)
    p = init_params(cfg, int(rng.integers(1 << 30)))
    img = rng.uniform(size=(3, 16, 16))
    labels = [((2.0, 2.0, 13.0, 12.0), 1)]
    worst = 0.0
    for name in ("backbone.0.conv1.w", "head.cls.w", "head.box.b"):
        x = p[name]
        coords = [int(k) for k in rng.choice(x.size, size=min(3, x.size), replace=False)]

        def f(t, name=name):
            from .detector import forward
            return detection_loss(forward(img, p.replace(name, t), cfg)[1], labels)

        worst = max(worst, grad_check(f, x, coords=coords))
    return worst


def check_roi_align(rng, roi_fn: Optional[Callable] = None) -> float:
    roi_fn = roi_fn or nx.roi_align_many
    worst = 0.0
    for _ in range(40):
        F = rng.normal(size=(2, 7, 9))
        x1, y1 = rng.uniform(-2, 8), rng.uniform(-2, 6)
        box = (x1, y1, x1 + rng.uniform(0.5, 6), y1 + rng.uniform(0.5, 5))
        got = roi_fn(Tensor(F), [box], (3, 3)).data[0]
        worst = max(worst, float(np.abs(got - _bilinear_reference(F, box, (3, 3), 2)).max()))
    return worst


def check_contrastive(rng) -> float:
    worst = 0.0
    for _ in range(30):
        n = int(rng.integers(1, 9))
        zs, zt = _unit_rows(rng, n, 5), _unit_rows(rng, n, 5)
        classes = list(rng.integers(0, 3, size=n))
        got = contrastive_loss(Tensor(zs), Tensor(zt), classes, 0.07, 0.05).item()
        worst = max(worst, abs(got - _contrastive_reference(zs, zt, classes, 0.07, 0.05)))
    return worst


def check_moco(rng) -> float:
    worst = 0.0
    for _ in range(30):
        n = int(rng.integers(2, 9))
        zq, zk = _unit_rows(rng, n, 5), _unit_rows(rng, n, 5)
        ref = _contrastive_reference(zq, zk, list(range(n)), 0.07, 1.0)
        worst = max(worst, abs(moco_loss(Tensor(zq), Tensor(zk), 0.07).item() - ref))
    return worst


def check_ema(rng) -> float:
    cfg = DetectorConfig(widths=(2, 2, 2, 2), head_width=2)
    worst = 0.0
    for alpha in (0.5, 0.9996):
        s = init_params(cfg, 1)
        t = init_params(cfg, 2, gain=4.0)
        d0 = t.distance(s)
        for _ in range(10):
            ema_update(t, s, alpha)
        worst = max(worst, abs(t.distance(s) - alpha ** 10 * d0) / (alpha ** 10 * d0))
    return worst


def check_detection_loss(rng) -> float:
    worst = 0.0
    for _ in range(5):
        logits = rng.normal(size=(4, 3, 3))
        offsets = np.exp(rng.normal(1.5, 0.5, size=(4, 3, 3)))
        box = (2.0, 3.0, 19.0, 21.0)
        # reference: per-cell loop
        ce = reg = 0.0
        npos = 0
        for r in range(3):
            for c in range(3):
                cx, cy = (c + 0.5) * 8, (r + 0.5) * 8
                inside = box[0] < cx < box[2] and box[1] < cy < box[3]
                target = 1 if inside else 3
                col = logits[:, r, c]
                ce += math.log(np.exp(col - col.max()).sum()) + col.max() - col[target]
                if inside:
                    npos += 1
                    d = (cx - box[0], cy - box[1], box[2] - cx, box[3] - cy)
                    for j in range(4):
                        e = abs(offsets[j, r, c] - d[j]) / 8
                        reg += 0.5 * e * e if e < 1 else e - 0.5
        ref = ce / 9 + (reg / (4 * npos) if npos else 0.0)
        got = detection_loss(DensePrediction(Tensor(logits), Tensor(offsets), 8), [(box, 1)]).item()
        worst = max(worst, abs(got - ref))
    return worst


def check_average_precision(rng) -> float:
    return abs(average_precision([True, False, True], [0.9, 0.8, 0.7], 2) - 5 / 6)


CHECKS = [
    ("gradients", "elementwise/conv ops vs central differences", check_gradients, 1e-4),
    ("gradients", "detector weights vs central differences", check_detector_gradients, 1e-4),
    ("roi_align", "separable RoIAlign vs dense bilinear loop", check_roi_align, 1e-9),
    ("loss_oracles", "class-based contrastive vs double loop", check_contrastive, 1e-10),
    ("loss_oracles", "batch MoCo vs cross-entropy", check_moco, 1e-10),
    ("detection_loss", "dense loss vs per-cell loop", check_detection_loss, 1e-9),
    ("ema", "teacher distance decays as alpha^T", check_ema, 1e-9),
    ("metrics", "all-point AP on TP/FP/TP fixture", check_average_precision, 1e-12),
]


def run_checks(seed: int = 0, roi_fn: Optional[Callable] = None) -> List[CheckResult]:
    results = []
    for category, name, fn, tol in CHECKS:
        rng = np.random.default_rng(seed)
        start = time.perf_counter()
        try:
            worst = fn(rng, roi_fn) if fn is check_roi_align else fn(rng)
            passed = bool(worst < tol)
        except Exception:  # a crashing check is a failed check
            worst, passed = float("nan"), False
        results.append(CheckResult(category, name, passed, float(worst), tol, time.perf_counter() - start))
    return results


def format_table(results: List[CheckResult]) -> str:
    lines = [f"{'status':6}  {'category':15} {'worst':>10} {'tol':>8}  check"]
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        lines.append(f"{status:6}  {r.category:15} {r.worst:10.2e} {r.tolerance:8.0e}  {r.name}")
    return "\n".join(lines)
