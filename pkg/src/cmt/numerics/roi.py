"""RoIAlign pooling.

Coordinates are continuous feature-map coordinates where cell ``(r, c)``
spans ``[c, c+1) x [r, r+1)`` and its value sits at the cell centre. A bin's
value is the mean of ``samples_per_bin**2`` bilinear samples on a regular
sub-grid. Sampling positions outside the map are clamped to the border.

Bilinear weights factor into a row term and a column term, and so does the
sample average, so pooling reduces to ``Wy @ F[c] @ Wx.T``.
"""
from __future__ import annotations

from typing import Sequence, Tuple

import numpy as np

from ..errors import DegenerateBox, ShapeMismatch
from .tensor import Tensor, as_tensor, record_op

DEFAULT_SAMPLES_PER_BIN = 2


def axis_weights(lo: float, hi: float, bins: int, samples: int, size: int) -> np.ndarray:
    """Averaged 1-D interpolation weights, shape (bins, size)."""
    step = (hi - lo) / bins
    offsets = (np.arange(samples) + 0.5) / samples
    pos = lo + (np.arange(bins)[:, None] + offsets[None, :]) * step  # (bins, samples)
    u = np.clip(pos - 0.5, 0.0, size - 1)
    i0 = np.floor(u).astype(np.int64)
    i1 = np.minimum(i0 + 1, size - 1)
    frac = u - i0
    weights = np.zeros((bins, size))
    rows = np.repeat(np.arange(bins), samples)
    np.add.at(weights, (rows, i0.ravel()), (1.0 - frac).ravel() / samples)
    np.add.at(weights, (rows, i1.ravel()), frac.ravel() / samples)
    return weights


def _check_box(box) -> Tuple[float, float, float, float]:
    x1, y1, x2, y2 = (float(v) for v in box)
    if not (x2 - x1 > 0 and y2 - y1 > 0):
        raise DegenerateBox(f"box {box} has non-positive width or height")
    return x1, y1, x2, y2


def roi_align_many(F, boxes: Sequence, out_size=(3, 3),
                   samples_per_bin: int = DEFAULT_SAMPLES_PER_BIN) -> Tensor:
    """Pool every box from ``F`` (C, H, W); returns (n, C, oh, ow)."""
    F = as_tensor(F)
    if F.ndim != 3:
        raise ShapeMismatch(f"feature map must be (C, H, W), got {F.shape}")
    _, h, w = F.shape
    oh, ow = out_size
    wy = np.empty((len(boxes), oh, h))
    wx = np.empty((len(boxes), ow, w))
    for k, box in enumerate(boxes):
        x1, y1, x2, y2 = _check_box(box)
        wy[k] = axis_weights(y1, y2, oh, samples_per_bin, h)
        wx[k] = axis_weights(x1, x2, ow, samples_per_bin, w)
    out = np.einsum("kah,chw,kbw->kcab", wy, F.data, wx, optimize=True)

    def backward(g):
        return (np.einsum("kah,kcab,kbw->chw", wy, g, wx, optimize=True),)

    return record_op(out, (F,), backward)


def roi_align(F, box, out_size=(3, 3), samples_per_bin: int = DEFAULT_SAMPLES_PER_BIN) -> Tensor:
    """Pool one box from ``F`` (C, H, W) into (C, oh, ow)."""
    from .ops import index
    return index(roi_align_many(F, [box], out_size, samples_per_bin), 0)
