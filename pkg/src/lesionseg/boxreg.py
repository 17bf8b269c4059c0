"""Random-box local attention regularizer for the scanet branch.

Boxes are drawn on the scanet input grid, labelled by how much lesion they
cover, and scored by a small shared classifier running on the backbone's
coarse features.  Ambiguous boxes are left out of the loss.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .graph import he_normal
from .tensor import PadMode, Tensor

CELL = 32
POSITIVE_SHARE = 0.7
BACKGROUND_SHARE = 0.1
DEFAULT_LAMBDA = 0.1
SIDE_RANGE = (0.2, 0.6)


class Label(enum.Enum):
    POSITIVE = "positive"
    BACKGROUND = "background"
    IGNORE = "ignore"


@dataclass(frozen=True)
class Box:
    x0: int
    y0: int
    w: int
    h: int


@dataclass(frozen=True)
class BoxLabel:
    label: Label
    share: float


def _snap_side(raw: float, limit: int) -> int:
    side = int(math.ceil(raw / CELL)) * CELL
    return max(CELL, min(side, (limit // CELL) * CELL))


def sample_boxes(rng_seed: int, image_h: int, image_w: int, k: int = 12) -> list:
    """``k`` random boxes whose sides and corners sit on the 32-pixel grid."""
    if image_h < 2 * CELL or image_w < 2 * CELL:
        raise ValueError(f"image {image_h}x{image_w} too small for box sampling (min 64x64)")
    rng = np.random.default_rng(rng_seed)
    lo, hi = SIDE_RANGE
    boxes = []
    for _ in range(k):
        w = _snap_side(rng.uniform(lo, hi) * image_w, image_w)
        h = _snap_side(rng.uniform(lo, hi) * image_h, image_h)
        x0 = int(rng.integers(0, (image_w - w) // CELL + 1)) * CELL
        y0 = int(rng.integers(0, (image_h - h) // CELL + 1)) * CELL
        boxes.append(Box(x0, y0, w, h))
    return boxes


def box_target_share(mask: np.ndarray, box: Box) -> float:
    mask = np.asarray(mask)
    region = mask[box.y0:box.y0 + box.h, box.x0:box.x0 + box.w]
    return float(region.sum()) / (box.w * box.h)


def label_box(share: float) -> BoxLabel:
    if share > POSITIVE_SHARE:
        return BoxLabel(Label.POSITIVE, share)
    if share < BACKGROUND_SHARE:
        return BoxLabel(Label.BACKGROUND, share)
    return BoxLabel(Label.IGNORE, share)


def init_box_head(channels: int, seed: int, dtype=np.float32) -> dict:
    """Shared box classifier: 3x3 conv + ReLU, global average, affine to one logit."""
    rng = np.random.default_rng(seed)

    def p(name, arr):
        return Tensor(arr.astype(dtype), requires_grad=True, name=name)

    return {
        "boxreg.conv.weight": p("boxreg.conv.weight",
                                he_normal((channels, channels, 3, 3), channels * 9, rng, dtype)),
        "boxreg.conv.bias": p("boxreg.conv.bias", np.zeros(channels)),
        "boxreg.fc.weight": p("boxreg.fc.weight", he_normal((1, channels, 1, 1), channels, rng, dtype)),
        "boxreg.fc.bias": p("boxreg.fc.bias", np.zeros(1)),
    }


def box_logit(features: Tensor, head: dict) -> Tensor:
    z = T.conv2d(features, head["boxreg.conv.weight"], head["boxreg.conv.bias"], PadMode.SAME)
    z = T.global_avg_pool(T.relu(z))
    return T.conv2d(z, head["boxreg.fc.weight"], head["boxreg.fc.bias"], PadMode.SAME)


def box_loss(features: Tensor, head: dict, boxes: Sequence[Sequence[Box]],
             labels: Sequence[Sequence[BoxLabel]]) -> Tensor:
    """Mean BCE of the box classifier over every non-ignored box in the batch.

    ``boxes[n]`` / ``labels[n]`` belong to image ``n`` of ``features``.
    Returns an exact 0 (off-tape) when every box is ignored.
    """
    logits, targets = [], []
    for n, (img_boxes, img_labels) in enumerate(zip(boxes, labels)):
        for box, lab in zip(img_boxes, img_labels):
            if lab.label is Label.IGNORE:
                continue
            cy0, cx0 = box.y0 // CELL, box.x0 // CELL
            cy1 = -(-(box.y0 + box.h) // CELL)
            cx1 = -(-(box.x0 + box.w) // CELL)
            region = T.crop(T.take_batch(features, n), cy0, cy1, cx0, cx1)
            logits.append(box_logit(region, head))
            targets.append(1.0 if lab.label is Label.POSITIVE else 0.0)
    if not logits:
        return Tensor(np.zeros((), dtype=features.dtype))
    stacked = T.concat(logits, axis=0)
    target = Tensor(np.asarray(targets, dtype=features.dtype).reshape(stacked.shape))
    return T.bce_loss(T.sigmoid(stacked), target)


def combine_loss(seg_loss: Tensor, box_term: Tensor, lam: float = DEFAULT_LAMBDA) -> Tensor:
    """``seg_loss + lam * box_term``; ``lam == 0`` returns ``seg_loss`` itself."""
    if lam < 0:
        raise ValueError(f"box loss weight must be >= 0, got {lam}")
    if lam == 0:
        return seg_loss
    return T.add(seg_loss, T.scale(box_term, lam))
