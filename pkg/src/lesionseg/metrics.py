"""Binary segmentation metrics."""

import numpy as np


def _pair(pred, gt):
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes {pred.shape} and {gt.shape} differ")
    return pred, gt


def jaccard(pred, gt) -> float:
    """Intersection over union; two empty masks score 1.0."""
    pred, gt = _pair(pred, gt)
    union = np.count_nonzero(pred | gt)
    if union == 0:
        return 1.0
    return np.count_nonzero(pred & gt) / union


def dice(pred, gt) -> float:
    pred, gt = _pair(pred, gt)
    total = np.count_nonzero(pred) + np.count_nonzero(gt)
    if total == 0:
        return 1.0
    return 2 * np.count_nonzero(pred & gt) / total


def pixel_accuracy(pred, gt) -> float:
    pred, gt = _pair(pred, gt)
    return np.count_nonzero(pred == gt) / pred.size
