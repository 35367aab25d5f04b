"""SRCC / PLCC and five-crop inference."""
from __future__ import annotations

from typing import Callable

import numpy as np


class UndefinedMetricError(ValueError):
    """Correlation is undefined (constant input or too few samples)."""


def _pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(pred, dtype=np.float64).ravel()
    b = np.asarray(gt, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.size} predictions vs {b.size} targets")
    if a.size < 3:
        raise UndefinedMetricError("correlation needs at least 3 samples")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("non-finite values in correlation input")
    return a, b


def rankdata(x: np.ndarray) -> np.ndarray:
    """1-based ranks; tied values share the average of their positions."""
    x = np.asarray(x, dtype=np.float64).ravel()
    order = np.argsort(x, kind="mergesort")
    sx = x[order]
    # boundaries of runs of equal values
    starts = np.flatnonzero(np.r_[True, sx[1:] != sx[:-1]])
    ends = np.r_[starts[1:], sx.size]
    avg = (starts + ends + 1) / 2.0
    ranks = np.empty(x.size)
    ranks[order] = np.repeat(avg, ends - starts)
    return ranks


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    da, db = a - a.mean(), b - b.mean()
    sa, sb = np.sqrt(np.dot(da, da)), np.sqrt(np.dot(db, db))
    if sa == 0 or sb == 0:
        raise UndefinedMetricError("correlation of a constant vector is undefined")
    return float(np.clip(np.dot(da, db) / (sa * sb), -1.0, 1.0))


def plcc(pred, gt) -> float:
    """Sample Pearson correlation (no nonlinear remapping)."""
    return _pearson(*_pair(pred, gt))


def srcc(pred, gt) -> float:
    """Spearman correlation: Pearson correlation of average-tie ranks."""
    a, b = _pair(pred, gt)
    return _pearson(rankdata(a), rankdata(b))


def five_crop_boxes(h: int, w: int, crop: int) -> list[tuple[int, int]]:
    """Top-left corners of the four corner crops and the centre crop."""
    if crop > h or crop > w:
        raise ValueError(f"image {h}x{w} is smaller than the {crop}px crop")
    return [
        (0, 0),
        (0, w - crop),
        (h - crop, 0),
        (h - crop, w - crop),
        ((h - crop) // 2, (w - crop) // 2),
    ]


def five_crops(img: np.ndarray, crop: int) -> np.ndarray:
    h, w = img.shape[:2]
    return np.stack([img[t : t + crop, l : l + crop] for t, l in five_crop_boxes(h, w, crop)])


def five_crop_score(model: Callable[[np.ndarray], np.ndarray], img: np.ndarray, crop: int) -> float:
    """Average of ``model`` over the five crops; ``model`` maps ``(5, c, c, 3)`` to 5 scores."""
    scores = np.asarray(model(five_crops(img, crop)), dtype=np.float64).ravel()
    return float(scores.mean())
