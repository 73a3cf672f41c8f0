"""Axis-aligned box arithmetic: areas, IoU and class-wise NMS.

Boxes use the corner convention (x1, y1, x2, y2) with x2 > x1 and y2 > y1.
File formats store [x, y, w, h]; conversion happens at the IO boundary.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        for v in (self.x1, self.y1, self.x2, self.y2):
            if not math.isfinite(v):
                raise ValueError(f"non-finite box coordinate: {self}")
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise ValueError(f"degenerate box (need x2 > x1, y2 > y1): {self}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)

    @staticmethod
    def from_xywh(x: float, y: float, w: float, h: float) -> "Box":
        return Box(x, y, x + w, y + h)

    def to_xywh(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.width, self.height)


@dataclass(frozen=True)
class ScoredBox:
    box: Box
    class_id: int
    score: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score outside [0,1]: {self.score}")


def area(b: Box) -> float:
    """Area in px^2; strictly positive by the Box invariant."""
    return b.width * b.height


def iou(a: Box, b: Box) -> float:
    """Intersection-over-union of two boxes; 0.0 when disjoint."""
    ix = min(a.x2, b.x2) - max(a.x1, b.x1)
    iy = min(a.y2, b.y2) - max(a.y1, b.y1)
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    union = area(a) + area(b) - inter
    return inter / union


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (K,4) and (M,4) corner-form box arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ix = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    iy = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(ix, 0.0, None) * np.clip(iy, 0.0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(inter > 0.0, inter / union, 0.0)
    return out


def nms_indices(
    boxes: np.ndarray,
    scores: np.ndarray,
    class_ids: np.ndarray,
    iou_thresh: float,
) -> list[int]:
    """Greedy class-wise NMS over array inputs; returns kept indices.

    Processing order is descending score with ties broken by lower class id,
    then input position. A candidate is kept iff its IoU with every
    already-kept box of the same class is <= iou_thresh.
    """
    if not 0.0 <= iou_thresh <= 1.0:
        raise ValueError(f"iou_thresh outside [0,1]: {iou_thresh}")
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64)
    class_ids = np.asarray(class_ids)
    n = len(scores)
    if n == 0:
        return []
    order = np.lexsort((np.arange(n), class_ids, -scores))
    kept: list[int] = []
    kept_boxes = np.empty((0, 4), dtype=np.float64)
    kept_classes = np.empty((0,), dtype=class_ids.dtype)
    for i in order:
        same = kept_classes == class_ids[i]
        if same.any():
            overlaps = iou_matrix(boxes[i : i + 1], kept_boxes[same])[0]
            if (overlaps > iou_thresh).any():
                continue
        kept.append(int(i))
        kept_boxes = np.vstack([kept_boxes, boxes[i : i + 1]])
        kept_classes = np.append(kept_classes, class_ids[i])
    return kept


def nms(dets: list[ScoredBox], iou_thresh: float) -> list[ScoredBox]:
    """Class-wise NMS on ScoredBox lists; output sorted by descending score."""
    if not dets:
        return []
    boxes = np.stack([d.box.as_array() for d in dets])
    scores = np.array([d.score for d in dets])
    classes = np.array([d.class_id for d in dets])
    keep = nms_indices(boxes, scores, classes, iou_thresh)
    return [dets[i] for i in keep]
