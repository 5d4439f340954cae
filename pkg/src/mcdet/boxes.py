"""Axis-aligned box geometry shared by data, losses and evaluation.

Boxes are corner-form ``(x_min, y_min, x_max, y_max)`` in pixels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch


@dataclass(frozen=True)
class BoundingBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"degenerate box {self.as_tuple()}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    def scaled(self, factor: float) -> "BoundingBox":
        return BoundingBox(*(v * factor for v in self.as_tuple()))

    @classmethod
    def from_xywh(cls, x, y, w, h) -> "BoundingBox":
        return cls(x, y, x + w, y + h)

    def to_xywh(self) -> list[float]:
        return [self.x_min, self.y_min, self.width, self.height]


def _overlap(a: BoundingBox, b: BoundingBox) -> float:
    w = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    h = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    return max(w, 0.0) * max(h, 0.0)


def iou(a: BoundingBox, b: BoundingBox) -> float:
    inter = _overlap(a, b)
    return inter / (a.area + b.area - inter)


def giou(a: BoundingBox, b: BoundingBox) -> float:
    inter = _overlap(a, b)
    union = a.area + b.area - inter
    enclose = (max(a.x_max, b.x_max) - min(a.x_min, b.x_min)) * (
        max(a.y_max, b.y_max) - min(a.y_min, b.y_min)
    )
    # the enclosing box always covers the union; clamp rounding so giou <= iou holds exactly
    return inter / union - max(enclose - union, 0.0) / enclose


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between ``(n, 4)`` and ``(m, 4)`` corner arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    return inter / (area_a[:, None] + area_b[None, :] - inter)


def giou_tensor(pred: torch.Tensor, target: torch.Tensor, eps: float = 0.0) -> torch.Tensor:
    """Elementwise GIoU of matching rows of two ``(n, 4)`` corner tensors."""
    lt = torch.max(pred[:, :2], target[:, :2])
    rb = torch.min(pred[:, 2:], target[:, 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[:, 0] * wh[:, 1]
    area_p = (pred[:, 2] - pred[:, 0]) * (pred[:, 3] - pred[:, 1])
    area_t = (target[:, 2] - target[:, 0]) * (target[:, 3] - target[:, 1])
    union = area_p + area_t - inter + eps
    c_lt = torch.min(pred[:, :2], target[:, :2])
    c_rb = torch.max(pred[:, 2:], target[:, 2:])
    c_wh = c_rb - c_lt
    enclose = c_wh[:, 0] * c_wh[:, 1] + eps
    return inter / union - (enclose - union).clamp(min=0) / enclose


def boxes_array(boxes) -> np.ndarray:
    """Stack an iterable of :class:`BoundingBox` into an ``(n, 4)`` array."""
    out = np.array([b.as_tuple() for b in boxes], dtype=np.float64)
    return out.reshape(-1, 4)
