"""Target assignment and the weighted three-part detection loss.

The classification term is gated per matched instance: when the Chebyshev
distance between its one-hot target and its predicted class probabilities is
below the current threshold, the instance contributes no classification loss.
Regression and objectness terms never see the gate.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import torch
import torch.nn.functional as F

from .boxes import BoundingBox, giou, giou_tensor
from .mc_core import GateDecision, class_errors, gate_flags
from .model import DetectorConfig, RawPrediction, decode_boxes

__all__ = [
    "LossWeights", "Match", "TargetAssignment", "LossBreakdown", "Targets",
    "assign_targets", "assign_boxes", "build_targets", "giou",
    "classification_loss", "regression_loss", "objectness_loss", "total_loss",
    "match_errors", "compute_loss",
]

# exp(tw) ceiling inside the loss; decode() itself is unclamped
MAX_WH_SCALE = 1e3


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 37.4  # classification
    beta: float = 3.54  # box regression
    gamma: float = 64.3  # objectness

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"loss weight {name} must be finite and nonnegative, got {v}")


class Match(NamedTuple):
    scale: int
    row: int
    col: int
    anchor: int
    gt_index: int


@dataclass
class TargetAssignment:
    matches: list[Match]
    dropped: int = 0
    reassigned: int = 0

    def __len__(self) -> int:
        return len(self.matches)


@dataclass(frozen=True)
class LossBreakdown:
    classification: float
    regression: float
    objectness: float
    total: float
    matched_count: int
    gated_count: int

    def to_dict(self) -> dict:
        return {
            "classification": self.classification,
            "regression": self.regression,
            "objectness": self.objectness,
            "total": self.total,
            "matched_count": self.matched_count,
            "gated_count": self.gated_count,
        }


# -- assignment -------------------------------------------------------------


def _anchor_table(config: DetectorConfig):
    return [(s, a, w, h) for s, scale in enumerate(config.anchor_sizes) for a, (w, h) in enumerate(scale)]


def assign_boxes(boxes: np.ndarray, config: DetectorConfig, input_size: int | None = None,
                 table=None) -> TargetAssignment:
    """Array form of :func:`assign_targets` for ``(n, 4)`` corner boxes."""
    size = input_size or config.input_size
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    if len(boxes) and (boxes.min() < -1e-6 or boxes[:, 2:].max() > size + 1e-6):
        raise ValueError(f"ground-truth box outside the {size}x{size} image")
    table = table or _anchor_table(config)
    aw = np.array([t[2] for t in table])
    ah = np.array([t[3] for t in table])
    grids = config.grid_sizes(size)
    taken: set = set()
    matches, dropped, reassigned = [], 0, 0
    for k, (x0, y0, x1, y1) in enumerate(boxes):
        w, h = x1 - x0, y1 - y0
        inter = np.minimum(w, aw) * np.minimum(h, ah)
        shape_iou = inter / (w * h + aw * ah - inter)
        # stable sort: ties keep (scale, anchor) order
        order = np.argsort(-shape_iou, kind="stable")
        cx, cy = 0.5 * (x0 + x1), 0.5 * (y0 + y1)
        for rank, j in enumerate(order):
            s, a = table[j][0], table[j][1]
            stride, g = config.strides[s], grids[s]
            col = min(int(cx // stride), g - 1)
            row = min(int(cy // stride), g - 1)
            slot = (s, row, col, a)
            if slot in taken:
                continue
            taken.add(slot)
            matches.append(Match(s, row, col, a, k))
            reassigned += rank > 0
            break
        else:
            dropped += 1
    return TargetAssignment(matches, dropped, reassigned)


def assign_targets(ground_truths, config: DetectorConfig, input_size: int | None = None) -> TargetAssignment:
    """Give each ground truth the free anchor slot with best anchor-shape IoU.

    A ground truth whose best slot is already taken falls back to its next
    best anchor; if every anchor is taken it is dropped (counted, with a
    warning).
    """
    boxes = np.array([g.box.as_tuple() for g in ground_truths], dtype=np.float64).reshape(-1, 4)
    result = assign_boxes(boxes, config, input_size)
    if result.dropped:
        warnings.warn(f"{result.dropped} ground truth(s) dropped: no free anchor slot", RuntimeWarning)
    return result


# -- batched targets --------------------------------------------------------


@dataclass
class Targets:
    """Matched slots of a whole batch, flattened in (image, match) order."""

    batch_index: torch.Tensor  # (n,)
    slot_index: torch.Tensor  # (n,) into RawPrediction.flat()
    boxes: torch.Tensor  # (n, 4) ground-truth corners
    classes: torch.Tensor  # (n,)
    cells: torch.Tensor  # (n, 2) cell x, y
    strides: torch.Tensor  # (n, 1)
    anchors: torch.Tensor  # (n, 2)
    dropped: int = 0

    def __len__(self) -> int:
        return int(self.batch_index.numel())


def build_targets(raw: RawPrediction, assignments, boxes_per_image, classes_per_image,
                  config: DetectorConfig) -> Targets:
    offsets = raw.slot_offsets()
    A = config.anchors_per_scale
    bi, si, bx, cl, cells, strides, anchors = [], [], [], [], [], [], []
    dropped = 0
    for i, (assign, boxes, classes) in enumerate(zip(assignments, boxes_per_image, classes_per_image)):
        dropped += assign.dropped
        for m in assign.matches:
            W = raw.scales[m.scale].shape[2]
            bi.append(i)
            si.append(offsets[m.scale] + (m.row * W + m.col) * A + m.anchor)
            bx.append(boxes[m.gt_index])
            cl.append(int(classes[m.gt_index]))
            cells.append((m.col, m.row))
            strides.append(config.strides[m.scale])
            anchors.append(config.anchor_sizes[m.scale][m.anchor])
    dtype = raw.scales[0].dtype
    n = len(bi)
    return Targets(
        torch.tensor(bi, dtype=torch.long),
        torch.tensor(si, dtype=torch.long),
        torch.tensor(np.array(bx, dtype=np.float64).reshape(n, 4), dtype=dtype),
        torch.tensor(cl, dtype=torch.long),
        torch.tensor(cells, dtype=dtype).reshape(n, 2),
        torch.tensor(strides, dtype=dtype).reshape(n, 1),
        torch.tensor(anchors, dtype=dtype).reshape(n, 2),
        dropped,
    )


def _matched_rows(raw: RawPrediction, targets: Targets, flat: torch.Tensor | None = None) -> torch.Tensor:
    flat = raw.flat() if flat is None else flat
    return flat[targets.batch_index, targets.slot_index]


def _gate_array(gate, n: int) -> np.ndarray:
    if gate is None:
        return np.zeros(n, dtype=bool)
    flags = np.array([g.gated if isinstance(g, GateDecision) else bool(g) for g in gate], dtype=bool)
    if flags.size != n:
        raise ValueError(f"gate has {flags.size} entries for {n} matches")
    return flags


# -- loss components ---------------------------------------------------------


def match_errors(raw: RawPrediction, targets: Targets, flat: torch.Tensor | None = None) -> np.ndarray:
    """Class error (max |one-hot - sigmoid(logit)|) of every matched slot."""
    if len(targets) == 0:
        return np.zeros(0)
    with torch.no_grad():
        logits = _matched_rows(raw, targets, flat)[:, 5:]
        probs = torch.sigmoid(logits).double().numpy()
    onehot = np.eye(logits.shape[1])[targets.classes.numpy()]
    return class_errors(onehot, probs)


def classification_loss(targets: Targets, raw: RawPrediction, gate=None,
                        flat: torch.Tensor | None = None) -> torch.Tensor:
    """Per-class-mean BCE averaged over all matches, gated matches counting as 0.

    The denominator stays the full match count, so gating one match leaves the
    other matches' gradients unchanged.
    """
    gated = _gate_array(gate, len(targets))
    flat = raw.flat() if flat is None else flat
    retained = np.flatnonzero(~gated)
    if retained.size == 0:
        return flat.new_zeros(())
    rows = _matched_rows(raw, targets, flat)
    logits = rows[:, 5:]
    onehot = F.one_hot(targets.classes, logits.shape[1]).to(logits.dtype)
    per_match = F.binary_cross_entropy_with_logits(logits, onehot, reduction="none").mean(dim=1)
    keep = torch.from_numpy(retained)
    return per_match[keep].sum() / len(targets)


def regression_loss(targets: Targets, raw: RawPrediction, flat: torch.Tensor | None = None) -> torch.Tensor:
    """Mean ``1 - GIoU`` over all matches (gated or not)."""
    flat = raw.flat() if flat is None else flat
    if len(targets) == 0:
        return flat.new_zeros(())
    rows = _matched_rows(raw, targets, flat)
    pred = decode_boxes(rows[:, :4], targets.cells, targets.strides, targets.anchors, max_scale=MAX_WH_SCALE)
    return (1.0 - giou_tensor(pred, targets.boxes)).mean()


def objectness_loss(targets: Targets, raw: RawPrediction, flat: torch.Tensor | None = None) -> torch.Tensor:
    """BCE over every anchor slot at both scales; matched slots target 1.

    No slot is exempted for overlapping a ground truth it was not assigned to.
    """
    flat = raw.flat() if flat is None else flat
    logits = flat[..., 4]
    target = torch.zeros_like(logits)
    if len(targets):
        target[targets.batch_index, targets.slot_index] = 1.0
    return F.binary_cross_entropy_with_logits(logits, target, reduction="mean")


def total_loss(components, weights: LossWeights, matched_count: int = 0, gated_count: int = 0) -> LossBreakdown:
    cls, reg, obj = (float(c) for c in components)
    for name, v in (("classification", cls), ("regression", reg), ("objectness", obj)):
        if not math.isfinite(v):
            raise FloatingPointError(f"non-finite {name} loss: {v}")
        if v < 0:
            raise ValueError(f"negative {name} loss: {v}")
    if not 0 <= gated_count <= matched_count:
        raise ValueError("need 0 <= gated_count <= matched_count")
    total = weights.alpha * cls + weights.beta * reg + weights.gamma * obj
    return LossBreakdown(cls, reg, obj, total, matched_count, gated_count)


@dataclass
class LossResult:
    total: torch.Tensor  # differentiable weighted sum
    breakdown: LossBreakdown
    errors: np.ndarray
    gated: np.ndarray
    classes: np.ndarray
    dropped: int = 0


def compute_loss(raw: RawPrediction, boxes_per_image, classes_per_image, config: DetectorConfig,
                 weights: LossWeights, threshold: float | None, input_size: int | None = None) -> LossResult:
    """Assign targets, gate, and build the weighted loss for one batch.

    ``threshold=None`` disables gating (baseline).
    """
    size = input_size or raw.scales[0].shape[1] * config.strides[0]
    table = _anchor_table(config)
    assignments = [assign_boxes(b, config, size, table) for b in boxes_per_image]
    targets = build_targets(raw, assignments, boxes_per_image, classes_per_image, config)
    flat = raw.flat()
    errors = match_errors(raw, targets, flat)
    gated = gate_flags(errors, threshold) if threshold is not None else np.zeros(len(errors), dtype=bool)
    cls = classification_loss(targets, raw, gated, flat)
    reg = regression_loss(targets, raw, flat)
    obj = objectness_loss(targets, raw, flat)
    total = weights.alpha * cls + weights.beta * reg + weights.gamma * obj
    breakdown = total_loss((cls.item(), reg.item(), obj.item()), weights, len(targets), int(gated.sum()))
    return LossResult(total, breakdown, errors, gated, targets.classes.numpy(), targets.dropped)
