"""Detection postprocessing and COCO-style average precision."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .boxes import BoundingBox, iou, iou_matrix
from .model import Decoded, Detector, decode, to_nchw

COCO_IOU_THRESHOLDS = tuple(np.round(np.linspace(0.5, 0.95, 10), 2).tolist())
RECALL_THRESHOLDS = np.linspace(0.0, 1.0, 101)
COCO_AREA_THRESHOLDS = (32.0**2, 96.0**2)
COCO_REFERENCE_SIZE = 416


@dataclass(frozen=True)
class Detection:
    box: BoundingBox
    score: float
    class_id: int

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")


@dataclass
class DetectionArrays:
    boxes: np.ndarray
    scores: np.ndarray
    classes: np.ndarray

    def __len__(self):
        return len(self.scores)

    def to_list(self) -> list[Detection]:
        return [Detection(BoundingBox(*b), float(s), int(c)) for b, s, c in zip(self.boxes, self.scores, self.classes)]


def scaled_area_thresholds(input_size: int) -> tuple[float, float]:
    """COCO small/medium breakpoints rescaled from 416-pixel inputs."""
    f = (input_size / COCO_REFERENCE_SIZE) ** 2
    return (COCO_AREA_THRESHOLDS[0] * f, COCO_AREA_THRESHOLDS[1] * f)


# -- postprocessing ---------------------------------------------------------


def nms(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float) -> np.ndarray:
    """Greedy NMS; returns kept indices in descending score order."""
    order = np.argsort(-scores, kind="stable")
    keep = []
    suppressed = np.zeros(len(scores), dtype=bool)
    for pos, i in enumerate(order):
        if suppressed[i]:
            continue
        keep.append(i)
        rest = order[pos + 1 :]
        rest = rest[~suppressed[rest]]
        if rest.size:
            ious = iou_matrix(boxes[i : i + 1], boxes[rest])[0]
            suppressed[rest[ious > iou_threshold]] = True
    return np.array(keep, dtype=np.int64)


def postprocess_arrays(boxes, objectness, class_probs, conf_threshold: float = 0.001,
                       nms_iou: float = 0.45, max_det: int = 100) -> DetectionArrays:
    if not (0.0 <= conf_threshold <= 1.0 and 0.0 <= nms_iou <= 1.0):
        raise ValueError("thresholds must lie in [0, 1]")
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(objectness, dtype=np.float64)[:, None] * np.asarray(class_probs, dtype=np.float64)
    slot, cls = np.nonzero(scores >= conf_threshold)
    sc = scores[slot, cls]
    kept = []
    for c in np.unique(cls):
        idx = np.flatnonzero(cls == c)
        kept.append(idx[nms(boxes[slot[idx]], sc[idx], nms_iou)])
    if not kept:
        return DetectionArrays(np.zeros((0, 4)), np.zeros(0), np.zeros(0, dtype=np.int64))
    kept = np.concatenate(kept)
    # descending score, ties by class then slot
    order = np.lexsort((slot[kept], cls[kept], -sc[kept]))[:max_det]
    kept = kept[order]
    return DetectionArrays(boxes[slot[kept]], sc[kept], cls[kept].astype(np.int64))


def postprocess(decoded, conf_threshold: float = 0.001, nms_iou: float = 0.45, max_det: int = 100) -> list[Detection]:
    """Score = objectness x class probability, threshold, per-class greedy NMS."""
    if not isinstance(decoded, Decoded):
        decoded = Decoded.from_records(decoded)
    if len(decoded) == 0:
        return []
    out = postprocess_arrays(decoded.boxes, decoded.objectness, decoded.class_probs, conf_threshold, nms_iou, max_det)
    return out.to_list()


def predict(detector: Detector, images, conf_threshold: float = 0.001, nms_iou: float = 0.45,
            batch_size: int = 32, max_det: int = 100) -> list[DetectionArrays]:
    """Run an evaluation-mode forward pass and postprocess each image.

    ``images`` is a uint8 or float ``(N, S, S, 3)`` array.
    """
    was_training = detector.training
    detector.eval()
    dtype = next(detector.parameters()).dtype
    out = []
    try:
        with torch.no_grad():
            for start in range(0, len(images), batch_size):
                x = to_nchw(images[start : start + batch_size], dtype)
                raw = detector(x)
                for d in decode(raw, detector.config):
                    out.append(postprocess_arrays(d.boxes, d.objectness, d.class_probs, conf_threshold, nms_iou, max_det))
    finally:
        detector.train(was_training)
    return out


# -- average precision ------------------------------------------------------


def _dets_arrays(dets) -> DetectionArrays:
    if isinstance(dets, DetectionArrays):
        return dets
    dets = list(dets)
    return DetectionArrays(
        np.array([d.box.as_tuple() for d in dets], dtype=np.float64).reshape(-1, 4),
        np.array([d.score for d in dets], dtype=np.float64),
        np.array([d.class_id for d in dets], dtype=np.int64),
    )


def _gt_arrays(gts) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(gts, tuple):
        return np.asarray(gts[0], dtype=np.float64).reshape(-1, 4), np.asarray(gts[1], dtype=np.int64)
    gts = list(gts)
    return (
        np.array([g.box.as_tuple() for g in gts], dtype=np.float64).reshape(-1, 4),
        np.array([g.class_id for g in gts], dtype=np.int64),
    )


def _area(b: np.ndarray) -> np.ndarray:
    return (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])


def _match(det_boxes, gt_boxes, gt_ignore, thresholds):
    """Greedy score-ordered matching for one (image, class).

    ``det_boxes`` must already be in descending score order. Each detection
    takes the highest-IoU unmatched ground truth (non-ignored preferred, ties
    to the lower index). Returns ``(matched, matched_ignored)`` as ``(T, D)``.
    """
    T, D, G = len(thresholds), len(det_boxes), len(gt_boxes)
    matched = np.zeros((T, D), dtype=bool)
    matched_ig = np.zeros((T, D), dtype=bool)
    if D == 0 or G == 0:
        return matched, matched_ig
    # plain lists: these loops run over a handful of boxes per (image, class)
    ious = iou_matrix(det_boxes, gt_boxes).tolist()
    ignore = [bool(v) for v in gt_ignore]
    for t, thr in enumerate(thresholds):
        used = [False] * G
        for d in range(D):
            row = ious[d]
            best, best_key = -1, None
            for g in range(G):
                if used[g] or row[g] < thr:
                    continue
                key = (not ignore[g], row[g])  # strict > keeps the lowest index on ties
                if best_key is None or key > best_key:
                    best, best_key = g, key
            if best >= 0:
                used[best] = True
                matched[t, d] = True
                matched_ig[t, d] = ignore[best]
    return matched, matched_ig


def interpolated_ap(tp_flags: np.ndarray, npos: int) -> float:
    """101-point AP from TP/FP flags in descending score order."""
    if npos == 0:
        return float("nan")
    if tp_flags.size == 0:
        return 0.0
    tp = np.cumsum(tp_flags)
    fp = np.cumsum(~tp_flags)
    recall = tp / npos
    precision = tp / (tp + fp)
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_THRESHOLDS, side="left")
    q = np.where(idx < len(precision), precision[np.minimum(idx, len(precision) - 1)], 0.0)
    return math.fsum(q) / len(q)


def ap_table(dets_per_image, gts_per_image, iou_thresholds=COCO_IOU_THRESHOLDS,
             area_ranges=((0.0, math.inf),), num_classes: int | None = None, max_dets: int = 100) -> np.ndarray:
    """AP for every (threshold, class, area range); NaN where a class has no GT."""
    dets = [_dets_arrays(d) for d in dets_per_image]
    gts = [_gt_arrays(g) for g in gts_per_image]
    if len(dets) != len(gts):
        raise ValueError("detections and ground truths must cover the same images")
    if num_classes is None:
        all_cls = [g[1] for g in gts] + [d.classes for d in dets]
        num_classes = int(max((c.max() + 1 for c in all_cls if c.size), default=0))
    thresholds = np.asarray(iou_thresholds, dtype=np.float64)
    out = np.full((len(thresholds), num_classes, len(area_ranges)), np.nan)
    for k in range(num_classes):
        per_image = []
        for i, (d, (gb, gc)) in enumerate(zip(dets, gts)):
            di = np.flatnonzero(d.classes == k)
            di = di[np.argsort(-d.scores[di], kind="stable")][:max_dets]
            per_image.append((i, di, d.boxes[di], d.scores[di], gb[gc == k]))
        for a, (lo, hi) in enumerate(area_ranges):
            scores, order_keys, flags_tp, flags_ig = [], [], [], []
            npos = 0
            for i, di, db, ds, gb in per_image:
                g_area = _area(gb)
                g_ignore = (g_area < lo) | (g_area > hi)
                npos += int((~g_ignore).sum())
                m, mig = _match(db, gb, g_ignore, thresholds)
                d_out = (_area(db) < lo) | (_area(db) > hi)
                flags_tp.append(m & ~mig)
                flags_ig.append(mig | (~m & d_out[None, :]))
                scores.append(ds)
                order_keys.append(np.stack([np.full(len(di), i), np.arange(len(di))], axis=1))
            if npos == 0:
                continue
            s = np.concatenate(scores)
            keys = np.concatenate(order_keys).reshape(-1, 2)
            tp = np.concatenate(flags_tp, axis=1)
            ig = np.concatenate(flags_ig, axis=1)
            # descending score, then image index, then detection index
            order = np.lexsort((keys[:, 1], keys[:, 0], -s))
            for t in range(len(thresholds)):
                keep = order[~ig[t, order]]
                out[t, k, a] = interpolated_ap(tp[t, keep], npos)
    return out


def _nanmean(values) -> float:
    vals = [float(v) for v in np.ravel(values) if not math.isnan(v)]
    return math.fsum(vals) / len(vals) if vals else float("nan")


def average_precision(dets_per_image, gts_per_image, iou_threshold: float, num_classes: int | None = None) -> float:
    """Class-averaged AP at one IoU threshold; classes without GT are skipped.

    Returns 0.0 when no class has any ground truth.
    """
    table = ap_table(dets_per_image, gts_per_image, (iou_threshold,), num_classes=num_classes)
    v = _nanmean(table[0, :, 0])
    return 0.0 if math.isnan(v) else v


@dataclass
class APReport:
    ap50_95: float | None
    ap50: float | None
    ap75: float | None
    ap_s: float | None
    ap_m: float | None
    ap_l: float | None
    per_class: dict[int, float] = field(default_factory=dict)
    iou_thresholds: tuple = COCO_IOU_THRESHOLDS

    METRICS = ("ap50_95", "ap50", "ap75", "ap_s", "ap_m", "ap_l")

    def metrics(self) -> dict[str, float]:
        """Available headline metrics (absent ones are skipped)."""
        return {m: getattr(self, m) for m in self.METRICS if getattr(self, m) is not None}

    def to_dict(self) -> dict:
        def clean(v):
            return None if v is None or math.isnan(v) else v

        d = {k: clean(v) for k, v in self.metrics().items()}
        d["per_class"] = {str(k): clean(v) for k, v in self.per_class.items()}
        d["iou_thresholds"] = list(self.iou_thresholds)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "APReport":
        def val(k):
            if k not in d:
                return None
            return float("nan") if d[k] is None else d[k]

        return cls(
            *(val(m) for m in cls.METRICS),
            per_class={int(k): (float("nan") if v is None else v) for k, v in d.get("per_class", {}).items()},
            iou_thresholds=tuple(d.get("iou_thresholds", COCO_IOU_THRESHOLDS)),
        )

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    def write_per_class_csv(self, path, class_names=None) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["class_id", "class_name", "ap50_95"])
            for k in sorted(self.per_class):
                name = class_names[k] if class_names and k < len(class_names) else str(k)
                v = self.per_class[k]
                w.writerow([k, name, "" if math.isnan(v) else f"{v:.6f}"])


def ap_report(dets_per_image, gts_per_image, area_thresholds=COCO_AREA_THRESHOLDS,
              iou_thresholds=COCO_IOU_THRESHOLDS, num_classes: int | None = None, max_dets: int = 100) -> APReport:
    """Six COCO metrics plus per-class AP averaged over ``iou_thresholds``.

    ``ap50_95`` and the size buckets are reported only for the full ten
    threshold set; ``ap50``/``ap75`` whenever their threshold is included.
    Buckets without ground truth come out as NaN.
    """
    small, medium = area_thresholds
    if not 0 < small < medium:
        raise ValueError("need 0 < small_max < medium_max")
    thresholds = tuple(float(t) for t in iou_thresholds)
    ranges = ((0.0, math.inf), (0.0, small), (small, medium), (medium, math.inf))
    table = ap_table(dets_per_image, gts_per_image, thresholds, ranges, num_classes, max_dets)
    full = np.allclose(sorted(thresholds), COCO_IOU_THRESHOLDS) and len(thresholds) == 10

    def at(thr):
        for t, v in enumerate(thresholds):
            if abs(v - thr) < 1e-9:
                return _nanmean(table[t, :, 0])
        return None

    def zero_if_nan(v):
        return 0.0 if v is not None and math.isnan(v) else v

    per_class = {k: _nanmean(table[:, k, 0]) for k in range(table.shape[1])}
    return APReport(
        ap50_95=zero_if_nan(_nanmean(table[:, :, 0])) if full else None,
        ap50=zero_if_nan(at(0.5)),
        ap75=zero_if_nan(at(0.75)),
        ap_s=_nanmean(table[:, :, 1]) if full else None,
        ap_m=_nanmean(table[:, :, 2]) if full else None,
        ap_l=_nanmean(table[:, :, 3]) if full else None,
        per_class=per_class,
        iou_thresholds=thresholds,
    )
