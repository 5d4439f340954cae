"""Tiny datasets, configs and independent recomputations shared by the training tests."""

import math

import numpy as np
import torch

from mcdet.data import GeneratorConfig, class_names, generate_scene, generate_split, render
from mcdet.model import DetectorConfig
from mcdet.train import ModelSettings, TrainConfig, TrainData

TINY_WIDTHS = (4, 8, 8, 16, 16, 32, 32)
GRADCHECK_ANCHORS = (((24.0, 24.0), (32.0, 28.0), (40.0, 40.0)), ((8.0, 8.0), (12.0, 16.0), (16.0, 16.0)))


def one_object_fixture(seed=7) -> TrainData:
    """One image holding one object from a two-class generator."""
    cfg = GeneratorConfig(num_classes=2, min_objects=1, max_objects=1)
    return TrainData.from_samples([render(generate_scene(seed, cfg), 96, "fixture")], class_names(2))


def small_dataset(n=16, seed=0) -> TrainData:
    return TrainData.from_samples(generate_split(GeneratorConfig(), seed, "train", n), class_names(3))


def tiny_config(**kw) -> TrainConfig:
    base = dict(epochs=3, batch_size=1, multiscale_sizes=(96,), mosaic_prob=0.0, eval_every=0,
                model=ModelSettings(channel_widths=TINY_WIDTHS))
    base.update(kw)
    return TrainConfig(**base)


def gradcheck_config() -> DetectorConfig:
    return DetectorConfig(num_classes=2, input_size=64, anchor_sizes=GRADCHECK_ANCHORS,
                          channel_widths=(2, 2, 2, 2, 2, 4, 4), seed=3)


def expected_threshold(n0, n_final, total, t):
    return n0 * math.exp(-t * math.log(n0 / n_final) / total)


def best_slot(box, config: DetectorConfig):
    """Best (scale, row, col, anchor) for a lone box by brute-force shape IoU."""
    w, h = box[2] - box[0], box[3] - box[1]
    best, best_iou = None, -1.0
    for s, anchors in enumerate(config.anchor_sizes):
        for a, (aw, ah) in enumerate(anchors):
            inter = min(w, aw) * min(h, ah)
            v = inter / (w * h + aw * ah - inter)
            if v > best_iou:
                best, best_iou = (s, a), v
    s, a = best
    stride = config.strides[s]
    cx, cy = (box[0] + box[2]) / 2, (box[1] + box[3]) / 2
    return s, int(cy // stride), int(cx // stride), a


def recompute_gates(raw_scales, boxes, classes, config: DetectorConfig, threshold):
    """Gate decisions for single-object images straight from saved logits."""
    flags = []
    for i, (b, c) in enumerate(zip(boxes, classes)):
        if len(b) == 0:
            continue
        assert len(b) == 1
        s, row, col, a = best_slot(b[0], config)
        logits = raw_scales[s][i, row, col, a, 5:].tolist()
        err = max(abs((1.0 if k == int(c[0]) else 0.0) - 1.0 / (1.0 + math.exp(-z))) for k, z in enumerate(logits))
        flags.append(err < threshold)
    return np.array(flags, dtype=bool)


def gradcheck_batch(seed=0):
    """Two random 64-pixel images with a handful of boxes."""
    rng = np.random.default_rng(seed)
    x = torch.from_numpy(rng.random((2, 3, 64, 64))).to(torch.float64)
    boxes = [np.array([[4.0, 6.0, 30.0, 28.0], [36.0, 30.0, 50.0, 46.0]]),
             np.array([[10.0, 34.0, 22.0, 44.0], [30.0, 4.0, 62.0, 40.0]])]
    classes = [np.array([0, 1]), np.array([1, 0])]
    return x, boxes, classes
