"""Training loop with threshold-gated classification loss, plus a comparison runner."""

from __future__ import annotations

import copy
import csv
import dataclasses
import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import evaluation
from .data import Sample, mosaic_arrays, multiscale_size, read_dataset
from .losses import LossWeights, compute_loss
from .mc_core import ThresholdSchedule, make_schedule, threshold_at
from .model import Detector, DetectorConfig, build_detector, kmeans_anchors, save_checkpoint
from .seeding import derive_seed, rng_for

log = logging.getLogger(__name__)


class TrainingAborted(RuntimeError):
    pass


class ConfigMismatch(ValueError):
    pass


@dataclass(frozen=True)
class ModelSettings:
    input_size: int = 96
    channel_widths: tuple[int, ...] = (8, 16, 32, 64, 64, 128, 128)
    anchors_per_scale: int = 3
    strides: tuple[int, int] = (32, 16)


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 37.4
    beta: float = 3.54
    gamma: float = 64.3
    batch_size: int = 8
    momentum: float = 0.937
    weight_decay: float = 0.0005
    lr_initial: float = 0.01
    lr_final: float = 0.0005
    epochs: int = 60
    n0: float = 0.5
    n_final: float = 0.05
    mc_enabled: bool = True
    seed: int = 0
    multiscale_sizes: tuple[int, ...] = (96,)
    mosaic_prob: float = 0.5
    eval_every: int = 5
    checkpoint_every: int = 0
    force_threshold: float | None = None
    dtype: str = "float32"
    conf_threshold: float = 0.001
    nms_iou: float = 0.45
    model: ModelSettings = field(default_factory=ModelSettings)

    def __post_init__(self):
        object.__setattr__(self, "multiscale_sizes", tuple(int(s) for s in self.multiscale_sizes))
        if isinstance(self.model, dict):
            object.__setattr__(self, "model", ModelSettings(**self.model))
        m = self.model
        object.__setattr__(self, "model", dataclasses.replace(
            m, channel_widths=tuple(int(c) for c in m.channel_widths), strides=tuple(int(s) for s in m.strides)))
        for name in ("batch_size", "lr_initial", "lr_final"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be nonnegative")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")
        if not 0 <= self.mosaic_prob <= 1:
            raise ValueError("mosaic_prob must lie in [0, 1]")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")
        if self.mc_enabled and self.epochs > 0 and self.force_threshold is None:
            make_schedule(self.n0, self.n_final, self.epochs)  # validates endpoints
        if not self.multiscale_sizes:
            raise ValueError("multiscale_sizes must not be empty")

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.alpha, self.beta, self.gamma)

    @property
    def schedule(self) -> ThresholdSchedule | None:
        if not self.mc_enabled or self.epochs == 0:
            return None
        return make_schedule(self.n0, self.n_final, self.epochs)

    @property
    def torch_dtype(self) -> torch.dtype:
        return torch.float64 if self.dtype == "float64" else torch.float32

    def threshold(self, epoch: int) -> float | None:
        if not self.mc_enabled:
            return None
        if self.force_threshold is not None:
            return float(self.force_threshold)
        return threshold_at(self.schedule, epoch)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["multiscale_sizes"] = list(self.multiscale_sizes)
        d["model"]["channel_widths"] = list(self.model.channel_widths)
        d["model"]["strides"] = list(self.model.strides)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise KeyError(f"unknown train config keys: {sorted(unknown)}")
        if "model" in d:
            m = dict(d["model"])
            bad = set(m) - {f.name for f in dataclasses.fields(ModelSettings)}
            if bad:
                raise KeyError(f"unknown model config keys: {sorted('model.' + k for k in bad)}")
            d["model"] = ModelSettings(**m)
        return cls(**d)

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def full_scale_config(**overrides) -> TrainConfig:
    """Full-scale hyperparameters (batch 32, 600 epochs, 320..608 inputs)."""
    base = dict(batch_size=32, epochs=600, multiscale_sizes=tuple(range(320, 609, 32)),
                model=ModelSettings(input_size=416, channel_widths=(16, 32, 64, 128, 256, 512, 1024)))
    base.update(overrides)
    return TrainConfig(**base)


# -- schedule and optimizer --------------------------------------------------


def cosine_lr(t: int, config: TrainConfig) -> float:
    if not 0 <= t <= config.epochs:
        raise ValueError(f"epoch {t} outside [0, {config.epochs}]")
    if config.epochs == 0:
        return config.lr_initial
    return config.lr_final + 0.5 * (config.lr_initial - config.lr_final) * (1 + math.cos(math.pi * t / config.epochs))


def sgd_step(params, grads, velocity, lr: float, momentum: float, weight_decay: float, decay_mask=None):
    """In-place momentum SGD: ``v = m*v + g + wd*p``; ``p -= lr*v``.

    Works on lists of tensors or numpy arrays. ``decay_mask`` marks which
    params receive weight decay (default all). Returns ``(params, velocity)``.
    """
    if decay_mask is None:
        decay_mask = [True] * len(params)
    if not (len(params) == len(grads) == len(velocity) == len(decay_mask)):
        raise ValueError("params, grads, velocity and decay_mask must align")
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape or p.shape != velocity[i].shape:
            raise ValueError(f"shape mismatch at parameter {i}")
        finite = torch.isfinite(g).all() if torch.is_tensor(g) else np.isfinite(g).all()
        if not finite:
            raise FloatingPointError(f"non-finite gradient in parameter {i}")
    for i, p in enumerate(params):
        d = grads[i] + weight_decay * p if (decay_mask[i] and weight_decay) else grads[i]
        velocity[i] *= momentum
        velocity[i] += d
        p -= lr * velocity[i]
    return params, velocity


def decay_flags(detector: Detector) -> list[bool]:
    """Weight decay applies to conv weights only (not BN params or biases)."""
    flags = []
    for name, p in detector.named_parameters():
        flags.append(p.ndim > 1)
    return flags


# -- data --------------------------------------------------------------------


@dataclass
class TrainData:
    images: np.ndarray  # (N, S, S, 3) uint8
    boxes: list[np.ndarray]
    classes: list[np.ndarray]
    class_names: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.images)

    @property
    def size(self) -> int:
        return self.images.shape[1]

    @classmethod
    def from_samples(cls, samples, class_names=()) -> "TrainData":
        samples = list(samples)
        if samples:
            images = np.stack([np.round(s.image * 255.0).astype(np.uint8) for s in samples])
        else:
            images = np.zeros((0, 32, 32, 3), dtype=np.uint8)
        return cls(images, [s.boxes() for s in samples], [s.classes() for s in samples], list(class_names))

    @classmethod
    def load(cls, path) -> "TrainData":
        samples, names = read_dataset(path)
        return cls.from_samples(samples, names)

    def ground_truths(self):
        return list(zip(self.boxes, self.classes))


def make_batch(data: TrainData, indices, config: TrainConfig, size: int, rng: np.random.Generator):
    """Mosaic (with probability) and resize one batch. Returns ``(x, boxes, classes)``."""
    images = data.images[indices]
    boxes = [data.boxes[i] for i in indices]
    classes = [data.classes[i] for i in indices]
    if config.mosaic_prob > 0 and rng.random() < config.mosaic_prob:
        mixed_i, mixed_b, mixed_c = [], [], []
        for j, i in enumerate(indices):
            others = rng.integers(len(data), size=3)
            group = [i, *others]
            im, b, c = mosaic_arrays(
                [data.images[k] for k in group], [data.boxes[k] for k in group],
                [data.classes[k] for k in group], rng,
            )
            mixed_i.append(im)
            mixed_b.append(b)
            mixed_c.append(c)
        images, boxes, classes = np.stack(mixed_i), mixed_b, mixed_c
    x = torch.from_numpy(images).permute(0, 3, 1, 2).to(config.torch_dtype) / 255.0
    native = data.size
    if size != native:
        x = F.interpolate(x, size=(size, size), mode="bilinear", align_corners=False)
        f = size / native
        boxes = [b * f for b in boxes]
    return x, boxes, classes


# -- epochs and runs -----------------------------------------------------------


def train_epoch(detector: Detector, data: TrainData, config: TrainConfig, epoch: int,
                velocity: list | None = None, observer=None) -> tuple[Detector, dict]:
    """One pass over ``data``; returns the detector and the epoch log record.

    Pass a ``velocity`` list to carry momentum across epochs (it is filled
    on first use). ``observer(batch, x, boxes, classes, raw, result)`` is
    called after each forward pass, before the update.
    """
    threshold = config.threshold(epoch)
    lr = cosine_lr(epoch, config)
    entry = {
        "epoch": epoch,
        "lr": lr,
        "threshold": threshold,
        "batches": 0,
        "classification": None,
        "regression": None,
        "objectness": None,
        "total": None,
        "matched": 0,
        "gated": 0,
        "gated_fraction": 0.0,
        "gated_per_class": {},
        "dropped": 0,
    }
    if len(data) == 0:
        return detector, entry
    params = list(detector.parameters())
    if velocity is None:
        velocity = []
    if not velocity:
        velocity.extend(torch.zeros_like(p) for p in params)
    mask = decay_flags(detector)
    size = multiscale_size(derive_seed(config.seed, "multiscale", epoch), config.multiscale_sizes)
    order = rng_for(config.seed, "order", epoch).permutation(len(data))
    sums = {"classification": 0.0, "regression": 0.0, "objectness": 0.0, "total": 0.0}
    gated_per_class: dict[int, int] = {}
    detector.train()
    n_batches = 0
    for b, start in enumerate(range(0, len(data), config.batch_size)):
        batch_seed = derive_seed(config.seed, "batch", epoch, b)
        rng = np.random.default_rng(batch_seed)
        x, boxes, classes = make_batch(data, order[start : start + config.batch_size], config, size, rng)
        raw = detector(x)
        if not all(torch.isfinite(s).all() for s in raw.scales):
            raise TrainingAborted(f"non-finite network output at epoch {epoch} batch {b} (batch seed {batch_seed})")
        res = compute_loss(raw, boxes, classes, detector.config, config.weights, threshold, input_size=size)
        if not torch.isfinite(res.total):
            raise TrainingAborted(f"non-finite loss at epoch {epoch} batch {b} (batch seed {batch_seed})")
        if observer is not None:
            observer(b, x, boxes, classes, raw, res)
        detector.zero_grad(set_to_none=False)
        res.total.backward()
        try:
            with torch.no_grad():
                sgd_step(params, [p.grad for p in params], velocity, lr, config.momentum, config.weight_decay, mask)
        except FloatingPointError as exc:
            raise TrainingAborted(f"{exc} at epoch {epoch} batch {b} (batch seed {batch_seed})") from exc
        bd = res.breakdown
        for k in sums:
            sums[k] += getattr(bd, k)
        entry["matched"] += bd.matched_count
        entry["gated"] += bd.gated_count
        entry["dropped"] += res.dropped
        for c in res.classes[res.gated]:
            gated_per_class[int(c)] = gated_per_class.get(int(c), 0) + 1
        n_batches += 1
    entry["batches"] = n_batches
    entry["input_size"] = size
    for k, v in sums.items():
        entry[k] = v / n_batches
    entry["gated_fraction"] = entry["gated"] / entry["matched"] if entry["matched"] else 0.0
    entry["gated_per_class"] = {str(k): gated_per_class[k] for k in sorted(gated_per_class)}
    return detector, entry


def init_detector(config: TrainConfig, data: TrainData, num_classes: int) -> Detector:
    wh = np.concatenate([b[:, 2:] - b[:, :2] for b in data.boxes if len(b)] or [np.zeros((0, 2))])
    if len(wh) == 0:
        # no boxes to cluster: spread anchors over the input size
        s = config.model.input_size
        k = config.model.anchors_per_scale
        sizes = np.geomspace(s / 12, s / 2, 2 * k)
        anchors = (tuple((v, v) for v in sizes[k:]), tuple((v, v) for v in sizes[:k]))
    else:
        anchors = kmeans_anchors(wh, config.model.anchors_per_scale, seed=derive_seed(config.seed, "anchors"))
    det_cfg = DetectorConfig(
        num_classes=num_classes,
        input_size=config.model.input_size,
        strides=config.model.strides,
        anchors_per_scale=config.model.anchors_per_scale,
        anchor_sizes=anchors,
        channel_widths=config.model.channel_widths,
        seed=derive_seed(config.seed, "model") % 2**31,
    )
    return build_detector(det_cfg, config.torch_dtype)


def evaluate(detector: Detector, data: TrainData, config: TrainConfig, iou_thresholds=evaluation.COCO_IOU_THRESHOLDS):
    size = detector.config.input_size
    images = data.images
    gts = data.ground_truths()
    if data.size != size:
        x = torch.from_numpy(images).permute(0, 3, 1, 2).float()
        x = F.interpolate(x, size=(size, size), mode="bilinear", align_corners=False)
        images = x.round().clamp(0, 255).to(torch.uint8).permute(0, 2, 3, 1).numpy()
        f = size / data.size
        gts = [(b * f, c) for b, c in gts]
    dets = evaluation.predict(detector, images, config.conf_threshold, config.nms_iou)
    return evaluation.ap_report(
        dets, gts, evaluation.scaled_area_thresholds(size), iou_thresholds,
        num_classes=detector.config.num_classes,
    )


@dataclass
class RunResult:
    config: TrainConfig
    detector: Detector
    log: list[dict]
    meta: dict
    snapshots: dict = field(default_factory=dict)


STRIP_KEYS = ("wall_time", "epoch_seconds")


def strip_timing(records):
    return [{k: v for k, v in r.items() if k not in STRIP_KEYS} for r in records]


def run(config: TrainConfig, train_data: TrainData, val_data: TrainData | None = None,
        out_dir=None, num_classes: int | None = None, snapshot_epochs=(), progress=None) -> RunResult:
    """Train for ``config.epochs`` epochs; optionally write run artefacts.

    Writes ``runlog.jsonl``, ``run.json``, periodic ``checkpoint_eXXXX.mcdet``
    and ``final.mcdet`` under ``out_dir`` when given. ``snapshot_epochs``
    keeps in-memory copies of the detector after that many epochs.
    """
    t_start = time.perf_counter()
    torch.set_num_threads(1)
    if num_classes is None:
        num_classes = len(train_data.class_names) or int(
            max((c.max() + 1 for c in train_data.classes if len(c)), default=1))
    detector = init_detector(config, train_data, num_classes)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "runlog.jsonl").write_text("")
    velocity: list = []
    records: list[dict] = []
    snapshots = {}
    if 0 in snapshot_epochs:
        snapshots[0] = copy.deepcopy(detector)
    for t in range(config.epochs):
        t0 = time.perf_counter()
        detector, entry = train_epoch(detector, train_data, config, t, velocity)
        done = t + 1
        if val_data is not None and len(val_data) and config.eval_every and (
                done % config.eval_every == 0 or done == config.epochs):
            entry["val"] = evaluate(detector, val_data, config).to_dict()
        entry["epoch_seconds"] = time.perf_counter() - t0
        records.append(entry)
        if done in snapshot_epochs:
            snapshots[done] = copy.deepcopy(detector)
        if out is not None:
            with open(out / "runlog.jsonl", "a") as fh:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")
            if config.checkpoint_every and done % config.checkpoint_every == 0 and done != config.epochs:
                save_checkpoint(detector, out / f"checkpoint_e{done:04d}.mcdet", {"epoch": done})
        if progress is not None:
            progress(entry)
    meta = {
        "config": config.to_dict(),
        "config_hash": config.config_hash(),
        "detector_config_hash": detector.config.config_hash(),
        "seed": config.seed,
        "num_classes": num_classes,
        "class_names": list(train_data.class_names),
        "anchors": [list(map(list, s)) for s in detector.config.anchor_sizes],
        "wall_time": time.perf_counter() - t_start,
    }
    if out is not None:
        save_checkpoint(detector, out / "final.mcdet", {"epoch": config.epochs, "train_config_hash": config.config_hash()})
        (out / "run.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return RunResult(config, detector, records, meta, snapshots)


def read_runlog(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


# -- comparison ----------------------------------------------------------------

COMPARE_FREE_FIELDS = {"mc_enabled", "n0", "n_final", "epochs", "force_threshold"}


def check_comparable(baseline: TrainConfig, mc: TrainConfig) -> None:
    a, b = baseline.to_dict(), mc.to_dict()
    diff = sorted(k for k in a if k not in COMPARE_FREE_FIELDS and k != "seed" and a[k] != b[k])
    if diff:
        raise ConfigMismatch(f"baseline and mc configs differ beyond the allowed fields: {diff}")


@dataclass
class Comparison:
    seeds: list[int]
    baseline: list[evaluation.APReport]
    mc: list[evaluation.APReport]
    equal_epoch: list[evaluation.APReport] = field(default_factory=list)
    baseline_logs: list[list[dict]] = field(default_factory=list)
    mc_logs: list[list[dict]] = field(default_factory=list)

    def rows(self, which: str = "mc") -> list[dict]:
        other = self.mc if which == "mc" else self.equal_epoch
        rows = []
        for metric in evaluation.APReport.METRICS:
            base = [getattr(r, metric) for r in self.baseline]
            mcv = [getattr(r, metric) for r in other]
            if any(v is None for v in base + mcv):
                continue
            bm, mm = float(np.mean(base)), float(np.mean(mcv))
            row = {"metric": metric, "baseline_mean": bm, "mc_mean": mm, "delta": mm - bm}
            for s, bv, mv in zip(self.seeds, base, mcv):
                row[f"baseline_seed{s}"] = bv
                row[f"mc_seed{s}"] = mv
            rows.append(row)
        return rows

    def per_class_rows(self) -> list[dict]:
        classes = sorted(self.baseline[0].per_class) if self.baseline else []
        out = []
        for k in classes:
            bm = float(np.nanmean([r.per_class[k] for r in self.baseline]))
            mm = float(np.nanmean([r.per_class[k] for r in self.mc]))
            out.append({"class_id": k, "baseline_ap50_95": bm, "mc_ap50_95": mm, "delta": mm - bm})
        return out

    def table(self, which: str = "mc") -> str:
        rows = self.rows(which)
        head = f"{'metric':<10}{'baseline':>12}{'mc':>12}{'delta':>10}"
        lines = [head, "-" * len(head)]
        for r in rows:
            lines.append(f"{r['metric']:<10}{r['baseline_mean']:>12.4f}{r['mc_mean']:>12.4f}{r['delta']:>+10.4f}")
        return "\n".join(lines)

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_csv(out / "comparison.csv", self.rows("mc"))
        (out / "comparison.txt").write_text(self.table("mc") + "\n")
        _write_csv(out / "per_class_delta.csv", self.per_class_rows())
        if self.equal_epoch:
            _write_csv(out / "comparison_equal_epoch.csv", self.rows("equal"))
            (out / "comparison_equal_epoch.txt").write_text(self.table("equal") + "\n")


def _write_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        if not rows:
            return
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def compare(baseline: TrainConfig, mc: TrainConfig, train_data: TrainData, test_data: TrainData,
            seeds, val_data: TrainData | None = None, out_dir=None, equal_epoch_mode: str = "truncate",
            progress=None) -> Comparison:
    """Run both arms per seed and evaluate each on ``test_data``.

    When the arms train for different epoch counts, the mc arm is also
    evaluated at the baseline's epoch count: ``truncate`` takes the mc run's
    snapshot at that epoch, ``rescale`` retrains mc with the shorter schedule.
    """
    check_comparable(baseline, mc)
    if equal_epoch_mode not in ("truncate", "rescale"):
        raise ValueError("equal_epoch_mode must be 'truncate' or 'rescale'")
    seeds = list(seeds)
    result = Comparison(seeds, [], [])
    differ = baseline.epochs != mc.epochs
    for s in seeds:
        arms = {}
        for name, cfg in (("baseline", baseline), ("mc", mc)):
            cfg = dataclasses.replace(cfg, seed=s)
            snaps = (baseline.epochs,) if (name == "mc" and differ and equal_epoch_mode == "truncate") else ()
            sub = Path(out_dir) / f"{name}_seed{s}" if out_dir is not None else None
            arms[name] = run(cfg, train_data, val_data, sub, len(train_data.class_names) or None,
                             snapshot_epochs=snaps, progress=progress)
        result.baseline.append(evaluate(arms["baseline"].detector, test_data, baseline))
        result.mc.append(evaluate(arms["mc"].detector, test_data, mc))
        result.baseline_logs.append(arms["baseline"].log)
        result.mc_logs.append(arms["mc"].log)
        if differ:
            if equal_epoch_mode == "truncate" and baseline.epochs in arms["mc"].snapshots:
                det = arms["mc"].snapshots[baseline.epochs]
            else:
                cfg = dataclasses.replace(mc, seed=s, epochs=baseline.epochs)
                det = run(cfg, train_data, None, None, len(train_data.class_names) or None).detector
            result.equal_epoch.append(evaluate(det, test_data, mc))
        for name, rep in (("baseline", result.baseline[-1]), ("mc", result.mc[-1])):
            if out_dir is not None:
                rep.write_json(Path(out_dir) / f"{name}_seed{s}" / "test_report.json")
    if out_dir is not None:
        result.write(out_dir)
    return result
