"""Synthetic shape scenes, mosaic / multi-scale preprocessing, COCO-style I/O."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .boxes import BoundingBox, iou_matrix
from .seeding import derive_seed

KINDS = ("circle", "square", "triangle")
# fixed palette used when there are more classes than shape kinds
PALETTE = (
    (0.95, 0.25, 0.2),
    (0.2, 0.85, 0.3),
    (0.25, 0.45, 0.95),
    (0.95, 0.85, 0.2),
    (0.85, 0.3, 0.9),
    (0.2, 0.9, 0.9),
)


class SceneGenerationError(RuntimeError):
    pass


class DatasetFormatError(ValueError):
    pass


@dataclass(frozen=True)
class GroundTruthObject:
    box: BoundingBox
    class_id: int


@dataclass
class Sample:
    image: np.ndarray  # (S, S, 3) float32 in [0, 1]
    objects: list[GroundTruthObject]
    source_id: str

    def __post_init__(self):
        h, w = self.image.shape[:2]
        if h != w or h % 32:
            raise ValueError(f"sample images must be square multiples of 32, got {h}x{w}")

    @property
    def size(self) -> int:
        return self.image.shape[0]

    def boxes(self) -> np.ndarray:
        return np.array([o.box.as_tuple() for o in self.objects], dtype=np.float64).reshape(-1, 4)

    def classes(self) -> np.ndarray:
        return np.array([o.class_id for o in self.objects], dtype=np.int64)

    def __eq__(self, other):
        return (
            isinstance(other, Sample)
            and self.source_id == other.source_id
            and self.objects == other.objects
            and self.image.shape == other.image.shape
            and np.array_equal(self.image, other.image)
        )


@dataclass(frozen=True)
class ShapeSpec:
    kind: str
    center: tuple[float, float]
    size: float
    color: tuple[float, float, float]
    class_id: int

    def box(self, scale: float = 1.0) -> BoundingBox:
        cx, cy = self.center
        h = self.size / 2
        return BoundingBox((cx - h) * scale, (cy - h) * scale, (cx + h) * scale, (cy + h) * scale)


@dataclass(frozen=True)
class SceneSpec:
    canvas_size: int
    shapes: tuple[ShapeSpec, ...]
    background_color: tuple[float, float, float]
    noise_sigma: float
    noise_seed: int = 0


@dataclass(frozen=True)
class GeneratorConfig:
    num_classes: int = 3
    canvas_size: int = 96
    min_size: int = 14
    max_size: int = 40
    min_objects: int = 1
    max_objects: int = 4
    max_overlap_iou: float = 0.3
    noise_sigma: float = 0.03
    max_retries: int = 200
    n_train: int = 2000
    n_val: int = 200
    n_test: int = 200

    def __post_init__(self):
        if not 1 <= self.num_classes <= len(KINDS) * len(PALETTE):
            raise ValueError(f"num_classes must be in [1, {len(KINDS) * len(PALETTE)}]")
        if not 0 < self.min_size <= self.max_size < self.canvas_size:
            raise ValueError("need 0 < min_size <= max_size < canvas_size")
        if not 0 <= self.min_objects <= self.max_objects:
            raise ValueError("need 0 <= min_objects <= max_objects")
        if self.canvas_size % 32:
            raise ValueError("canvas_size must be a multiple of 32")

    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def class_names(num_classes: int) -> list[str]:
    if num_classes <= len(KINDS):
        return list(KINDS[:num_classes])
    return [f"{KINDS[c % 3]}_{c // 3}" for c in range(num_classes)]


def _class_color(class_id: int, num_classes: int, rng: np.random.Generator) -> tuple[float, float, float]:
    if num_classes <= len(KINDS):
        return tuple(float(v) for v in rng.uniform(0.45, 1.0, size=3))
    base = np.array(PALETTE[class_id // 3]) + rng.uniform(-0.05, 0.05, size=3)
    return tuple(float(v) for v in np.clip(base, 0.0, 1.0))


def generate_scene(rng_seed: int, config: GeneratorConfig = GeneratorConfig()) -> SceneSpec:
    rng = np.random.default_rng(rng_seed)
    n = int(rng.integers(config.min_objects, config.max_objects + 1))
    shapes: list[ShapeSpec] = []
    placed = np.zeros((0, 4))
    S = config.canvas_size
    for _ in range(n):
        for _attempt in range(config.max_retries):
            size = int(rng.integers(config.min_size, config.max_size + 1))
            lo = math.ceil(size / 2)
            cx = int(rng.integers(lo, S - lo + 1))
            cy = int(rng.integers(lo, S - lo + 1))
            box = np.array([[cx - size / 2, cy - size / 2, cx + size / 2, cy + size / 2]])
            if len(placed) and iou_matrix(box, placed).max() > config.max_overlap_iou:
                continue
            class_id = int(rng.integers(config.num_classes))
            shapes.append(ShapeSpec(
                KINDS[class_id % 3], (float(cx), float(cy)), float(size),
                _class_color(class_id, config.num_classes, rng), class_id,
            ))
            placed = np.vstack([placed, box])
            break
        else:
            raise SceneGenerationError(
                f"could not place object {len(shapes) + 1}/{n} after {config.max_retries} tries (seed {rng_seed})"
            )
    background = tuple(float(v) for v in rng.uniform(0.0, 0.35, size=3))
    return SceneSpec(S, tuple(shapes), background, config.noise_sigma, int(rng.integers(2**31)))


def shape_mask(shape: ShapeSpec, size: int, scale: float) -> np.ndarray:
    """Pixels whose centres fall inside the shape, on a ``size``-pixel canvas."""
    c = (np.arange(size) + 0.5)
    px, py = c[None, :], c[:, None]
    cx, cy = shape.center[0] * scale, shape.center[1] * scale
    half = shape.size * scale / 2
    if shape.kind == "circle":
        return (px - cx) ** 2 + (py - cy) ** 2 <= half**2
    if shape.kind == "square":
        return (np.abs(px - cx) <= half) & (np.abs(py - cy) <= half)
    if shape.kind == "triangle":
        depth = py - (cy - half)  # apex at the top
        # the tip keeps a one-pixel column so the apex row is never empty
        return (depth >= 0) & (py <= cy + half) & (np.abs(px - cx) <= np.maximum(depth / 2, 0.5))
    raise ValueError(f"unknown shape kind {shape.kind!r}")


def render(scene: SceneSpec, size: int, source_id: str = "") -> Sample:
    if size <= 0 or size % 32:
        raise ValueError(f"render size must be a positive multiple of 32, got {size}")
    scale = size / scene.canvas_size
    img = np.empty((size, size, 3), dtype=np.float64)
    img[:] = scene.background_color
    objects = []
    for shape in scene.shapes:
        img[shape_mask(shape, size, scale)] = shape.color
        objects.append(GroundTruthObject(shape.box(scale), shape.class_id))
    if scene.noise_sigma > 0:
        rng = np.random.default_rng([scene.noise_seed, size])
        img += rng.normal(0.0, scene.noise_sigma, size=img.shape)
    # quantise to 8 bits so lossless PNG storage round-trips exactly
    return Sample(from_uint8(to_uint8(img)), objects, source_id)


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def from_uint8(pixels: np.ndarray) -> np.ndarray:
    return pixels.astype(np.float32) / np.float32(255.0)


# -- preprocessing ----------------------------------------------------------


def mosaic_arrays(images, boxes, classes, rng: np.random.Generator, center=None, min_keep: float = 0.25):
    """Compose four equal-size images around a centre point.

    Works on arrays directly so the training loop can mosaic uint8 batches.
    Returns ``(image, boxes, classes)``.
    """
    S = images[0].shape[0]
    if any(im.shape != images[0].shape for im in images):
        raise ValueError("mosaic inputs must share one size")
    if center is None:
        xc = int(rng.integers(S // 4, 3 * S // 4 + 1))
        yc = int(rng.integers(S // 4, 3 * S // 4 + 1))
    else:
        xc, yc = (int(v) for v in center)
    out = np.empty_like(images[0])
    out[:yc, :xc] = images[0][S - yc :, S - xc :]
    out[:yc, xc:] = images[1][S - yc :, : S - xc]
    out[yc:, :xc] = images[2][: S - yc, S - xc :]
    out[yc:, xc:] = images[3][: S - yc, : S - xc]
    offsets = ((xc - S, yc - S), (xc, yc - S), (xc - S, yc), (xc, yc))
    regions = ((0, 0, xc, yc), (xc, 0, S, yc), (0, yc, xc, S), (xc, yc, S, S))
    kept_boxes, kept_classes = [], []
    for b, c, (dx, dy), (x0, y0, x1, y1) in zip(boxes, classes, offsets, regions):
        b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
        if not len(b):
            continue
        moved = b + np.array([dx, dy, dx, dy], dtype=np.float64)
        clipped = np.stack([
            np.clip(moved[:, 0], x0, x1), np.clip(moved[:, 1], y0, y1),
            np.clip(moved[:, 2], x0, x1), np.clip(moved[:, 3], y0, y1),
        ], axis=1)
        w = clipped[:, 2] - clipped[:, 0]
        h = clipped[:, 3] - clipped[:, 1]
        area0 = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
        keep = (w > 0) & (h > 0) & (w * h >= min_keep * area0)
        kept_boxes.append(clipped[keep])
        kept_classes.append(np.asarray(c, dtype=np.int64).reshape(-1)[keep])
    if kept_boxes:
        return out, np.concatenate(kept_boxes), np.concatenate(kept_classes)
    return out, np.zeros((0, 4)), np.zeros(0, dtype=np.int64)


def mosaic(samples, rng_seed: int, center=None, min_keep: float = 0.25) -> Sample:
    """Four-image mosaic of :class:`Sample` objects (see :func:`mosaic_arrays`)."""
    if len(samples) != 4:
        raise ValueError("mosaic needs exactly four samples")
    if len({s.image.shape for s in samples}) != 1:
        raise ValueError("mosaic inputs must share one size")
    rng = np.random.default_rng(rng_seed)
    image, boxes, classes = mosaic_arrays(
        [s.image for s in samples], [s.boxes() for s in samples], [s.classes() for s in samples],
        rng, center=center, min_keep=min_keep,
    )
    objects = [GroundTruthObject(BoundingBox(*b), int(c)) for b, c in zip(boxes, classes)]
    return Sample(image, objects, "mosaic:" + "+".join(s.source_id for s in samples))


def multiscale_size(rng_seed: int, size_set) -> int:
    sizes = list(size_set)
    if not sizes:
        raise ValueError("size_set is empty")
    bad = [s for s in sizes if s <= 0 or s % 32]
    if bad:
        raise ValueError(f"sizes must be positive multiples of 32: {bad}")
    return int(sizes[np.random.default_rng(rng_seed).integers(len(sizes))])


# -- datasets ---------------------------------------------------------------


def generate_split(config: GeneratorConfig, seed: int, split: str, count: int) -> list[Sample]:
    out = []
    for i in range(count):
        scene = generate_scene(derive_seed(seed, "data", split, i), config)
        out.append(render(scene, config.canvas_size, source_id=f"{split}_{i:06d}"))
    return out


def _json_fail(path, msg) -> DatasetFormatError:
    return DatasetFormatError(f"{path}: {msg}")


def write_dataset(samples, path, categories: list[str]) -> None:
    path = Path(path)
    (path / "images").mkdir(parents=True, exist_ok=True)
    images, annotations = [], []
    for img_id, s in enumerate(samples):
        fname = f"images/{s.source_id or img_id}.png"
        Image.fromarray(to_uint8(s.image)).save(path / fname)
        images.append({"id": img_id, "file_name": fname, "width": s.size, "height": s.size, "source_id": s.source_id})
        for o in s.objects:
            annotations.append({
                "id": len(annotations) + 1,
                "image_id": img_id,
                "category_id": o.class_id + 1,
                "bbox": o.box.to_xywh(),
                "area": o.box.area,
                "iscrowd": 0,
            })
    doc = {
        "images": images,
        "annotations": annotations,
        "categories": [{"id": i + 1, "name": n} for i, n in enumerate(categories)],
    }
    (path / "annotations.json").write_text(json.dumps(doc, indent=1))


def _require(obj: dict, key: str, where: str, path):
    if not isinstance(obj, dict) or key not in obj:
        raise _json_fail(path, f"{where}: missing required key {key!r}")
    return obj[key]


def read_dataset(path) -> tuple[list[Sample], list[str]]:
    """Load a directory written by :func:`write_dataset` (or any COCO bbox file).

    Category ids are mapped to contiguous class ids in ascending id order.
    """
    path = Path(path)
    ann_path = path / "annotations.json"
    try:
        doc = json.loads(ann_path.read_text())
    except FileNotFoundError as exc:
        raise DatasetFormatError(f"{ann_path}: not found") from exc
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"{ann_path}: line {exc.lineno} col {exc.colno}: {exc.msg}") from exc
    for key in ("images", "annotations", "categories"):
        _require(doc, key, "top level", ann_path)
    cats = sorted(doc["categories"], key=lambda c: _require(c, "id", "categories[]", ann_path))
    cat_index = {c["id"]: i for i, c in enumerate(cats)}
    names = [str(_require(c, "name", f"categories[id={c['id']}]", ann_path)) for c in cats]

    per_image: dict = {}
    for k, a in enumerate(doc["annotations"]):
        where = f"annotations[{k}]"
        image_id = _require(a, "image_id", where, ann_path)
        bbox = _require(a, "bbox", where, ann_path)
        cat = _require(a, "category_id", where, ann_path)
        if not (isinstance(bbox, list) and len(bbox) == 4):
            raise _json_fail(ann_path, f"{where}.bbox: expected [x, y, w, h], got {bbox!r}")
        if cat not in cat_index:
            raise _json_fail(ann_path, f"{where}.category_id: unknown category {cat!r}")
        try:
            box = BoundingBox.from_xywh(*(float(v) for v in bbox))
        except ValueError as exc:
            raise _json_fail(ann_path, f"{where}.bbox: {exc}") from exc
        per_image.setdefault(image_id, []).append(GroundTruthObject(box, cat_index[cat]))

    samples = []
    for k, im in enumerate(doc["images"]):
        where = f"images[{k}]"
        image_id = _require(im, "id", where, ann_path)
        fname = _require(im, "file_name", where, ann_path)
        try:
            with Image.open(path / fname) as pil:
                pixels = np.asarray(pil.convert("RGB"))
        except (FileNotFoundError, OSError) as exc:
            raise _json_fail(ann_path, f"{where}.file_name: cannot read {fname!r}: {exc}") from exc
        image = from_uint8(pixels)
        source_id = im.get("source_id", Path(fname).stem)
        samples.append(Sample(image, per_image.get(image_id, []), source_id))
    return samples, names


def dataset_digest(samples) -> str:
    h = hashlib.sha256()
    for s in samples:
        h.update(s.source_id.encode())
        h.update(to_uint8(s.image).tobytes())
        h.update(s.boxes().tobytes())
        h.update(s.classes().tobytes())
    return h.hexdigest()[:16]


def generate_dataset(config: GeneratorConfig, seed: int, out_dir) -> dict:
    """Write train/val/test splits plus ``manifest.json``; return the manifest."""
    out_dir = Path(out_dir)
    splits = {"train": config.n_train, "val": config.n_val, "test": config.n_test}
    names = class_names(config.num_classes)
    manifest = {
        "generator": config.to_dict(),
        "config_hash": config.config_hash(),
        "seed": seed,
        "counts": {},
        "digests": {},
        "categories": names,
    }
    for split, count in splits.items():
        samples = generate_split(config, seed, split, count)
        write_dataset(samples, out_dir / split, names)
        manifest["counts"][split] = count
        manifest["digests"][split] = dataset_digest(samples)
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest
