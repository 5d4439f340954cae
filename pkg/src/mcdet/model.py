"""Two-scale single-stage detector, box decoding and checkpoint I/O.

The network follows the YOLO v3 Tiny layout: seven conv-BN-LeakyReLU blocks
with max-pool downsampling, a coarse head on the deepest feature map and a
fine head fed by the upsampled coarse bottleneck concatenated with the last
feature map before the final downsampling.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .boxes import BoundingBox

MAGIC = b"MCDET1\n"
FORMAT_VERSION = 1

# YOLO v3 Tiny widths and COCO anchors at 416 (coarse scale first)
REFERENCE_CHANNEL_WIDTHS = (16, 32, 64, 128, 256, 512, 1024)
REFERENCE_ANCHORS = (
    ((81.0, 82.0), (135.0, 169.0), (344.0, 319.0)),
    ((10.0, 14.0), (23.0, 27.0), (37.0, 58.0)),
)


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class DetectorConfig:
    num_classes: int
    input_size: int = 96
    strides: tuple[int, int] = (32, 16)
    anchors_per_scale: int = 3
    anchor_sizes: tuple = ()
    channel_widths: tuple[int, ...] = (8, 16, 32, 64, 64, 128, 128)
    seed: int = 0
    bn_momentum: float = 0.03

    def __post_init__(self):
        # normalise lists (e.g. from JSON/TOML) into hashable tuples
        object.__setattr__(self, "strides", tuple(int(s) for s in self.strides))
        object.__setattr__(
            self,
            "anchor_sizes",
            tuple(tuple((float(w), float(h)) for w, h in scale) for scale in self.anchor_sizes),
        )
        object.__setattr__(self, "channel_widths", tuple(int(c) for c in self.channel_widths))
        self.validate()

    def validate(self) -> None:
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")
        if len(self.strides) != 2:
            raise ValueError("exactly two strides (coarse, fine) are required")
        coarse, fine = self.strides
        if coarse != 2 * fine or fine < 2 or fine & (fine - 1):
            raise ValueError(f"strides must be (2s, s) with s a power of two, got {self.strides}")
        if int(math.log2(coarse)) > len(self.channel_widths) - 1:
            raise ValueError("not enough backbone stages for the coarse stride")
        if self.input_size <= 0 or self.input_size % 32 or self.input_size % coarse:
            raise ValueError(f"input_size {self.input_size} must be a multiple of 32 and of every stride")
        if self.anchors_per_scale < 1:
            raise ValueError("anchors_per_scale must be positive")
        if len(self.anchor_sizes) != 2:
            raise ValueError("anchor_sizes needs one list per scale")
        for scale in self.anchor_sizes:
            if len(scale) != self.anchors_per_scale:
                raise ValueError("anchor list length per scale must equal anchors_per_scale")
            if any(w <= 0 or h <= 0 for w, h in scale):
                raise ValueError("anchor sizes must be positive")
        if any(c < 1 for c in self.channel_widths) or len(self.channel_widths) != 7:
            raise ValueError("channel_widths must be seven positive integers")

    @property
    def num_pools(self) -> int:
        return int(math.log2(self.strides[0]))

    def grid_sizes(self, input_size: int | None = None) -> tuple[int, int]:
        size = input_size or self.input_size
        return tuple(size // s for s in self.strides)

    def num_slots(self, input_size: int | None = None) -> int:
        return sum(g * g * self.anchors_per_scale for g in self.grid_sizes(input_size))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["strides"] = list(self.strides)
        d["anchor_sizes"] = [[list(a) for a in s] for s in self.anchor_sizes]
        d["channel_widths"] = list(self.channel_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DetectorConfig":
        return cls(**d)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def reference_config(num_classes: int = 80) -> DetectorConfig:
    """Full-width YOLO v3 Tiny layout at 416 pixels."""
    return DetectorConfig(
        num_classes=num_classes,
        input_size=416,
        anchor_sizes=REFERENCE_ANCHORS,
        channel_widths=REFERENCE_CHANNEL_WIDTHS,
    )


def conv_block(c_in: int, c_out: int, k: int, bn_momentum: float) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, k, padding=k // 2, bias=False),
        nn.BatchNorm2d(c_out, momentum=bn_momentum),
        nn.LeakyReLU(0.1),
    )


@dataclass
class RawPrediction:
    """Per-scale tensors shaped ``(B, H, W, A, 5 + C)``.

    The last axis holds ``tx, ty, tw, th, objectness_logit, class_logits...``.
    Scales are ordered coarse first, matching ``strides``.
    """

    scales: list[torch.Tensor]
    strides: tuple[int, ...]
    anchors: tuple

    @property
    def batch_size(self) -> int:
        return self.scales[0].shape[0]

    def flat(self) -> torch.Tensor:
        """All anchor slots as ``(B, N, 5 + C)``; order is scale, row, col, anchor."""
        return torch.cat([s.reshape(s.shape[0], -1, s.shape[-1]) for s in self.scales], dim=1)

    def slot_offsets(self) -> list[int]:
        out, acc = [], 0
        for s in self.scales:
            out.append(acc)
            acc += s.shape[1] * s.shape[2] * s.shape[3]
        return out

    def image(self, i: int) -> "RawPrediction":
        return RawPrediction([s[i : i + 1] for s in self.scales], self.strides, self.anchors)


class Detector(nn.Module):
    def __init__(self, config: DetectorConfig):
        super().__init__()
        self.config = config
        w = config.channel_widths
        m = config.bn_momentum
        n_out = config.anchors_per_scale * (5 + config.num_classes)
        self.n_pools = config.num_pools

        self.backbone = nn.ModuleList()
        c_in = 3
        for c in w:
            self.backbone.append(conv_block(c_in, c, 3, m))
            c_in = c
        route_c = w[self.n_pools - 1]
        neck = max(1, w[6] // 4)
        up = max(1, neck // 2)
        self.bottleneck = conv_block(w[6], neck, 1, m)
        self.coarse_head = conv_block(neck, max(1, w[6] // 2), 3, m)
        self.coarse_out = nn.Conv2d(max(1, w[6] // 2), n_out, 1)
        self.route = conv_block(neck, up, 1, m)
        self.fine_head = conv_block(up + route_c, neck, 3, m)
        self.fine_out = nn.Conv2d(neck, n_out, 1)

    def reset_parameters(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(seed)
        for mod in self.modules():
            if isinstance(mod, nn.Conv2d):
                fan_in = mod.in_channels * mod.kernel_size[0] * mod.kernel_size[1]
                bound = math.sqrt(3.0 / fan_in)
                with torch.no_grad():
                    mod.weight.copy_(torch.empty_like(mod.weight).uniform_(-bound, bound, generator=gen))
                    if mod.bias is not None:
                        mod.bias.zero_()
            elif isinstance(mod, nn.BatchNorm2d):
                mod.reset_parameters()
        a, c = self.config.anchors_per_scale, self.config.num_classes
        for out in (self.coarse_out, self.fine_out):
            with torch.no_grad():
                bias = out.bias.view(a, 5 + c)
                bias[:, 4] = math.log(0.01 / 0.99)  # objectness prior

    def forward(self, x: torch.Tensor) -> RawPrediction:
        cfg = self.config
        route = None
        for i, block in enumerate(self.backbone):
            x = block(x)
            if i < self.n_pools:
                if i == self.n_pools - 1:
                    route = x
                x = F.max_pool2d(x, 2)
        b = self.bottleneck(x)
        coarse = self.coarse_out(self.coarse_head(b))
        u = F.interpolate(self.route(b), scale_factor=2, mode="nearest")
        fine = self.fine_out(self.fine_head(torch.cat([u, route], dim=1)))
        scales = []
        for t in (coarse, fine):
            bsz, _, h, w = t.shape
            t = t.view(bsz, cfg.anchors_per_scale, 5 + cfg.num_classes, h, w)
            scales.append(t.permute(0, 3, 4, 1, 2).contiguous())
        return RawPrediction(scales, cfg.strides, cfg.anchor_sizes)


def build_detector(config: DetectorConfig, dtype: torch.dtype = torch.float32) -> Detector:
    config.validate()
    det = Detector(config)
    det.reset_parameters(config.seed)
    return det.to(dtype)


def count_parameters(detector: nn.Module) -> int:
    return sum(p.numel() for p in detector.parameters())


def forward(detector: Detector, images) -> RawPrediction:
    """Run the detector on ``(B, S, S, 3)`` images in ``[0, 1]``.

    Accepts numpy arrays or tensors. ``S`` must equal ``config.input_size``.
    """
    cfg = detector.config
    x = torch.as_tensor(np.asarray(images) if not torch.is_tensor(images) else images)
    if x.ndim != 4 or x.shape[-1] != 3:
        raise ValueError(f"expected (B, S, S, 3) images, got {tuple(x.shape)}")
    if x.shape[1] != cfg.input_size or x.shape[2] != cfg.input_size:
        raise ValueError(f"image size {tuple(x.shape[1:3])} != input_size {cfg.input_size}")
    param = next(detector.parameters())
    x = x.to(param.dtype).permute(0, 3, 1, 2)
    raw = detector(x)
    for s in raw.scales:
        if not torch.isfinite(s).all():
            raise FloatingPointError("detector produced non-finite outputs")
    return raw


def to_nchw(images: np.ndarray | torch.Tensor, dtype=torch.float32) -> torch.Tensor:
    x = torch.as_tensor(images)
    if x.dtype == torch.uint8:
        return x.permute(0, 3, 1, 2).to(dtype) / 255.0
    return x.permute(0, 3, 1, 2).to(dtype)


# -- decoding ---------------------------------------------------------------


@dataclass(frozen=True)
class DecodedDetection:
    box: BoundingBox
    objectness: float
    class_probs: np.ndarray


@dataclass
class Decoded:
    """Struct-of-arrays view of one image's decoded anchor slots."""

    boxes: np.ndarray  # (N, 4) corners
    objectness: np.ndarray  # (N,)
    class_probs: np.ndarray  # (N, C)

    def __len__(self) -> int:
        return len(self.boxes)

    def __getitem__(self, i: int) -> DecodedDetection:
        return DecodedDetection(BoundingBox(*self.boxes[i]), float(self.objectness[i]), self.class_probs[i])

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @classmethod
    def from_records(cls, records) -> "Decoded":
        records = list(records)
        if not records:
            return cls(np.zeros((0, 4)), np.zeros(0), np.zeros((0, 0)))
        return cls(
            np.array([r.box.as_tuple() for r in records], dtype=np.float64),
            np.array([r.objectness for r in records], dtype=np.float64),
            np.stack([np.asarray(r.class_probs, dtype=np.float64) for r in records]),
        )


def slot_geometry(grid: int, stride: int, anchors, device=None, dtype=torch.float32):
    """Cell origins ``(H, W, 1, 2)`` and anchor sizes ``(1, 1, A, 2)`` for one scale."""
    ys, xs = torch.meshgrid(torch.arange(grid), torch.arange(grid), indexing="ij")
    cells = torch.stack([xs, ys], dim=-1).to(dtype=dtype, device=device).unsqueeze(2)
    anchor_t = torch.tensor(anchors, dtype=dtype, device=device).view(1, 1, -1, 2)
    return cells, anchor_t


def decode_boxes(t: torch.Tensor, cells: torch.Tensor, stride, anchor_wh: torch.Tensor,
                 max_scale: float | None = None) -> torch.Tensor:
    """Map ``(..., 4)`` raw offsets to corner boxes in pixels.

    ``max_scale`` clamps ``exp(tw), exp(th)`` (used only inside the loss).
    """
    xy = (torch.sigmoid(t[..., :2]) + cells) * stride
    scale = torch.exp(t[..., 2:4])
    if max_scale is not None:
        scale = scale.clamp(max=max_scale)
    wh = anchor_wh * scale
    return torch.cat([xy - 0.5 * wh, xy + 0.5 * wh], dim=-1)


def decode(raw: RawPrediction, config: DetectorConfig) -> list[Decoded]:
    """Decode every anchor slot of every image (same order as ``raw.flat()``)."""
    per_scale = []
    with torch.no_grad():
        for s, stride, anchors in zip(raw.scales, config.strides, config.anchor_sizes):
            _, h, w, _, _ = s.shape
            if h != w:
                raise ValueError("non-square grid")
            cells, anchor_t = slot_geometry(h, stride, anchors, dtype=s.dtype)
            boxes = decode_boxes(s[..., :4], cells, stride, anchor_t)
            obj = torch.sigmoid(s[..., 4])
            cls = torch.sigmoid(s[..., 5:])
            b = s.shape[0]
            per_scale.append((boxes.reshape(b, -1, 4), obj.reshape(b, -1), cls.reshape(b, -1, config.num_classes)))
    boxes = torch.cat([p[0] for p in per_scale], 1).double().numpy()
    obj = torch.cat([p[1] for p in per_scale], 1).double().numpy()
    cls = torch.cat([p[2] for p in per_scale], 1).double().numpy()
    if not (np.isfinite(boxes).all() and np.isfinite(obj).all()):
        raise FloatingPointError("non-finite decoded boxes (tw/th overflow?)")
    return [Decoded(boxes[i], obj[i], cls[i]) for i in range(boxes.shape[0])]


# -- anchors ----------------------------------------------------------------


def _shape_iou(wh: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    inter = np.minimum(wh[:, None, 0], centroids[None, :, 0]) * np.minimum(wh[:, None, 1], centroids[None, :, 1])
    area = wh[:, 0] * wh[:, 1]
    c_area = centroids[:, 0] * centroids[:, 1]
    return inter / (area[:, None] + c_area[None, :] - inter)


def kmeans_anchors(wh, anchors_per_scale: int = 3, seed: int = 0, iters: int = 100) -> tuple:
    """Cluster box sizes with a ``1 - IoU`` distance into two scales of anchors.

    Returns ``(coarse_anchors, fine_anchors)``; the larger half by area goes
    to the coarse scale.
    """
    wh = np.asarray(wh, dtype=np.float64).reshape(-1, 2)
    k = 2 * anchors_per_scale
    if len(wh) == 0:
        raise ValueError("no boxes to cluster")
    rng = np.random.default_rng(seed)
    # quantile init keeps the result stable across seeds
    order = np.argsort(wh[:, 0] * wh[:, 1], kind="stable")
    idx = order[np.linspace(0, len(wh) - 1, k).round().astype(int)]
    centroids = wh[idx] + rng.uniform(-1e-3, 1e-3, size=(k, 2))
    for _ in range(iters):
        assign = np.argmax(_shape_iou(wh, centroids), axis=1)
        new = np.array([
            np.median(wh[assign == j], axis=0) if np.any(assign == j) else centroids[j] for j in range(k)
        ])
        if np.allclose(new, centroids):
            break
        centroids = new
    centroids = centroids[np.argsort(centroids[:, 0] * centroids[:, 1], kind="stable")]
    centroids = np.round(centroids, 2)
    fine = tuple(tuple(map(float, c)) for c in centroids[:anchors_per_scale])
    coarse = tuple(tuple(map(float, c)) for c in centroids[anchors_per_scale:])
    return (coarse, fine)


# -- checkpoints ------------------------------------------------------------


def save_checkpoint(detector: Detector, path, extra: dict | None = None) -> None:
    state = detector.state_dict()
    index, chunks, offset = [], [], 0
    for name, t in state.items():
        arr = t.detach().cpu().contiguous().numpy()
        raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        index.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = {
        "format_version": FORMAT_VERSION,
        "config": detector.config.to_dict(),
        "config_hash": detector.config.config_hash(),
        "seed": detector.config.seed,
        "tensors": index,
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for c in chunks:
            fh.write(c)


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise CheckpointError(f"{path}: bad magic header (expected {MAGIC!r})")
    pos = len(MAGIC)
    try:
        (n,) = struct.unpack_from("<Q", data, pos)
        header = json.loads(data[pos + 8 : pos + 8 + n])
    except (struct.error, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {header.get('format_version')}")
    base = pos + 8 + n
    arrays = {}
    for entry in header["tensors"]:
        start = base + entry["offset"]
        buf = data[start : start + entry["nbytes"]]
        if len(buf) != entry["nbytes"]:
            raise CheckpointError(f"{path}: truncated tensor {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(buf, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"]).copy()
    return header, arrays


def load_checkpoint(path) -> tuple[Detector, dict]:
    header, arrays = read_checkpoint(path)
    config = DetectorConfig.from_dict(header["config"])
    if config.config_hash() != header["config_hash"]:
        raise CheckpointError(f"{path}: stored config hash does not match stored config")
    floats = [v for v in arrays.values() if v.dtype.kind == "f"]
    dtype = torch.from_numpy(floats[0]).dtype if floats else torch.float32
    det = Detector(config).to(dtype)
    state = {k: torch.from_numpy(v) for k, v in arrays.items()}
    missing = set(det.state_dict()) ^ set(state)
    if missing:
        raise CheckpointError(f"{path}: parameter set mismatch: {sorted(missing)[:5]}")
    det.load_state_dict(state)
    return det, header
