import math

import numpy as np
import pytest
import torch

from mcdet.model import (
    CheckpointError,
    Decoded,
    DetectorConfig,
    RawPrediction,
    build_detector,
    count_parameters,
    decode,
    forward,
    kmeans_anchors,
    load_checkpoint,
    reference_config,
    save_checkpoint,
)

from conftest import SMALL_ANCHORS


def raw_from_flat_values(config, values_per_scale):
    scales = [torch.as_tensor(v, dtype=torch.float64) for v in values_per_scale]
    return RawPrediction(scales, config.strides, config.anchor_sizes)


class TestConfig:
    def test_reference_grids(self):
        assert reference_config().grid_sizes() == (13, 26)

    def test_desk_grids(self, small_config):
        assert small_config.grid_sizes() == (3, 6)
        assert small_config.num_slots() == 3 * 3 * 3 + 6 * 6 * 3 == 135

    @pytest.mark.parametrize("kw", [
        dict(input_size=100),
        dict(strides=(32, 8)),
        dict(anchors_per_scale=2),
        dict(num_classes=0),
        dict(channel_widths=(4, 8)),
    ])
    def test_rejects_invalid(self, kw):
        base = dict(num_classes=3, input_size=96, anchor_sizes=SMALL_ANCHORS)
        base.update(kw)
        with pytest.raises(ValueError):
            DetectorConfig(**base)

    def test_reference_layout_has_thirteen_convs(self):
        det = build_detector(reference_config())
        convs = [m for m in det.modules() if isinstance(m, torch.nn.Conv2d)]
        assert len(convs) == 13
        assert [c.out_channels for c in convs[:7]] == [16, 32, 64, 128, 256, 512, 1024]


class TestForward:
    def test_reference_output_shapes(self):
        det = build_detector(reference_config(num_classes=80))
        det.eval()
        with torch.no_grad():
            raw = forward(det, torch.zeros(1, 416, 416, 3))
        assert [tuple(s.shape) for s in raw.scales] == [(1, 13, 13, 3, 85), (1, 26, 26, 3, 85)]

    def test_batch_shapes(self, small_config):
        det = build_detector(small_config)
        raw = forward(det, torch.rand(2, 96, 96, 3, generator=torch.Generator().manual_seed(0)))
        assert raw.flat().shape == (2, 135, 8)

    def test_zero_image_finite(self, small_config):
        det = build_detector(small_config)
        raw = forward(det, np.zeros((1, 96, 96, 3)))
        assert all(torch.isfinite(s).all() for s in raw.scales)

    def test_duplicate_rows_identical(self, small_config):
        det = build_detector(small_config).eval()
        img = torch.rand(1, 96, 96, 3, generator=torch.Generator().manual_seed(0))
        with torch.no_grad():
            raw = forward(det, torch.cat([img, img]))
        flat = raw.flat()
        assert torch.equal(flat[0], flat[1])

    def test_rejects_shape_mismatch(self, small_config):
        det = build_detector(small_config)
        with pytest.raises(ValueError):
            forward(det, torch.zeros(1, 64, 64, 3))
        with pytest.raises(ValueError):
            forward(det, torch.zeros(1, 96, 96, 1))

    def test_grid_times_stride_is_input(self, small_config):
        for size in (64, 96, 128, 160):
            cfg = DetectorConfig(num_classes=2, input_size=size, anchor_sizes=SMALL_ANCHORS,
                                 channel_widths=(2, 2, 2, 2, 2, 4, 4))
            det = build_detector(cfg).eval()
            with torch.no_grad():
                raw = forward(det, torch.zeros(1, size, size, 3))
            for s, stride in zip(raw.scales, cfg.strides):
                assert s.shape[1] * stride == size and s.shape[2] * stride == size


class TestDeterminism:
    def test_same_seed_same_parameters(self, small_config):
        a, b = build_detector(small_config), build_detector(small_config)
        for (na, pa), (nb, pb) in zip(a.state_dict().items(), b.state_dict().items()):
            assert na == nb and torch.equal(pa, pb)

    def test_different_seed_differs(self, small_config):
        a = build_detector(small_config)
        b = build_detector(DetectorConfig(**{**small_config.to_dict(), "seed": 2}))
        assert not torch.equal(a.backbone[0][0].weight, b.backbone[0][0].weight)

    def test_decode_forward_deterministic(self, small_config):
        img = np.random.default_rng(0).random((1, 96, 96, 3))
        outs = []
        for _ in range(2):
            det = build_detector(small_config).eval()
            with torch.no_grad():
                outs.append(decode(forward(det, img), small_config)[0])
        assert np.array_equal(outs[0].boxes, outs[1].boxes)
        assert np.array_equal(outs[0].class_probs, outs[1].class_probs)


class TestDecode:
    def config(self):
        anchors = (((32.0, 32.0), (64.0, 64.0), (80.0, 80.0)), ((8.0, 8.0), (16.0, 16.0), (24.0, 24.0)))
        return DetectorConfig(num_classes=2, input_size=96, anchor_sizes=anchors)

    def zero_raw(self, cfg):
        return raw_from_flat_values(cfg, [np.zeros((1, 3, 3, 3, 7)), np.zeros((1, 6, 6, 3, 7))])

    def test_zero_offsets_at_origin(self):
        cfg = self.config()
        d = decode(self.zero_raw(cfg), cfg)[0]
        # slot 0 = coarse scale, cell (0, 0), anchor 0 (32x32)
        np.testing.assert_allclose(d.boxes[0], [0, 0, 32, 32])
        assert d.objectness[0] == 0.5
        np.testing.assert_array_equal(d.class_probs[0], [0.5, 0.5])

    def test_log_two_doubles_width(self):
        cfg = self.config()
        raw = self.zero_raw(cfg)
        raw.scales[0][0, 0, 0, 0, 2] = math.log(2)
        d = decode(raw, cfg)[0]
        assert d.boxes[0, 2] - d.boxes[0, 0] == pytest.approx(64.0, rel=1e-12)
        assert d.boxes[0, 3] - d.boxes[0, 1] == pytest.approx(32.0, rel=1e-12)

    def test_records_view(self):
        cfg = self.config()
        d = decode(self.zero_raw(cfg), cfg)[0]
        rec = d[0]
        assert rec.box.as_tuple() == (0, 0, 32, 32) and rec.objectness == 0.5
        assert len(list(d)) == len(d) == 135

    def test_overflow_is_signalled(self):
        cfg = self.config()
        raw = self.zero_raw(cfg)
        raw.scales[0][0, 0, 0, 0, 2] = 1e4
        with pytest.raises(FloatingPointError):
            decode(raw, cfg)

    def test_centers_inside_responsible_cell(self):
        cfg = self.config()
        gen = torch.Generator().manual_seed(5)
        scales = [torch.randn(1, g, g, 3, 7, generator=gen, dtype=torch.float64) * 8 for g in (3, 6)]
        d = decode(RawPrediction(scales, cfg.strides, cfg.anchor_sizes), cfg)[0]
        cx = 0.5 * (d.boxes[:, 0] + d.boxes[:, 2])
        cy = 0.5 * (d.boxes[:, 1] + d.boxes[:, 3])
        k = 0
        for grid, stride in zip((3, 6), cfg.strides):
            for row in range(grid):
                for col in range(grid):
                    for _ in range(3):
                        assert col * stride <= cx[k] < (col + 1) * stride
                        assert row * stride <= cy[k] < (row + 1) * stride
                        k += 1


class TestAnchors:
    def test_split_by_area(self):
        rng = np.random.default_rng(0)
        s = rng.uniform(10, 60, size=500)
        coarse, fine = kmeans_anchors(np.stack([s, s], 1), 3, seed=0)
        assert len(coarse) == len(fine) == 3
        assert max(w * h for w, h in fine) <= min(w * h for w, h in coarse)

    def test_recovers_separated_clusters(self):
        wh = np.repeat([[10, 10], [20, 20], [30, 30], [45, 45], [60, 60], [80, 80]], 20, axis=0).astype(float)
        coarse, fine = kmeans_anchors(wh, 3, seed=0)
        assert fine == ((10.0, 10.0), (20.0, 20.0), (30.0, 30.0))
        assert coarse == ((45.0, 45.0), (60.0, 60.0), (80.0, 80.0))


class TestCheckpoint:
    def test_round_trip(self, small_config, tmp_path):
        det = build_detector(small_config)
        # perturb BN running stats so they are not defaults
        det.train()
        det(torch.rand(2, 3, 96, 96, generator=torch.Generator().manual_seed(0)))
        path = tmp_path / "m.mcdet"
        save_checkpoint(det, path, {"epoch": 3})
        loaded, header = load_checkpoint(path)
        assert header["extra"] == {"epoch": 3}
        assert loaded.config == small_config
        for (k, a), (_, b) in zip(det.state_dict().items(), loaded.state_dict().items()):
            assert torch.equal(a, b), k
        assert path.read_bytes().startswith(b"MCDET1")

    def test_double_precision_round_trip(self, small_config, tmp_path):
        det = build_detector(small_config, torch.float64)
        save_checkpoint(det, tmp_path / "d.mcdet")
        loaded, _ = load_checkpoint(tmp_path / "d.mcdet")
        assert next(loaded.parameters()).dtype == torch.float64

    def test_bad_magic(self, small_config, tmp_path):
        path = tmp_path / "bad.mcdet"
        save_checkpoint(build_detector(small_config), path)
        data = bytearray(path.read_bytes())
        data[:6] = b"XXXXXX"
        path.write_bytes(bytes(data))
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(path)

    def test_tampered_config_hash(self, small_config, tmp_path):
        path = tmp_path / "t.mcdet"
        save_checkpoint(build_detector(small_config), path)
        data = path.read_bytes().replace(b'"num_classes": 3', b'"num_classes": 4')
        path.write_bytes(data)
        with pytest.raises(CheckpointError):
            load_checkpoint(path)


def test_parameter_count_scales_with_widths(small_config):
    small = count_parameters(build_detector(small_config))
    big = count_parameters(build_detector(DetectorConfig(**{**small_config.to_dict(),
                                                             "channel_widths": [8, 16, 16, 32, 32, 64, 64]})))
    assert big > 3 * small
