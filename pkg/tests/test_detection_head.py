import math

import numpy as np
import pytest
import torch

from radefusion.dataio import Box3D
from radefusion.detection_head import (
    DetectionHead,
    HeadOutput,
    bev_params,
    decode,
    decode_bev_at_bins,
    gaussian_support_area,
    read_detections_jsonl,
    render_targets,
    write_detections_jsonl,
)
from radefusion.errors import ConfigError
from radefusion.geometry import GridSpec


@pytest.fixture
def grid():
    return GridSpec(
        n_range=32, n_azimuth=16, n_elevation=4,
        range_bounds_m=(0.0, 72.0),
        azimuth_bounds_rad=(-math.pi / 4, math.pi / 4),
        elevation_bounds_m=(-2.0, 6.0),
    )


def _box_at(grid, bi, bj, frac_r=0.0, frac_a=0.0, dims=(4.0, 2.0, 1.5), yaw=0.3, cls=0):
    r = grid.range_bounds_m[0] + (bi + frac_r + 0.5) * grid.range_step
    az = grid.azimuth_bounds_rad[0] + (bj + frac_a + 0.5) * grid.azimuth_step
    return Box3D(
        center=(r * math.cos(az), r * math.sin(az), 0.75),
        dims=dims, yaw=yaw, class_id=cls,
    )


class TestHeadForward:
    def test_shapes_and_ranges(self, desk_cfg):
        torch.manual_seed(0)
        head = DetectionHead(channels=32)
        m_f = torch.randn(2, 32, 16, 32)
        out = head(m_f)
        assert out.heatmaps.shape == (2, 32, 16, 5)  # five road-user classes
        assert out.regression.shape == (2, 32, 16, 8)
        assert torch.all(out.heatmaps > 0) and torch.all(out.heatmaps < 1)

    def test_regression_channel_contract(self):
        with pytest.raises(ConfigError):
            HeadOutput(heatmaps=torch.rand(1, 4, 4, 5), regression=torch.rand(1, 4, 4, 6))


class TestRenderTargets:
    def test_single_box_gaussian_values(self, grid):
        box = _box_at(grid, 10, 7)
        t = render_targets([box], grid, sigma=0.75)
        assert t.heatmap[10, 7, 0] == 1.0
        # One bin away: exp(-1 / (2 * 0.75^2)) = 0.41111229...
        expect = math.exp(-1.0 / (2.0 * 0.75**2))
        assert abs(expect - 0.4111122905071874) < 1e-12
        assert abs(t.heatmap[11, 7, 0] - expect) < 1e-6
        assert abs(t.heatmap[10, 8, 0] - expect) < 1e-6
        assert t.fg_mask[10, 7]
        assert t.fg_mask.sum() == 1

    def test_two_distant_boxes_two_peaks(self, grid):
        boxes = [_box_at(grid, 5, 3), _box_at(grid, 25, 12)]
        t = render_targets(boxes, grid, sigma=0.75)
        assert t.heatmap[5, 3, 0] == 1.0
        assert t.heatmap[25, 12, 0] == 1.0
        assert (t.heatmap[:, :, 0] == 1.0).sum() == 2

    def test_max_combination_keeps_targets_below_one(self, grid):
        boxes = [_box_at(grid, 10, 7), _box_at(grid, 12, 7)]
        t = render_targets(boxes, grid, sigma=3.0)
        assert t.heatmap.max() <= 1.0

    def test_sigma3_support_strictly_larger(self, grid):
        box = _box_at(grid, 16, 8)
        small = render_targets([box], grid, sigma=0.75)
        large = render_targets([box], grid, sigma=3.0)
        n_small = (small.heatmap[:, :, 0] > 0.1).sum()
        n_large = (large.heatmap[:, :, 0] > 0.1).sum()
        assert n_large > n_small
        assert gaussian_support_area(3.0) > gaussian_support_area(0.75)

    def test_out_of_grid_skipped_with_count(self, grid):
        far = Box3D(center=(200.0, 0.0, 0.5), dims=(1, 1, 1), yaw=0, class_id=1)
        t = render_targets([far, _box_at(grid, 4, 4)], grid)
        assert t.n_skipped == 1
        assert len(t.boxes) == 1

    def test_fractional_offsets_stored(self, grid):
        box = _box_at(grid, 10, 7, frac_r=0.3, frac_a=-0.2)
        t = render_targets([box], grid)
        assert abs(t.regression[10, 7, 0] - 0.3) < 1e-5
        assert abs(t.regression[10, 7, 1] + 0.2) < 1e-5

    def test_sigma_validation(self, grid):
        with pytest.raises(ValueError):
            render_targets([], grid, sigma=0.0)


class TestDecode:
    def _head_from_targets(self, t):
        return HeadOutput(
            heatmaps=torch.from_numpy(t.heatmap).unsqueeze(0),
            regression=torch.from_numpy(t.regression).unsqueeze(0),
        )

    def test_render_decode_round_trip(self, grid):
        box = _box_at(grid, 14, 9, frac_r=0.27, frac_a=-0.41, dims=(3.5, 1.7, 1.4), yaw=-1.1, cls=2)
        t = render_targets([box], grid)
        dets = decode(self._head_from_targets(t), grid, score_threshold=0.3, top_k=10)
        assert len(dets) == 1
        d = dets[0]
        assert d.class_id == 2
        assert np.hypot(d.center[0] - box.center[0], d.center[1] - box.center[1]) < 1e-3
        assert abs(d.center[2] - box.center[2]) < 1e-3
        assert abs(d.yaw - box.yaw) < 1e-3
        assert np.allclose(d.dims, box.dims, atol=1e-3)

    def test_empty_heatmap(self, grid):
        out = HeadOutput(
            heatmaps=torch.full((1, 32, 16, 5), 0.05),
            regression=torch.zeros(1, 32, 16, 8),
        )
        assert decode(out, grid, score_threshold=0.3) == []

    def test_adjacent_equal_peaks_tie_break(self, grid):
        heat = torch.full((1, 32, 16, 5), 0.01)
        heat[0, 10, 7, 0] = 0.9
        heat[0, 10, 8, 0] = 0.9
        out = HeadOutput(heatmaps=heat, regression=torch.zeros(1, 32, 16, 8))
        dets = decode(out, grid, score_threshold=0.3)
        assert len(dets) == 1  # lowest linear index survives
        r = math.hypot(dets[0].center[0], dets[0].center[1])
        az = math.atan2(dets[0].center[1], dets[0].center[0])
        rb, ab = grid.bin_coords(r, az)
        assert round(float(rb)) == 10 and round(float(ab)) == 7

    def test_monotone_in_threshold(self, grid):
        torch.manual_seed(3)
        out = HeadOutput(
            heatmaps=torch.rand(1, 32, 16, 5),
            regression=torch.randn(1, 32, 16, 8) * 0.1,
        )
        counts = [len(decode(out, grid, score_threshold=thr)) for thr in (0.1, 0.3, 0.5, 0.9)]
        assert counts == sorted(counts, reverse=True)

    def test_top_k_cap(self, grid):
        torch.manual_seed(4)
        out = HeadOutput(
            heatmaps=torch.rand(1, 32, 16, 5),
            regression=torch.zeros(1, 32, 16, 8),
        )
        dets = decode(out, grid, score_threshold=0.01, top_k=2)
        per_class = {}
        for d in dets:
            per_class[d.class_id] = per_class.get(d.class_id, 0) + 1
        assert max(per_class.values()) <= 2

    def test_batched_input_rejected(self, grid):
        out = HeadOutput(heatmaps=torch.rand(2, 32, 16, 5), regression=torch.rand(2, 32, 16, 8))
        with pytest.raises(ConfigError):
            decode(out, grid)


class TestDecodeAtBins:
    def test_matches_full_decode(self, grid):
        box = _box_at(grid, 20, 11, frac_r=0.1, frac_a=0.2, yaw=0.8)
        t = render_targets([box], grid)
        reg = torch.from_numpy(t.regression).unsqueeze(0)
        params = decode_bev_at_bins(
            reg, torch.zeros(1, dtype=torch.long), torch.from_numpy(t.center_bins), grid
        )
        expect = bev_params([box])
        assert torch.allclose(params, expect, atol=1e-4)


class TestDetectionsJsonl:
    def test_round_trip(self, tmp_path, grid):
        boxes = [_box_at(grid, 5, 5, cls=1), _box_at(grid, 20, 9, cls=3)]
        path = tmp_path / "dets.jsonl"
        write_detections_jsonl({"f0": boxes, "f1": []}, path)
        back = read_detections_jsonl(path)
        assert set(back) == {"f0"}
        assert [b.to_dict() for b in back["f0"]] == [b.to_dict() for b in boxes]
