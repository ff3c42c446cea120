import math

import numpy as np
import pytest
import torch

from radefusion.dataio import Box3D
from radefusion.detection_head import HeadOutput, bev_params, render_targets
from radefusion.errors import ConfigError
from radefusion.geometry import GridSpec
from radefusion.losses import (
    LossWeights,
    box_to_gaussian,
    focal_loss,
    gwd_distance_sq,
    gwd_loss,
    smooth_l1,
    total_loss,
    training_loss,
)


def focal_loop_oracle(pred, target, alpha=2.0, beta=4.0, eps=1e-6):
    """Scalar re-implementation of the penalty-reduced focal loss."""
    total = 0.0
    n_pos = 0
    p_flat = pred.reshape(-1)
    t_flat = target.reshape(-1)
    for p, t in zip(p_flat.tolist(), t_flat.tolist()):
        p = min(max(p, eps), 1 - eps)
        if t == 1.0:
            total += -((1 - p) ** alpha) * math.log(p)
            n_pos += 1
        else:
            total += -((1 - t) ** beta) * (p**alpha) * math.log(1 - p)
    return total / max(n_pos, 1)


def gwd_eig_oracle(box_a: Box3D, box_b: Box3D) -> float:
    """Squared Wasserstein distance via numerical eigendecompositions."""
    m1, s1 = box_to_gaussian(box_a)
    m2, s2 = box_to_gaussian(box_b)
    w1, v1 = np.linalg.eigh(s1)
    s1_half = v1 @ np.diag(np.sqrt(w1)) @ v1.T
    inner = s1_half @ s2 @ s1_half
    wi, _ = np.linalg.eigh(inner)
    cross = np.sum(np.sqrt(np.clip(wi, 0.0, None)))
    return float(np.sum((m1 - m2) ** 2) + np.trace(s1) + np.trace(s2) - 2.0 * cross)


def random_box(rng, cls=0) -> Box3D:
    return Box3D(
        center=(rng.uniform(5, 60), rng.uniform(-5, 5), rng.uniform(0, 2)),
        dims=(rng.uniform(0.5, 8), rng.uniform(0.4, 3), rng.uniform(0.5, 3)),
        yaw=rng.uniform(-np.pi, np.pi),
        class_id=cls,
    )


class TestFocalLoss:
    def test_near_perfect_prediction(self):
        t = torch.zeros(1, 8, 8, 2)
        t[0, 3, 4, 0] = 1.0
        p = torch.full_like(t, 1e-6)
        p[0, 3, 4, 0] = 1.0 - 1e-6
        assert focal_loss(p, t).item() < 1e-4

    def test_matches_loop_oracle(self):
        torch.manual_seed(0)
        t = torch.zeros(6, 5, 1)
        t[2, 2, 0] = 1.0
        t[4, 1, 0] = math.exp(-1 / 1.125)
        p = torch.full_like(t, 0.5)
        expect = focal_loop_oracle(p, t)
        assert abs(focal_loss(p, t).item() - expect) < 1e-6
        # And for random predictions.
        p = torch.rand(6, 5, 1).clamp(0.05, 0.95)
        assert abs(focal_loss(p, t).item() - focal_loop_oracle(p, t)) < 1e-6

    def test_background_only(self):
        t = torch.zeros(1, 8, 8, 3)
        p = torch.full_like(t, 1e-6)
        assert focal_loss(p, t).item() < 1e-4

    def test_shape_mismatch(self):
        with pytest.raises(ConfigError):
            focal_loss(torch.rand(1, 4, 4, 2), torch.rand(1, 4, 4, 3))


class TestBoxToGaussian:
    def test_unit_square(self):
        b = Box3D(center=(3, 4, 0), dims=(2, 2, 1), yaw=0.0, class_id=0)
        mean, cov = box_to_gaussian(b)
        assert np.allclose(mean, [3, 4])
        assert np.allclose(cov, np.eye(2))

    def test_rotated_by_half_pi(self):
        b = Box3D(center=(0, 0, 0), dims=(4, 2, 1), yaw=math.pi / 2, class_id=0)
        _, cov = box_to_gaussian(b)
        # R(pi/2) diag(4, 1) R(pi/2)^T = diag(1, 4), by hand.
        assert np.allclose(cov, np.diag([1.0, 4.0]), atol=1e-9)

    def test_spd_for_random_boxes(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            _, cov = box_to_gaussian(random_box(rng))
            assert np.allclose(cov, cov.T)
            assert np.all(np.linalg.eigvalsh(cov) > 0)


class TestGwd:
    def test_identical_boxes_zero(self):
        rng = np.random.default_rng(2)
        b = random_box(rng)
        assert abs(gwd_loss(b, b, tau=1.0).item()) < 1e-9

    def test_pure_center_shift(self):
        b1 = Box3D(center=(10, 2, 0), dims=(4, 2, 1), yaw=0.7, class_id=0)
        b2 = Box3D(center=(11.5, 0.5, 0), dims=(4, 2, 1), yaw=0.7, class_id=0)
        d2 = gwd_distance_sq(bev_params([b1], torch.float64), bev_params([b2], torch.float64))
        delta2 = 1.5**2 + 1.5**2
        assert abs(d2.item() - delta2) < 1e-9
        assert abs(gwd_eig_oracle(b1, b2) - delta2) < 1e-9

    def test_against_eig_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            a, b = random_box(rng), random_box(rng)
            d2 = gwd_distance_sq(
                bev_params([a], torch.float64), bev_params([b], torch.float64)
            ).item()
            expect = gwd_eig_oracle(a, b)
            assert abs(d2 - expect) <= 1e-6 * max(abs(expect), 1.0)

    def test_symmetry(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            a, b = random_box(rng), random_box(rng)
            assert abs(gwd_loss(a, b).item() - gwd_loss(b, a).item()) < 1e-9

    def test_joint_rotation_invariance(self):
        rng = np.random.default_rng(5)

        def rotate(box, theta):
            c, s = math.cos(theta), math.sin(theta)
            x, y, z = box.center
            return Box3D(
                center=(c * x - s * y, s * x + c * y, z),
                dims=box.dims, yaw=box.yaw + theta, class_id=box.class_id,
            )

        for _ in range(20):
            a, b = random_box(rng), random_box(rng)
            theta = rng.uniform(0, 2 * np.pi)
            d2 = gwd_distance_sq(bev_params([a], torch.float64), bev_params([b], torch.float64))
            d2r = gwd_distance_sq(
                bev_params([rotate(a, theta)], torch.float64),
                bev_params([rotate(b, theta)], torch.float64),
            )
            assert abs(d2.item() - d2r.item()) <= 1e-6 * max(d2.item(), 1.0)

    def test_degenerate_dims_guarded(self):
        a = bev_params([Box3D(center=(1, 1, 0), dims=(1e-9, 1e-9, 1), yaw=0, class_id=0)],
                       torch.float64)
        b = bev_params([Box3D(center=(1, 1, 0), dims=(2, 1, 1), yaw=0, class_id=0)], torch.float64)
        # dims floor keeps this finite; Box3D itself rejects zero dims.
        a = a.clone()
        a[0, 2] = 0.0
        a[0, 3] = 0.0
        assert torch.isfinite(gwd_distance_sq(a, b)).all()


class TestSmoothL1:
    def test_zero_for_equal(self):
        x = torch.rand(2, 4, 4, 6)
        mask = torch.ones(2, 4, 4, dtype=torch.bool)
        assert smooth_l1(x, x.clone(), mask).item() == 0.0

    def test_quadratic_branch(self):
        p = torch.full((1, 1, 1, 4), 0.5)
        t = torch.zeros_like(p)
        mask = torch.ones(1, 1, 1, dtype=torch.bool)
        assert abs(smooth_l1(p, t, mask).item() - 0.125) < 1e-7

    def test_linear_branch(self):
        p = torch.full((1, 1, 1, 4), 2.0)
        t = torch.zeros_like(p)
        mask = torch.ones(1, 1, 1, dtype=torch.bool)
        assert abs(smooth_l1(p, t, mask).item() - 1.5) < 1e-7

    def test_mask_selects_foreground(self):
        p = torch.zeros(1, 2, 2, 3)
        t = torch.zeros_like(p)
        t[0, 0, 0] = 2.0  # only this bin differs, but it is masked out
        mask = torch.zeros(1, 2, 2, dtype=torch.bool)
        mask[0, 1, 1] = True
        assert smooth_l1(p, t, mask).item() == 0.0


class TestTotalLoss:
    def _setup(self, grid):
        box = Box3D(center=(20.0, 1.0, 0.8), dims=(4, 2, 1.6), yaw=0.4, class_id=1)
        t = render_targets([box], grid)
        heat = torch.from_numpy(t.heatmap).unsqueeze(0)
        reg = torch.from_numpy(t.regression).unsqueeze(0)
        fg = torch.from_numpy(t.fg_mask).unsqueeze(0)
        gt_params = bev_params(t.boxes)
        return heat, reg, fg, gt_params

    @pytest.fixture
    def grid(self):
        return GridSpec(
            n_range=16, n_azimuth=8, n_elevation=2,
            range_bounds_m=(0.0, 72.0), azimuth_bounds_rad=(-0.7, 0.7),
            elevation_bounds_m=(-2.0, 6.0),
        )

    def test_perfect_prediction_small(self, grid):
        heat, reg, fg, gt = self._setup(grid)
        # Loss-optimal heatmap: 1 at GT peaks, 0 elsewhere (the Gaussian
        # shoulders of the target only modulate the background penalty).
        pred_heat = torch.where(heat == 1.0, 1.0 - 1e-6, 1e-6)
        out = HeadOutput(heatmaps=pred_heat, regression=reg.clone())
        total, _ = total_loss(out, heat, reg, fg, (gt.clone(), gt))
        assert total.item() < 1e-3

    def test_focal_only_weights(self, grid):
        heat, reg, fg, gt = self._setup(grid)
        out = HeadOutput(heatmaps=torch.full_like(heat, 0.4), regression=reg * 0.5)
        w = LossWeights(w_focal=1.0, w_gwd=0.0, w_l1=0.0)
        total, breakdown = total_loss(out, heat, reg, fg, (gt * 1.1, gt), w)
        assert abs(total.item() - breakdown["focal"]) < 1e-7

    def test_decomposition_identity(self, grid):
        heat, reg, fg, gt = self._setup(grid)
        out = HeadOutput(heatmaps=torch.full_like(heat, 0.4), regression=reg * 0.5)
        w = LossWeights(w_focal=0.7, w_gwd=1.3, w_l1=0.35)
        total, bd = total_loss(out, heat, reg, fg, (gt * 1.2, gt), w)
        manual = w.w_focal * bd["focal"] + w.w_gwd * bd["gwd"] + w.w_l1 * bd["l1"]
        assert abs(total.item() - manual) < 1e-5 * max(1.0, abs(manual))

    def test_terms_nonnegative_and_monotone_in_weights(self, grid):
        heat, reg, fg, gt = self._setup(grid)
        out = HeadOutput(heatmaps=torch.full_like(heat, 0.3), regression=reg * 0.2)
        base = LossWeights(1.0, 1.0, 1.0)
        total0, bd = total_loss(out, heat, reg, fg, (gt * 1.3, gt), base)
        assert all(v >= 0 for v in bd.values())
        for heavier in (LossWeights(2, 1, 1), LossWeights(1, 2, 1), LossWeights(1, 1, 2)):
            total1, _ = total_loss(out, heat, reg, fg, (gt * 1.3, gt), heavier)
            assert total1.item() >= total0.item()

    def test_training_loss_runs_end_to_end(self, grid):
        box = Box3D(center=(20.0, 1.0, 0.8), dims=(4, 2, 1.6), yaw=0.4, class_id=1)
        targets = [render_targets([box], grid), render_targets([], grid)]
        out = HeadOutput(
            heatmaps=torch.rand(2, 16, 8, 5).clamp(1e-4, 1 - 1e-4),
            regression=torch.randn(2, 16, 8, 8, requires_grad=True),
        )
        total, bd = training_loss(out, targets, grid)
        total.backward()
        assert math.isfinite(total.item())

    def test_weights_validation(self):
        with pytest.raises(ConfigError):
            LossWeights(w_focal=-1.0)
        with pytest.raises(ConfigError):
            LossWeights(0.0, 0.0, 0.0)
        with pytest.raises(ConfigError):
            LossWeights(gwd_tau=0.0)
