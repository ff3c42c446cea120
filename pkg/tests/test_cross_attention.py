import numpy as np
import pytest
import torch

from radefusion.cross_attention import (
    DeformAttnConfig,
    DeformableCrossAttention,
    bilinear_sample,
    collapse_elevation,
)
from radefusion.errors import ConfigError
from radefusion.radar_backbone import FeatureMapBEV

from gradcheck_util import fd_gradient, relative_error


def scalar_bilinear_oracle(pv: np.ndarray, u: float, v: float) -> np.ndarray:
    """Independent scalar-loop interpolation with zero padding outside."""
    h, w, c = pv.shape
    x = u * w - 0.5
    y = v * h - 0.5
    x0, y0 = int(np.floor(x)), int(np.floor(y))
    fx, fy = x - x0, y - y0
    out = np.zeros(c)
    for dx, dy, wt in ((0, 0, (1 - fx) * (1 - fy)), (1, 0, fx * (1 - fy)),
                       (0, 1, (1 - fx) * fy), (1, 1, fx * fy)):
        cx, cy = x0 + dx, y0 + dy
        if 0 <= cx < w and 0 <= cy < h:
            out += wt * pv[cy, cx]
    return out


class TestBilinearSample:
    def test_exact_at_grid_node(self):
        pv = torch.rand(1, 6, 8, 3)
        # Cell (i, j) center is at ((j + 0.5)/W, (i + 0.5)/H).
        pts = torch.tensor([[[(2 + 0.5) / 8, (4 + 0.5) / 6]]])
        out = bilinear_sample(pv, pts)
        assert torch.allclose(out[0, 0], pv[0, 4, 2], atol=1e-6)

    def test_midpoint_of_four_nodes(self):
        pv = torch.rand(1, 6, 8, 3)
        pts = torch.tensor([[[(2 + 1.0) / 8, (4 + 1.0) / 6]]])
        out = bilinear_sample(pv, pts)
        expect = pv[0, 4:6, 2:4].mean(dim=(0, 1))
        assert torch.allclose(out[0, 0], expect, atol=1e-6)

    def test_against_scalar_oracle(self):
        rng = np.random.default_rng(0)
        pv_np = rng.normal(size=(7, 9, 4))
        pv = torch.from_numpy(pv_np).unsqueeze(0)
        pts_np = rng.uniform(-0.2, 1.2, size=(200, 2))
        pts = torch.from_numpy(pts_np).unsqueeze(0)
        out = bilinear_sample(pv, pts).numpy()[0]
        worst = 0.0
        for k in range(200):
            expect = scalar_bilinear_oracle(pv_np, pts_np[k, 0], pts_np[k, 1])
            worst = max(worst, np.abs(out[k] - expect).max())
        assert worst < 1e-6

    def test_mask_forces_zeros(self):
        pv = torch.rand(1, 4, 4, 2) + 1.0
        pts = torch.full((1, 5, 2), 0.5)
        mask = torch.tensor([[True, False, True, False, False]])
        out = bilinear_sample(pv, pts, mask)
        assert torch.all(out[0, 1] == 0) and torch.all(out[0, 3] == 0)
        assert torch.all(out[0, 0] != 0)

    def test_linear_along_grid_axis(self):
        pv = torch.rand(1, 5, 5, 2)
        u0, u1 = (1 + 0.5) / 5, (2 + 0.5) / 5
        v = (2 + 0.5) / 5
        f0 = bilinear_sample(pv, torch.tensor([[[u0, v]]]))[0, 0]
        f1 = bilinear_sample(pv, torch.tensor([[[u1, v]]]))[0, 0]
        for t in (0.25, 0.5, 0.75):
            u = u0 + t * (u1 - u0)
            ft = bilinear_sample(pv, torch.tensor([[[u, v]]]))[0, 0]
            assert torch.allclose(ft, (1 - t) * f0 + t * f1, atol=1e-6)


@pytest.fixture
def xattn():
    torch.manual_seed(0)
    return DeformableCrossAttention(channels=8, cfg=DeformAttnConfig(n_points=4))


def _query_inputs(batch=2, n_r=4, n_a=3, c=8, n_e=2, seed=0):
    g = torch.Generator().manual_seed(seed)
    q3d = torch.randn(batch, n_r, n_a, c, n_e, generator=g)
    pv = torch.randn(batch, 6, 8, c, generator=g)
    ref = torch.rand(n_r, n_a, n_e, 2, generator=g) * 0.6 + 0.2
    mask = torch.ones(n_r, n_a, n_e, dtype=torch.bool)
    return q3d, pv, ref, mask


class TestPredictOffsets:
    def test_zero_init_offsets_zero(self, xattn):
        q = torch.randn(2, 4, 3, 2, 8)
        offsets, logits = xattn.predict_offsets(q)
        assert torch.all(offsets == 0)
        assert torch.all(logits == 0)

    def test_equal_logits_give_uniform_weights(self, xattn):
        q = torch.randn(1, 2, 2, 1, 8)
        _, logits = xattn.predict_offsets(q)
        w = torch.softmax(logits, dim=-1)
        assert torch.allclose(w, torch.full_like(w, 0.25))
        assert torch.allclose(w.sum(dim=-1), torch.ones_like(w.sum(dim=-1)))

    def test_offsets_bounded_by_scale(self):
        torch.manual_seed(1)
        layer = DeformableCrossAttention(8, DeformAttnConfig(offset_scale=0.07)).layers[0]
        torch.nn.init.normal_(layer.offset_head.weight, std=10.0)
        q = torch.randn(1, 3, 3, 2, 8) * 5
        offsets, _ = layer.predict_offsets(q)
        assert offsets.abs().max() <= 0.07 + 1e-7


class TestDeformXattn:
    def test_all_false_mask_is_identity(self, xattn):
        q3d, pv, ref, _ = _query_inputs()
        mask = torch.zeros(4, 3, 2, dtype=torch.bool)
        out = xattn(q3d, pv, ref, mask)
        assert torch.equal(out.data, q3d)

    def test_zero_pv_map_is_identity(self, xattn):
        # Projection is bias-free by default, so zero features update nothing.
        q3d, pv, ref, mask = _query_inputs()
        for layer in xattn.layers:
            torch.nn.init.normal_(layer.out_proj.weight)
        out = xattn(q3d, torch.zeros_like(pv), ref, mask)
        assert torch.allclose(out.data, q3d, atol=1e-7)

    def test_constant_pv_closed_form(self, xattn):
        q3d, pv, ref, mask = _query_inputs(batch=1)
        layer = xattn.layers[0]
        torch.nn.init.normal_(layer.out_proj.weight, std=0.3)
        value = 0.7
        const_pv = torch.full_like(pv, value)
        out = xattn(q3d, const_pv, ref, mask)
        # Equal weights, constant samples: update = W @ (value * ones).
        expected_update = layer.out_proj(torch.full((8,), value))
        diff = out.data - q3d  # (1, R, A, C, E)
        for e in range(2):
            assert torch.allclose(
                diff[0, :, :, :, e], expected_update.expand(4, 3, 8), atol=1e-5
            )

    def test_partial_mask_updates_only_valid(self, xattn):
        q3d, pv, ref, mask = _query_inputs(batch=1)
        for layer in xattn.layers:
            torch.nn.init.normal_(layer.out_proj.weight)
        mask = mask.clone()
        mask[0, 0, :] = False
        out = xattn(q3d, pv, ref, mask)
        assert torch.equal(out.data[0, 0, 0], q3d[0, 0, 0])
        assert not torch.allclose(out.data[0, 1, 1], q3d[0, 1, 1])

    def test_channel_mismatch_rejected(self, xattn):
        q3d, pv, ref, mask = _query_inputs()
        with pytest.raises(ConfigError):
            xattn(q3d, pv[..., :4], ref, mask)

    def test_multi_head_runs(self):
        torch.manual_seed(0)
        attn = DeformableCrossAttention(8, DeformAttnConfig(n_heads=2, n_points=3))
        q3d, pv, ref, mask = _query_inputs()
        out = attn(q3d, pv, ref, mask)
        assert out.data.shape == q3d.shape

    def test_offset_gradient_matches_fd(self):
        # Loss through sampling w.r.t. the offsets, away from grid nodes.
        torch.manual_seed(0)
        pv = torch.randn(1, 6, 8, 4, dtype=torch.float64)
        base = torch.tensor([[[0.33, 0.41], [0.61, 0.27], [0.52, 0.66]]], dtype=torch.float64)
        probe = torch.randn(1, 3, 4, dtype=torch.float64)
        offsets = torch.zeros(1, 3, 2, dtype=torch.float64, requires_grad=True)

        def loss_at(off):
            return (bilinear_sample(pv, base + off) * probe).sum()

        (g,) = torch.autograd.grad(loss_at(offsets), offsets)
        fd = fd_gradient(loss_at, torch.zeros(1, 3, 2, dtype=torch.float64), h=1e-6)
        assert relative_error(g, fd) < 1e-3


class TestCollapseElevation:
    def test_identical_slices(self):
        slice_ = torch.rand(1, 4, 3, 8)
        q = slice_.unsqueeze(-1).repeat(1, 1, 1, 1, 5)
        out = collapse_elevation(q)
        assert isinstance(out, FeatureMapBEV)
        assert torch.allclose(out.data, slice_, atol=1e-7)

    def test_one_hot_content(self):
        content = torch.rand(1, 4, 3, 8)
        q = torch.zeros(1, 4, 3, 8, 4)
        q[..., 2] = content
        out = collapse_elevation(q)
        assert torch.allclose(out.data, content / 4.0, atol=1e-7)

    def test_against_loop_mean(self):
        q = torch.rand(2, 3, 3, 4, 6)
        out = collapse_elevation(q).data
        expect = sum(q[..., e] for e in range(6)) / 6.0
        assert (out - expect).abs().max() < 1e-7


class TestConfigValidation:
    def test_bounds(self):
        with pytest.raises(ConfigError):
            DeformAttnConfig(n_points=0)
        with pytest.raises(ConfigError):
            DeformAttnConfig(offset_scale=0.0)
        with pytest.raises(ConfigError):
            DeformAttnConfig(offset_scale=1.5)

    def test_head_divisibility(self):
        with pytest.raises(ConfigError):
            DeformableCrossAttention(channels=6, cfg=DeformAttnConfig(n_heads=4))
