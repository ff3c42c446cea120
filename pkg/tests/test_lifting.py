import pytest
import torch

from radefusion.errors import ConfigError
from radefusion.lifting import (
    ElevationWeightNet,
    ElevationWeights,
    QueryMap3D,
    lift,
    uniform_weights,
)

from gradcheck_util import fd_gradient, relative_error


@pytest.fixture
def net():
    torch.manual_seed(0)
    return ElevationWeightNet(n_elevation_raw=8, n_segments=4, pool_factor=2)


class TestElevationWeights:
    def test_zero_init_gives_uniform(self, net):
        # The final MLP layer is zero-initialized, so any profile maps to 1/E.
        p_rae = torch.full((1, 16, 8, 8), 3.0)
        w = net(p_rae)
        assert torch.allclose(w.data, torch.full_like(w.data, 0.25), atol=1e-7)

    def test_sums_to_one(self, net):
        for layer in net.mlp:
            if hasattr(layer, "weight"):
                torch.nn.init.normal_(layer.weight)
                torch.nn.init.normal_(layer.bias)
        w = net(torch.rand(2, 16, 8, 8) * 50)
        sums = w.data.sum(dim=-1)
        assert torch.allclose(sums, torch.ones_like(sums), atol=1e-6)
        assert (w.data >= 0).all()

    def test_paper_scale_shape(self):
        torch.manual_seed(0)
        net = ElevationWeightNet(n_elevation_raw=16, n_segments=10, pool_factor=2)
        w = net(torch.rand(1, 512, 224, 16))
        assert w.data.shape == (1, 256, 112, 10)

    def test_per_channel_reserved(self):
        with pytest.raises(ConfigError):
            ElevationWeightNet(8, 4, 2, per_channel=True)

    def test_input_shape_check(self, net):
        with pytest.raises(ConfigError):
            net(torch.rand(1, 16, 8, 5))


class TestLift:
    def test_one_hot_weights(self):
        m = torch.rand(1, 4, 4, 8)
        w = torch.zeros(1, 4, 4, 3)
        w[..., 1] = 1.0
        q = lift(m, ElevationWeights(data=w))
        assert torch.equal(q.data[..., 1], m)
        assert torch.equal(q.data[..., 0], torch.zeros_like(m))
        assert torch.equal(q.data[..., 2], torch.zeros_like(m))

    def test_uniform_weights(self):
        m = torch.rand(2, 4, 4, 8)
        w = uniform_weights(2, 4, 4, 5)
        q = lift(m, w)
        for e in range(5):
            assert torch.allclose(q.data[..., e], m / 5.0)

    def test_mass_conservation(self, net):
        for layer in net.mlp:
            if hasattr(layer, "weight"):
                torch.nn.init.normal_(layer.weight, std=0.5)
        m = torch.randn(2, 16, 8, 32)
        w = net(torch.rand(2, 32, 16, 8) * 20)
        q = lift(m, w)
        assert torch.allclose(q.data.sum(dim=-1), m, atol=1e-5)

    def test_shape_mismatch(self):
        m = torch.rand(1, 4, 4, 8)
        w = uniform_weights(1, 5, 4, 3)
        with pytest.raises(ConfigError):
            lift(m, w)

    def test_weights_validated(self):
        bad = torch.rand(1, 2, 2, 3)  # fibers do not sum to 1
        with pytest.raises(ValueError):
            ElevationWeights(data=bad * 3)

    def test_query_map_shape_validated(self):
        with pytest.raises(ConfigError):
            QueryMap3D(data=torch.rand(4, 4, 8))


class TestLiftGradient:
    def test_matches_finite_differences(self):
        # Scalar loss through elevation_weights + lift at float64.
        torch.manual_seed(0)
        net = ElevationWeightNet(n_elevation_raw=4, n_segments=3, pool_factor=1).double()
        for layer in net.mlp:
            if hasattr(layer, "weight"):
                torch.nn.init.normal_(layer.weight, std=0.3)
                torch.nn.init.normal_(layer.bias, std=0.1)
        p_rae = (torch.rand(1, 3, 3, 4, dtype=torch.float64) * 5).requires_grad_(True)
        m_bev = torch.randn(1, 3, 3, 6, dtype=torch.float64, requires_grad=True)
        probe = torch.randn(1, 3, 3, 6, 3, dtype=torch.float64)

        def loss_at(p, m):
            return (lift(m, net(p)).data * probe).sum()

        g_rae, g_bev = torch.autograd.grad(loss_at(p_rae, m_bev), (p_rae, m_bev))
        p_det = p_rae.detach().clone()
        m_det = m_bev.detach().clone()
        with torch.no_grad():
            fd_rae = fd_gradient(lambda t: loss_at(t, m_det), p_det.clone())
            fd_bev = fd_gradient(lambda t: loss_at(p_det, t), m_det.clone())
        assert relative_error(g_rae, fd_rae) < 1e-4
        assert relative_error(g_bev, fd_bev) < 1e-4
