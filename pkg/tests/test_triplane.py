import math

import pytest
import torch

from volface.diffcore import ParameterGroup, grad_check
from volface.triplane import (VolumeDecoder, combine, decode_point,
                              density_activation, sample_triplane)

R = 9  # small odd resolution: node coordinates are exactly representable


def node_coord(k, r=R):
    return -1.0 + 2.0 * k / (r - 1)


class TestSampling:
    def test_value_at_shared_grid_node(self):
        planes = torch.zeros(3, 2, R, R, dtype=torch.float64)
        planes[:, 0] = 7.0
        planes[:, 1] = -3.0
        p = torch.tensor([[node_coord(2), node_coord(5), node_coord(6)]],
                         dtype=torch.float64)
        out = sample_triplane(planes, p)
        assert torch.allclose(out, torch.tensor([[7.0, -3.0]], dtype=torch.float64))

    def test_midpoint_averages_adjacent_nodes(self):
        planes = torch.zeros(3, 1, R, R, dtype=torch.float64)
        # XY plane varies along x only; XZ/YZ flat at zero
        for i in range(R):
            planes[0, 0, :, i] = float(i)
        x_mid = 0.5 * (node_coord(3) + node_coord(4))
        p = torch.tensor([[x_mid, node_coord(2), node_coord(2)]], dtype=torch.float64)
        out = sample_triplane(planes, p)
        assert out.item() == pytest.approx(3.5 / 3.0, abs=1e-12)

    def test_constant_planes_average(self):
        planes = torch.zeros(3, 1, R, R, dtype=torch.float64)
        planes[0], planes[1], planes[2] = 1.0, 2.0, 6.0
        gen = torch.Generator().manual_seed(0)
        pts = torch.rand(50, 3, generator=gen, dtype=torch.float64) * 2 - 1
        out = sample_triplane(planes, pts)
        assert torch.allclose(out, torch.full_like(out, 3.0), atol=1e-12)

    def test_linearity_in_plane_values(self):
        gen = torch.Generator().manual_seed(1)
        p1 = torch.randn(3, 4, R, R, generator=gen, dtype=torch.float64)
        p2 = torch.randn(3, 4, R, R, generator=gen, dtype=torch.float64)
        pts = torch.rand(20, 3, generator=gen, dtype=torch.float64) * 2 - 1
        lhs = sample_triplane(2.0 * p1 - 0.5 * p2, pts)
        rhs = 2.0 * sample_triplane(p1, pts) - 0.5 * sample_triplane(p2, pts)
        assert torch.allclose(lhs, rhs, atol=1e-12)

    def test_local_lipschitz_within_cell(self):
        gen = torch.Generator().manual_seed(2)
        planes = torch.randn(3, 4, R, R, generator=gen, dtype=torch.float64)
        # max grid finite difference bounds the in-cell slope per unit coordinate
        diffs = max(float((planes[:, :, :, 1:] - planes[:, :, :, :-1]).abs().max()),
                    float((planes[:, :, 1:, :] - planes[:, :, :-1, :]).abs().max()))
        lip = 3.0 * diffs / (2.0 / (R - 1))   # three planes contribute, mean keeps 1/3
        base = torch.tensor([0.111, -0.222, 0.333], dtype=torch.float64)
        delta = torch.tensor([1e-4, -5e-5, 7e-5], dtype=torch.float64)
        f0 = sample_triplane(planes, base.unsqueeze(0))
        f1 = sample_triplane(planes, (base + delta).unsqueeze(0))
        assert float((f1 - f0).norm()) <= lip * float(delta.norm()) + 1e-12

    def test_bad_shape_rejected(self):
        with pytest.raises(ValueError):
            sample_triplane(torch.zeros(2, 4, R, R), torch.zeros(1, 3))


class TestCombine:
    def test_zero_compensation_is_identity(self):
        vc = torch.randn(3, 8, R, R)
        assert torch.equal(combine(vc, torch.zeros_like(vc)), vc)

    def test_difference_recovers_compensation(self):
        gen = torch.Generator().manual_seed(3)
        vc = torch.randn(3, 2, R, R, generator=gen, dtype=torch.float64)
        vm = torch.randn(3, 2, R, R, generator=gen, dtype=torch.float64)
        assert torch.allclose(combine(vc, vm) - vc, vm, atol=1e-14)

    def test_sampling_distributes_over_sum(self):
        gen = torch.Generator().manual_seed(4)
        vc = torch.randn(3, 2, R, R, generator=gen, dtype=torch.float64)
        vm = torch.randn(3, 2, R, R, generator=gen, dtype=torch.float64)
        pts = torch.rand(10, 3, generator=gen, dtype=torch.float64) * 2 - 1
        lhs = sample_triplane(combine(vc, vm), pts)
        rhs = sample_triplane(vc, pts) + sample_triplane(vm, pts)
        assert torch.allclose(lhs, rhs, atol=1e-12)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            combine(torch.zeros(3, 2, R, R), torch.zeros(3, 3, R, R))


class TestDecoder:
    def test_softplus_zero_is_ln2(self):
        assert density_activation(torch.tensor(0.0)).item() == pytest.approx(math.log(2))

    def test_density_tail_vanishes(self):
        assert density_activation(torch.tensor(-40.0)).item() == pytest.approx(0.0, abs=1e-12)

    def test_density_nonnegative_and_rgb_bounded(self):
        dec = VolumeDecoder(8, 8).double()
        gen = torch.Generator().manual_seed(5)
        feats = torch.randn(100, 8, generator=gen, dtype=torch.float64) * 5
        sigma, colorfeat = decode_point(feats, dec)
        assert torch.all(sigma >= 0)
        assert torch.all((colorfeat[:, :3] >= 0) & (colorfeat[:, :3] <= 1))

    def test_gradients_match_finite_differences(self):
        torch.manual_seed(6)
        dec = VolumeDecoder(4, 4, hidden=16).double()
        feats = torch.randn(5, 4, dtype=torch.float64)
        group = ParameterGroup("decoder", dict(dec.named_parameters()))

        def fn():
            sigma, colorfeat = dec(feats)
            return sigma.sum() + (colorfeat * colorfeat).sum()

        res = grad_check(fn, [group], fd_step=1e-5)
        assert res["decoder"].max_rel_error < 1e-7
        assert res["decoder"].checked > 0
