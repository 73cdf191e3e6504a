import pytest
import torch

from volface.motionmodel import (BlendshapeBasis, control_signal, make_basis,
                                 shape, track, OracleTracker)


@pytest.fixture(scope="module")
def basis():
    return make_basis(seed=42)


class TestBasis:
    def test_columns_mutually_orthogonal(self, basis):
        cols = torch.cat([basis.basis_id.reshape(-1, basis.d_id),
                          basis.basis_exp.reshape(-1, basis.d_exp)], dim=1)
        gram = cols.T @ cols
        off = gram - torch.diag(gram.diagonal())
        assert off.abs().max() < 1e-10

    def test_mouth_point_responds_to_first_expression_axis(self, basis):
        d_mouth = basis.basis_exp[basis.mouth_index, :, 0]
        assert d_mouth.norm() > 0.05

    def test_deterministic_in_seed(self):
        a, b = make_basis(7), make_basis(7)
        assert torch.equal(a.mean_shape, b.mean_shape)
        assert torch.equal(a.basis_exp, b.basis_exp)
        c = make_basis(8)
        assert not torch.equal(a.basis_exp, c.basis_exp)

    def test_round_trips_through_dict(self, basis):
        again = BlendshapeBasis.from_dict(basis.to_dict())
        assert torch.equal(again.mean_shape, basis.mean_shape)
        assert torch.equal(again.basis_id, basis.basis_id)
        assert again.mouth_index == basis.mouth_index


class TestShape:
    def test_zero_coefficients_give_mean(self, basis):
        s = shape(basis, torch.zeros(4, dtype=torch.float64),
                  torch.zeros(4, dtype=torch.float64))
        assert torch.equal(s, basis.mean_shape)

    def test_linearity(self, basis):
        gen = torch.Generator().manual_seed(0)
        a1, a2, b = (torch.randn(4, generator=gen, dtype=torch.float64) for _ in range(3))
        lhs = shape(basis, a1 + a2, b) - shape(basis, a2, b)
        rhs = shape(basis, a1, b) - shape(basis, torch.zeros_like(a1), b)
        assert torch.allclose(lhs, rhs, atol=1e-12)

    def test_unit_alpha_extracts_basis_column(self, basis):
        for j in range(basis.d_id):
            alpha = torch.zeros(4, dtype=torch.float64)
            alpha[j] = 1.0
            s = shape(basis, alpha, torch.zeros(4, dtype=torch.float64))
            assert torch.allclose(s - basis.mean_shape, basis.basis_id[:, :, j], atol=1e-14)

    def test_jacobian_wrt_beta_is_constant_basis(self, basis):
        beta = torch.randn(4, dtype=torch.float64, requires_grad=True)
        s = shape(basis, torch.zeros(4, dtype=torch.float64), beta)
        jac = torch.autograd.grad(s.sum(), beta)[0]
        assert torch.allclose(jac, basis.basis_exp.sum(dim=(0, 1)), atol=1e-12)

    def test_dimension_mismatch_rejected(self, basis):
        with pytest.raises(ValueError):
            shape(basis, torch.zeros(3), torch.zeros(4))


class TestControlSignal:
    def test_zero_signal(self):
        sig = control_signal(torch.zeros(4), torch.zeros(4))
        assert sig.shape == (8,)
        assert torch.all(sig == 0)

    def test_order_sensitive(self):
        alpha = torch.tensor([1.0, 0, 0, 0])
        beta = torch.tensor([0.0, 0, 0, 2.0])
        assert not torch.equal(control_signal(alpha, beta), control_signal(beta, alpha))
        assert control_signal(alpha, beta)[0] == 1.0
        assert control_signal(alpha, beta)[7] == 2.0


class TestTrackOracle:
    def test_reads_annotations_verbatim(self):
        class Frame:
            alpha = torch.tensor([1.0, 2, 3, 4])
            beta = torch.tensor([4.0, 3, 2, 1])
            pose = object()

        a, b, pose = track(Frame())
        assert torch.equal(a, Frame.alpha.double())
        assert torch.equal(b, Frame.beta.double())
        assert pose is Frame.pose
        assert OracleTracker().track(Frame())[2] is Frame.pose

    def test_missing_annotations_rejected(self):
        with pytest.raises(ValueError):
            track(object())
