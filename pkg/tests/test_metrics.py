
import pytest
import torch

from volface.appearance import IdentityEmbedder
from volface.geometry import default_intrinsics, pose_from_orbit
from volface.metrics import (aed, apd, build_report, csim, fit_expression,
                             psnr, ssim, write_report)
from volface.motionmodel import make_basis
from volface.synthdata import make_identity, render_oracle


def img(seed=0, size=64):
    return torch.rand(3, size, size, generator=torch.Generator().manual_seed(seed))


class TestPsnr:
    def test_identical_images_capped(self):
        a = img(0)
        assert psnr(a, a.clone()) == 99.0

    def test_uniform_error_closed_form(self):
        a = torch.full((3, 16, 16), 0.5)
        b = a + 0.1
        assert psnr(a, b) == pytest.approx(20.0, abs=1e-5)

    def test_symmetric(self):
        a, b = img(1), img(2)
        assert psnr(a, b) == pytest.approx(psnr(b, a), abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            psnr(img(0, 16), img(0, 32))


class TestSsim:
    def test_identical_images_one(self):
        a = img(3)
        assert ssim(a, a.clone()) == pytest.approx(1.0, abs=1e-9)

    def test_inverted_pattern_low(self):
        gen = torch.Generator().manual_seed(4)
        a = (torch.rand(3, 16, 16, generator=gen) * 0.6 + 0.2)
        assert ssim(a, 1.0 - a) < 0.5

    def test_luminance_shift_cancels(self):
        # equal-mean images: the luminance term is 1 before and after a
        # common constant shift
        gen = torch.Generator().manual_seed(5)
        a = torch.rand(3, 24, 24, generator=gen) * 0.5 + 0.2
        b = a.flip(-1)   # same mean, different structure
        s0 = ssim(a, b)
        s1 = ssim(a + 0.05, b + 0.05)
        assert abs(s0 - s1) < 1e-3

    def test_too_small_rejected(self):
        with pytest.raises(ValueError):
            ssim(img(0, 4), img(1, 4))

    def test_range(self):
        vals = [ssim(img(s), img(s + 50)) for s in range(4)]
        assert all(-1.0 <= v <= 1.0 for v in vals)


class TestCsim:
    def test_identical_images_one(self):
        emb = IdentityEmbedder()
        a = img(6)
        assert csim(a, a.clone(), emb) == pytest.approx(1.0, abs=1e-5)

    def test_bounded(self):
        emb = IdentityEmbedder()
        for s in range(5):
            v = csim(img(s), img(s + 20), emb)
            assert -1.0 - 1e-6 <= v <= 1.0 + 1e-6


class TestSequenceMetrics:
    def test_identical_sequences_zero(self):
        b = torch.randn(5, 4)
        assert aed(b, b.clone()) == 0.0
        p = torch.randn(5, 12)
        assert apd(p, p.clone()) == 0.0

    def test_aed_summed_l1_convention(self):
        true = torch.zeros(3, 4)
        pred = torch.full((3, 4), 0.1)
        assert aed(pred, true) == pytest.approx(0.4, rel=1e-6)

    def test_apd_euclidean_convention(self):
        true = torch.zeros(2, 12)
        pred = torch.zeros(2, 12)
        pred[:, 0] = 3.0
        pred[:, 1] = 4.0
        assert apd(pred, true) == pytest.approx(5.0, rel=1e-6)

    def test_frame_permutation_invariant(self):
        gen = torch.Generator().manual_seed(7)
        pred = torch.randn(6, 4, generator=gen)
        true = torch.randn(6, 4, generator=gen)
        perm = torch.randperm(6, generator=gen)
        assert aed(pred, true) == pytest.approx(aed(pred[perm], true[perm]), rel=1e-9)

    def test_triangle_inequality_per_frame(self):
        gen = torch.Generator().manual_seed(8)
        a, b, c = (torch.randn(4, 4, generator=gen) for _ in range(3))
        assert aed(a, c) <= aed(a, b) + aed(b, c) + 1e-9
        assert apd(a, c) <= apd(a, b) + apd(b, c) + 1e-9

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            aed(torch.zeros(3, 4), torch.zeros(4, 4))


class TestExpressionRecovery:
    def test_recovers_known_expression(self):
        basis = make_basis(3)
        spec = make_identity(4)
        intr = default_intrinsics(64)
        pose = pose_from_orbit(0.1, -0.05, 2.2)
        gen = torch.Generator().manual_seed(9)
        alpha = (torch.rand(4, generator=gen, dtype=torch.float64) * 2 - 1)
        beta_true = torch.tensor([0.8, -1.1, 0.4, 1.3], dtype=torch.float64)
        target = render_oracle(spec, basis, alpha, beta_true, intr, pose,
                               n_samples=512)
        beta_fit = fit_expression(target, spec, basis, alpha, intr, pose)
        err = float((beta_fit.double() - beta_true).abs().sum())
        assert err < 0.25, (beta_fit, beta_true)


class TestReport:
    def test_aggregates_are_means(self):
        rows = [{"frame": "a", "psnr": 20.0, "ssim": 0.5},
                {"frame": "b", "psnr": 30.0, "ssim": 0.7}]
        rep = build_report(rows, config_hash="ff")
        assert rep.frame_count == 2
        assert rep.aggregates["psnr"] == pytest.approx(25.0)
        assert rep.aggregates["ssim"] == pytest.approx(0.6)
        assert "aed" in rep.conventions and "apd" in rep.conventions
        assert any("LPIPS" in n for n in rep.notes)

    def test_written_report_regenerates_identically(self, tmp_path):
        rows = [{"frame": "a", "psnr": 21.5}]
        rep = build_report(rows, "abc")
        p1 = write_report(rep, tmp_path / "r1")
        p2 = write_report(rep, tmp_path / "r2")
        assert p1.read_bytes() == p2.read_bytes()
        assert (tmp_path / "r1" / "per_frame.csv").exists()
