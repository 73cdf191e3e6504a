import pytest
import torch

from volface.appearance import IdentityEmbedder
from volface.diffcore import ParameterGroup, grad_check
from volface.losses import (PYRAMID_LEVELS, RoiBox, STAGE_WEIGHTS, crop_roi,
                            gaussian_blur, l_depth, l_id, l_latent, l_mouth,
                            l_rec, l_teeth, restoration_oracle, stage_total)


def img(seed=0, size=64):
    return torch.rand(3, size, size, generator=torch.Generator().manual_seed(seed))


CENTER_ROI = RoiBox(0.3, 0.3, 0.7, 0.7)


class TestReconstruction:
    def test_identical_images_zero(self):
        a = img(0)
        assert l_rec(a, a.clone()).item() == 0.0

    def test_uniform_offset_closed_form(self):
        # L2 term = offset^2; each pyramid level preserves a uniform offset,
        # adding offset^2 once per level
        a = torch.full((3, 32, 32), 0.4, dtype=torch.float64)
        b = a + 0.1
        expected = 0.01 + 0.01 * PYRAMID_LEVELS
        assert l_rec(a, b).item() == pytest.approx(expected, rel=1e-10)

    def test_symmetric(self):
        a, b = img(1), img(2)
        assert l_rec(a, b).item() == pytest.approx(l_rec(b, a).item(), rel=1e-6)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            l_rec(img(0, 64), img(0, 32))

    def test_blur_preserves_constants(self):
        c = torch.full((3, 16, 16), 0.37, dtype=torch.float64)
        assert torch.allclose(gaussian_blur(c), c, atol=1e-12)


class TestMouthRoi:
    def test_from_landmark_clamps_into_bounds(self):
        roi = RoiBox.from_landmark(2.0, 62.0, 64, 64)
        assert 0.0 <= roi.u0 < roi.u1 <= 1.0
        assert 0.0 <= roi.v0 < roi.v1 <= 1.0
        # far outside landmarks still give a usable box
        roi = RoiBox.from_landmark(-50.0, 500.0, 64, 64)
        assert roi.u0 < roi.u1 and roi.v0 < roi.v1

    def test_degenerate_box_rejected(self):
        with pytest.raises(ValueError):
            RoiBox(0.5, 0.2, 0.5, 0.4)

    def test_identical_images_zero(self):
        a = img(3)
        assert l_mouth(a, a.clone(), CENTER_ROI).item() == 0.0

    def test_outside_roi_divergence_ignored(self):
        a = img(4).double()
        b = a.clone()
        b[:, :4, :] = 0.0          # corrupt rows far above the ROI
        b[:, :, :4] = 1.0          # and columns left of it
        roi = RoiBox(0.45, 0.45, 0.6, 0.6)
        assert l_mouth(a, b, roi).item() == pytest.approx(0.0, abs=1e-12)

    def test_gradient_confined_to_roi_pixels(self):
        a = img(5).double()
        b = img(15).double().requires_grad_(True)   # distinct so the MSE slope is nonzero
        roi = RoiBox(0.5, 0.5, 0.75, 0.75)
        l_mouth(a, b, roi).backward()
        g = b.grad.abs().sum(dim=0)
        left, top, right, bottom = roi.pixel_rect(64, 64)
        pad = 3    # bilinear taps and pyramid blur reach a few pixels out
        outside = g.clone()
        outside[max(top - pad, 0):bottom + pad, max(left - pad, 0):right + pad] = 0
        assert g[top:bottom, left:right].sum() > 0
        assert outside.sum().item() == 0.0


class TestIdentityAndLatent:
    def test_identity_loss_zero_on_same_image(self):
        emb = IdentityEmbedder()
        a = img(6)
        assert l_id(a, a.clone(), emb).item() == pytest.approx(0.0, abs=1e-6)

    def test_identity_loss_range(self):
        emb = IdentityEmbedder()
        for s in range(4):
            val = l_id(img(s), img(s + 10), emb).item()
            assert 0.0 <= val <= 2.0

    def test_latent_zero(self):
        assert l_latent(torch.zeros(64)).item() == 0.0

    def test_latent_sum_of_squares(self):
        e = torch.full((64,), 0.1)
        assert l_latent(e).item() == pytest.approx(0.64, rel=1e-6)

    def test_latent_gradient_is_2e(self):
        e = torch.randn(16, dtype=torch.float64, requires_grad=True)
        l_latent(e).backward()
        assert torch.allclose(e.grad, 2 * e.detach(), atol=1e-12)


class TestRestorationOracle:
    def test_constant_image_unchanged(self):
        c = torch.full((3, 64, 64), 0.42)
        out = restoration_oracle(c, CENTER_ROI)
        assert torch.allclose(out, c, atol=1e-6)

    def test_output_clamped_to_unit_range(self):
        a = img(7)
        out = restoration_oracle(a, CENTER_ROI)
        assert torch.all((out >= 0) & (out <= 1))

    def test_step_edge_contrast_increases(self):
        a = torch.zeros(3, 64, 64, dtype=torch.float64)
        a[:, :, 32:] = 0.8
        a += 0.1
        out = restoration_oracle(a, RoiBox(0.25, 0.25, 0.75, 0.75))
        row = 32
        before = float(a[0, row, 34] - a[0, row, 29])
        after = float(out[0, row, 34] - out[0, row, 29])
        assert after >= before

    def test_untouched_outside_roi(self):
        a = img(8)
        out = restoration_oracle(a, RoiBox(0.4, 0.4, 0.6, 0.6))
        left, top, right, bottom = RoiBox(0.4, 0.4, 0.6, 0.6).pixel_rect(64, 64)
        mask = torch.ones(64, 64, dtype=torch.bool)
        mask[top:bottom, left:right] = False
        assert torch.equal(out[:, mask], a[:, mask])

    def test_target_is_gradient_isolated(self):
        a = img(9).requires_grad_(True)
        out = restoration_oracle(a, CENTER_ROI)
        assert not out.requires_grad


class TestTeeth:
    def test_oracle_fixed_point_is_zero(self):
        # constant ROI: unsharp mask leaves it unchanged, loss is exactly 0
        a = torch.full((3, 64, 64), 0.5)
        assert l_teeth(a, CENTER_ROI).item() == pytest.approx(0.0, abs=1e-10)

    def test_gradient_touches_only_roi(self):
        a = img(10).double().requires_grad_(True)
        roi = RoiBox(0.5, 0.5, 0.8, 0.8)
        l_teeth(a, roi).backward()
        g = a.grad.abs().sum(dim=0)
        left, top, right, bottom = roi.pixel_rect(64, 64)
        pad = 3
        outside = g.clone()
        outside[max(top - pad, 0):bottom + pad, max(left - pad, 0):right + pad] = 0
        assert outside.sum().item() == 0.0

    def test_blurry_roi_refines_under_descent(self):
        gen = torch.Generator().manual_seed(11)
        sharp = (torch.rand(3, 64, 64, generator=gen) > 0.5).double()
        blurry = gaussian_blur(gaussian_blur(sharp, 1.5), 1.5)
        x = torch.nn.Parameter(blurry.clone())
        opt = torch.optim.Adam([x], lr=5e-3)
        first = l_teeth(x.clamp(0, 1), CENTER_ROI).item()
        for _ in range(200):
            opt.zero_grad()
            loss = l_teeth(x.clamp(0, 1), CENTER_ROI)
            loss.backward()
            opt.step()
        last = l_teeth(x.clamp(0, 1).detach(), CENTER_ROI).item()
        assert last < first

    def test_fd_gradient_with_frozen_target(self):
        torch.manual_seed(12)
        a = torch.nn.Parameter(img(13).double())
        roi = CENTER_ROI
        target = restoration_oracle(a.detach(), roi)
        group = ParameterGroup("img", {"img": a})

        def fn():
            return l_rec(crop_roi(target, roi), crop_roi(a, roi))

        res = grad_check(fn, [group], fd_step=1e-6)
        assert res["img"].max_rel_error < 1e-6


class TestDepthRegularizer:
    def test_zero_when_vm_is_scaled_vc(self):
        vc = torch.randn(3, 8, 16, 16)
        assert l_depth(vc, 0.1 * vc).item() == pytest.approx(0.0, abs=1e-12)

    def test_unit_canonical_arithmetic(self):
        vc = torch.ones(3, 8, 16, 16)
        vm = torch.zeros_like(vc)
        assert l_depth(vc, vm).item() == pytest.approx(0.01, rel=1e-6)

    def test_default_scale_factor(self):
        from volface.losses import COMPENSATION_SCALE
        assert COMPENSATION_SCALE == 0.1

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            l_depth(torch.zeros(3, 8, 16, 16), torch.zeros(3, 8, 8, 8))


class TestStageTotals:
    def test_paper_stage_weights(self):
        assert STAGE_WEIGHTS["general"] == {"rec": 1.0, "mouth": 0.5, "id": 0.1,
                                            "latent": 0.01}
        assert STAGE_WEIGHTS["refine"] == {"rec": 0.5, "teeth": 1.0, "id": 0.1,
                                           "latent": 0.01}
        assert STAGE_WEIGHTS["comp"] == {"rec": 1.0, "id": 0.1, "depth": 0.01}
        assert STAGE_WEIGHTS["finetune"] == {"rec": 1.0, "mouth": 0.5, "id": 0.1,
                                             "depth": 0.01}

    def test_weighted_sum(self):
        terms = {"rec": torch.tensor(2.0), "mouth": torch.tensor(1.0),
                 "id": torch.tensor(3.0), "latent": torch.tensor(10.0)}
        total = stage_total("general", terms)
        assert total.item() == pytest.approx(2.0 + 0.5 + 0.3 + 0.1)

    def test_inactive_term_rejected(self):
        terms = {"rec": torch.tensor(1.0), "id": torch.tensor(1.0),
                 "depth": torch.tensor(1.0), "teeth": torch.tensor(1.0)}
        with pytest.raises(ValueError):
            stage_total("comp", terms)

    def test_missing_term_rejected(self):
        with pytest.raises(ValueError):
            stage_total("general", {"rec": torch.tensor(1.0)})

    def test_zero_weight_reduces_objective(self):
        terms = {"rec": torch.tensor(2.0), "id": torch.tensor(3.0),
                 "depth": torch.tensor(5.0)}
        weights = {"rec": 1.0, "id": 0.0, "depth": 0.01}
        assert stage_total("comp", terms, weights).item() == pytest.approx(2.05)

    def test_unknown_stage_rejected(self):
        with pytest.raises(ValueError):
            stage_total("warmup", {})
