import pytest
import torch

from volface.appearance import (CompensationNet, Encoder, Generator,
                                IdentityEmbedder, embed)
from volface.diffcore import ParameterGroup, grad_check
from volface.triplane import combine


def imgs(n=2, seed=0):
    return torch.rand(n, 3, 64, 64, generator=torch.Generator().manual_seed(seed))


class TestEncoder:
    def test_output_dimension(self):
        torch.manual_seed(0)
        enc = Encoder(latent_dim=64)
        assert enc(imgs(3)).shape == (3, 64)

    def test_deterministic(self):
        torch.manual_seed(0)
        enc = Encoder()
        x = imgs(1)
        assert torch.equal(enc(x), enc(x.clone()))

    def test_wrong_resolution_rejected(self):
        torch.manual_seed(0)
        enc = Encoder()
        with pytest.raises(ValueError):
            enc(torch.rand(1, 3, 32, 32))
        with pytest.raises(ValueError):
            enc(torch.rand(1, 1, 64, 64))


class TestGenerator:
    def test_output_shapes(self):
        torch.manual_seed(0)
        gen = Generator(latent_dim=64, plane_channels=8, plane_res=64)
        planes, inter = gen(torch.randn(2, 64))
        assert planes.shape == (2, 3, 8, 64, 64)
        assert inter.shape == (2, 32, 16, 16)

    def test_deterministic_in_latent(self):
        torch.manual_seed(0)
        gen = Generator()
        w = torch.randn(1, 64)
        p1, i1 = gen(w)
        p2, i2 = gen(w.clone())
        assert torch.equal(p1, p2) and torch.equal(i1, i2)

    def test_rendered_pixel_gradient_wrt_latent(self):
        torch.manual_seed(1)
        gen = Generator().double()
        from volface.triplane import VolumeDecoder, sample_triplane
        dec = VolumeDecoder().double()
        w = torch.nn.Parameter(torch.randn(64, dtype=torch.float64) * 0.3)
        pts = (torch.rand(6, 3, dtype=torch.float64) - 0.5) * 1.2
        group = ParameterGroup("latent", {"w": w})

        def fn():
            planes, _ = gen(w.unsqueeze(0))
            sigma, feat = dec(sample_triplane(planes[0], pts))
            return sigma.sum() + feat.square().sum()

        res = grad_check(fn, [group], fd_step=1e-5)
        assert res["latent"].checked > 0
        assert res["latent"].max_rel_error < 1e-5


class TestCompensation:
    def test_zero_at_initialization(self):
        torch.manual_seed(0)
        comp = CompensationNet()
        inter = torch.randn(2, 32, 16, 16)
        out = comp(imgs(2), inter)
        assert out.shape == (2, 3, 8, 64, 64)
        assert torch.all(out == 0)

    def test_combined_volume_equals_canonical_at_init(self):
        torch.manual_seed(0)
        gen = Generator()
        comp = CompensationNet()
        w = torch.randn(1, 64)
        planes, inter = gen(w)
        vm = comp(imgs(1), inter)
        assert torch.equal(combine(planes[0], vm[0]), planes[0])

    def test_modulation_depends_on_source_image(self):
        torch.manual_seed(0)
        comp = CompensationNet()
        with torch.no_grad():   # activate the zero-initialized projection
            comp.project.weight.normal_(0, 0.1)
        inter = torch.randn(1, 32, 16, 16)
        a = comp(imgs(1, seed=1), inter)
        b = comp(imgs(1, seed=2), inter)
        assert not torch.equal(a, b)

    def test_batch_mismatch_rejected(self):
        torch.manual_seed(0)
        comp = CompensationNet()
        with pytest.raises(ValueError):
            comp(imgs(2), torch.randn(3, 32, 16, 16))

    def test_no_batch_statistics(self):
        # single-image output equals the same image processed inside a batch
        torch.manual_seed(0)
        comp = CompensationNet()
        with torch.no_grad():
            comp.project.weight.normal_(0, 0.1)
        batch = imgs(4, seed=3)
        inter = torch.randn(4, 32, 16, 16)
        full = comp(batch, inter)
        solo = comp(batch[:1], inter[:1])
        assert torch.allclose(full[:1], solo, atol=1e-6)


class TestIdentityEmbedder:
    def test_unit_norm(self):
        emb = IdentityEmbedder()
        out = emb(imgs(8))
        assert torch.allclose(out.norm(dim=-1), torch.ones(8), atol=1e-6)

    def test_self_similarity_is_one(self):
        emb = IdentityEmbedder()
        e = embed(emb, imgs(1)[0])
        assert float(e @ e) == pytest.approx(1.0, abs=1e-6)

    def test_frozen_parameters(self):
        emb = IdentityEmbedder()
        assert all(not p.requires_grad for p in emb.parameters())

    def test_seed_fixed(self):
        a, b = IdentityEmbedder(seed=5), IdentityEmbedder(seed=5)
        for p, q in zip(a.parameters(), b.parameters()):
            assert torch.equal(p, q)

    def test_distinct_images_separable(self):
        emb = IdentityEmbedder()
        gen = torch.Generator().manual_seed(42)
        cosines = []
        for _ in range(16):
            a = torch.rand(1, 3, 64, 64, generator=gen)
            b = torch.rand(1, 3, 64, 64, generator=gen)
            cosines.append(float((emb(a) * emb(b)).sum()))
        assert max(cosines) < 0.99
