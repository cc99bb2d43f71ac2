import math

import numpy as np
import pytest
import torch

from kanjibench.errors import InvalidArgument, InvalidInput, InvalidSpec
from kanjibench.models import (VAE, Discriminator, GANSpec, Generator, UNet, UNetSpec, VAESpec,
                               ddpm_sample, discriminate, gan_generate, gan_sample, reparameterize,
                               unet_predict_noise, vae_decode, vae_encode, vae_sample)
from kanjibench.nn_core import count_parameters, xavier_bound
from kanjibench.schedules import NoiseSchedule, linear_beta_schedule


@pytest.fixture(scope="module")
def vae():
    torch.manual_seed(0)
    return VAE(VAESpec(64, 16, 4)).eval()


@pytest.fixture(scope="module")
def gan():
    spec = GANSpec(128, 16, 4)
    return Generator(spec).eval(), Discriminator(spec).eval()


@pytest.fixture(scope="module")
def unet():
    torch.manual_seed(0)
    return UNet(UNetSpec(16, 4, timesteps=64)).eval()


class TestVAE:
    def test_encode_shapes(self, vae):
        mu, logvar = vae_encode(vae, torch.rand(2, 1, 16, 16))
        assert mu.shape == logvar.shape == (2, 64)

    def test_encode_deterministic_and_finite(self, vae):
        x = torch.rand(3, 1, 16, 16)
        a, b = vae_encode(vae, x), vae_encode(vae, x)
        assert torch.equal(a[0], b[0]) and torch.equal(a[1], b[1])
        assert torch.isfinite(a[0]).all() and torch.isfinite(a[1]).all()

    def test_encode_wrong_size(self, vae):
        with pytest.raises(InvalidInput):
            vae_encode(vae, torch.rand(1, 1, 32, 32))

    def test_decode_range_and_shape(self, vae):
        out = vae_decode(vae, torch.randn(3, 64) * 5)
        assert out.shape == (3, 1, 16, 16)
        assert out.min() > 0 and out.max() < 1

    def test_decode_deterministic(self, vae):
        z = torch.randn(2, 64)
        assert torch.equal(vae_decode(vae, z), vae_decode(vae, z))

    def test_decode_wrong_latent(self, vae):
        with pytest.raises(InvalidArgument):
            vae_decode(vae, torch.randn(2, 32))

    def test_full_resolution_shapes(self):
        m = VAE(VAESpec(128, 64)).eval()
        with torch.no_grad():
            x_hat, mu, _ = m(torch.rand(1, 1, 64, 64), torch.zeros(1, 128))
        assert x_hat.shape == (1, 1, 64, 64) and mu.shape == (1, 128)


class TestReparameterize:
    def test_zero_noise(self):
        mu = torch.randn(4, 8)
        assert torch.equal(reparameterize(mu, torch.randn(4, 8), torch.zeros(4, 8)), mu)

    def test_unit_noise(self):
        mu = torch.randn(4, 8)
        assert torch.allclose(reparameterize(mu, torch.zeros(4, 8), torch.ones(4, 8)), mu + 1)

    def test_scalar(self):
        z = reparameterize(torch.zeros(1), torch.tensor([math.log(4.0)]), torch.tensor([0.5]))
        assert float(z) == pytest.approx(1.0, abs=1e-7)

    def test_mismatch(self):
        with pytest.raises(InvalidArgument):
            reparameterize(torch.zeros(2, 3), torch.zeros(2, 4), torch.zeros(2, 3))


class TestGAN:
    def test_generate(self, gan):
        G, _ = gan
        with torch.no_grad():
            out = gan_generate(G, torch.randn(5, 128) * 4)
        assert out.shape == (5, 1, 16, 16)
        assert out.min() > -1 and out.max() < 1

    def test_generate_wrong_latent(self, gan):
        with pytest.raises(InvalidArgument):
            gan_generate(gan[0], torch.randn(2, 64))

    def test_discriminate(self, gan):
        _, D = gan
        x = torch.rand(4, 1, 16, 16) * 2 - 1
        with torch.no_grad():
            a, b = discriminate(D, x), discriminate(D, x)
        assert a.shape == (4,)
        assert torch.equal(a, b) and torch.isfinite(a).all()

    def test_discriminate_wrong_size(self, gan):
        with pytest.raises(InvalidInput):
            discriminate(gan[1], torch.zeros(1, 1, 8, 8))

    def test_xavier_init_and_seed(self):
        spec = GANSpec(128, 16, 4)
        G1, G2 = Generator(spec), Generator(spec)
        for p1, p2 in zip(G1.parameters(), G2.parameters()):
            assert torch.equal(p1, p2)
        w = G1.input[0].weight
        assert w.abs().max() <= xavier_bound(w.shape[1], w.shape[0])

    def test_leaky_slope(self, gan):
        slopes = {m.negative_slope for m in gan[1].modules() if isinstance(m, torch.nn.LeakyReLU)}
        assert slopes == {0.2}


class TestUNet:
    @pytest.mark.parametrize("res", [16, 32, 64])
    def test_spatial_identity(self, res):
        m = UNet(UNetSpec(res, 8, timesteps=16)).eval()
        with torch.no_grad():
            out = unet_predict_noise(m, torch.randn(2, 1, res, res), torch.tensor([0, 15]))
        assert out.shape == (2, 1, res, res)

    def test_time_conditioning(self, unet):
        x = torch.randn(2, 1, 16, 16)
        with torch.no_grad():
            a = unet_predict_noise(unet, x, torch.zeros(2, dtype=torch.long))
            b = unet_predict_noise(unet, x, torch.full((2,), 63))
        assert float((a - b).norm()) > 0

    def test_deterministic(self, unet):
        x, t = torch.randn(2, 1, 16, 16), torch.tensor([3, 9])
        with torch.no_grad():
            assert torch.equal(unet(x, t), unet(x, t))

    @pytest.mark.parametrize("t", [-1, 64])
    def test_step_range(self, unet, t):
        with pytest.raises(InvalidArgument):
            unet(torch.randn(1, 1, 16, 16), torch.tensor([t]))

    def test_group_norm_groups(self, unet):
        groups = {m.num_groups for m in unet.modules() if isinstance(m, torch.nn.GroupNorm)}
        assert groups == {4}

    def test_bad_resolution(self):
        with pytest.raises(InvalidSpec):
            UNetSpec(20)


class TestSamplers:
    def test_latent_samplers(self, vae, gan):
        a = vae_sample(vae, 3, seed=4, batch_size=2)
        b = vae_sample(vae, 3, seed=4, batch_size=3)
        assert a.shape == (3, 1, 16, 16)
        assert torch.allclose(a, b, atol=1e-6)  # batching does not change the draws
        g1, g2 = gan_sample(gan[0], 1, seed=9), gan_sample(gan[0], 1, seed=9)
        assert g1.shape == (1, 1, 16, 16) and torch.equal(g1, g2)

    def test_on_batch_callback(self, gan):
        seen = []
        gan_sample(gan[0], 5, seed=0, batch_size=2, on_batch=lambda s, c: seen.append((s, c)))
        assert seen == [(0, 2), (2, 2), (4, 1)]

    def test_ddpm_zero_noise_model_matches_scalar_recursion(self):
        sched = linear_beta_schedule(8)
        zero = lambda x, t: torch.zeros_like(x)  # noqa: E731
        out = ddpm_sample(zero, sched, 1, seed=11, resolution=1)
        # replay the same random stream as a scalar recursion
        g = torch.Generator().manual_seed(11)
        x = float(torch.randn(1, 1, 1, 1, generator=g))
        for t in range(7, -1, -1):
            x = x / math.sqrt(sched.alphas[t])
            if t > 0:
                x += math.sqrt(sched.betas[t]) * float(torch.randn(1, 1, 1, 1, generator=g))
        assert float(out) == pytest.approx(x, rel=1e-5)

    def test_ddpm_single_step_closed_form(self):
        sched = NoiseSchedule(np.array([0.3]))
        const = lambda x, t: torch.full_like(x, 0.25)  # noqa: E731
        out = ddpm_sample(const, sched, 1, seed=2, resolution=1)
        x1 = float(torch.randn(1, 1, 1, 1, generator=torch.Generator().manual_seed(2)))
        expected = (x1 - 0.3 / math.sqrt(1 - 0.7) * 0.25) / math.sqrt(0.7)
        assert float(out) == pytest.approx(expected, rel=1e-6)

    def test_ddpm_shape_and_determinism(self, unet):
        sched = linear_beta_schedule(64)
        a = ddpm_sample(unet, sched, 2, seed=1)
        b = ddpm_sample(unet, sched, 2, seed=1)
        assert a.shape == (2, 1, 16, 16)
        assert torch.equal(a, b) and torch.isfinite(a).all()


def test_full_scale_counts_are_stable():
    # frozen after first computation; the layouts are pinned decisions
    assert count_parameters(VAESpec(64, 64)) == 24_809_281
    assert count_parameters(GANSpec(128, 64)) == 8_592_962
    assert count_parameters(UNetSpec(64)) == 23_054_209
