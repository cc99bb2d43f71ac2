"""VAE, GAN and DDPM U-Net: architecture specs, modules and generation procedures."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import torch
from torch import nn

from .errors import InvalidArgument, InvalidInput, InvalidSpec
from .nn_core import (
    InitScheme,
    LayerSpec,
    ResidualBlock,
    ResidualBlockSpec,
    act,
    apply_init,
    batch_norm,
    build_layer,
    build_sequence,
    chain_shape,
    conv,
    conv_transpose_x2,
    group_norm,
    linear,
    max_pool,
    sinusoidal_time_embedding,
    upsample,
)
from .schedules import NoiseSchedule

LEAKY_SLOPE = 0.2
TIME_EMBED_DIM = 128


def _block(
    cin: int,
    cout: int,
    resample: str = "none",
    *,
    n_convs: int = 2,
    norm: str | None = "batch",
    activation: LayerSpec = act("relu"),
    groups: int = 4,
    time_dim: int | None = None,
) -> ResidualBlockSpec:
    """Residual block with ``n_convs`` 3x3 convs; the first conv carries any resampling."""
    layers: list[LayerSpec] = []
    for i in range(n_convs):
        c_in = cin if i == 0 else cout
        if i == 0 and resample == "down":
            layers.append(conv(c_in, cout, 3, stride=2))
        elif i == 0 and resample == "up":
            layers.append(conv_transpose_x2(c_in, cout, 3))
        else:
            layers.append(conv(c_in, cout, 3))
        if norm == "batch":
            layers.append(batch_norm(cout))
        elif norm == "group":
            layers.append(group_norm(cout, groups))
        if i < n_convs - 1:
            layers.append(activation)
    if resample == "down":
        shortcut: str | LayerSpec = conv(cin, cout, 1, stride=2, padding=0)
    elif resample == "up":
        shortcut = conv_transpose_x2(cin, cout, 1)
    elif cin != cout:
        shortcut = conv(cin, cout, 1, padding=0)
    else:
        shortcut = "identity"
    return ResidualBlockSpec(tuple(layers), shortcut, resample, time_dim, post_activation=activation)


def _check_resolution(resolution: int, multiple: int, name: str):
    if resolution < multiple or resolution % multiple:
        raise InvalidSpec(f"{name} needs a resolution divisible by {multiple}, got {resolution}")


def _ch(n: int, divisor: int) -> int:
    if divisor < 1:
        raise InvalidSpec("width_divisor must be >= 1")
    return max(n // divisor, 1)


# ---------------------------------------------------------------------------
# specs


@dataclass(frozen=True)
class VAESpec:
    """Residual conv VAE.

    Encoder: stem conv to 64 channels, then seven blocks
    ``64->128->256->512->512->256->128->64`` with stride-2 in the first four,
    flatten, and two linear heads (mean, log-variance).  The decoder mirrors it
    with transposed convolutions and ends in a sigmoid.
    """

    latent_dim: int = 64
    resolution: int = 64
    width_divisor: int = 1

    ENCODER_CHAIN = ((64, 128, "down"), (128, 256, "down"), (256, 512, "down"), (512, 512, "down"),
                     (512, 256, "none"), (256, 128, "none"), (128, 64, "none"))
    DECODER_CHAIN = ((64, 128, "none"), (128, 256, "none"), (256, 512, "none"), (512, 512, "up"),
                     (512, 256, "up"), (256, 128, "up"), (128, 64, "up"))

    def __post_init__(self):
        if self.latent_dim < 1:
            raise InvalidSpec("latent_dim must be >= 1")
        _check_resolution(self.resolution, 16, "VAE")

    @property
    def bottleneck(self) -> tuple[int, int, int]:
        r = self.resolution // 16
        return (_ch(64, self.width_divisor), r, r)

    @property
    def flat_dim(self) -> int:
        return math.prod(self.bottleneck)

    def encoder_stem(self) -> list[LayerSpec]:
        c = _ch(64, self.width_divisor)
        return [conv(1, c, 3), batch_norm(c), act("relu")]

    def encoder_blocks(self) -> list[ResidualBlockSpec]:
        d = self.width_divisor
        return [_block(_ch(a, d), _ch(b, d), r) for a, b, r in self.ENCODER_CHAIN]

    def heads(self) -> list[LayerSpec]:
        return [linear(self.flat_dim, self.latent_dim), linear(self.flat_dim, self.latent_dim)]

    def decoder_input(self) -> list[LayerSpec]:
        return [linear(self.latent_dim, self.flat_dim), act("relu")]

    def decoder_blocks(self) -> list[ResidualBlockSpec]:
        d = self.width_divisor
        return [_block(_ch(a, d), _ch(b, d), r) for a, b, r in self.DECODER_CHAIN]

    def decoder_head(self) -> list[LayerSpec]:
        return [conv(_ch(64, self.width_divisor), 1, 3), act("sigmoid")]

    def components(self):
        return (self.encoder_stem() + self.encoder_blocks() + self.heads()
                + self.decoder_input() + self.decoder_blocks() + self.decoder_head())

    def validate(self):
        shape = chain_shape(self.encoder_stem() + self.encoder_blocks(), (1, self.resolution, self.resolution))
        if shape != self.bottleneck:
            raise InvalidSpec(f"encoder ends at {shape}, expected {self.bottleneck}")
        for head in self.heads():
            chain_shape([head], (self.flat_dim,))
        chain_shape(self.decoder_input(), (self.latent_dim,))
        out = chain_shape(self.decoder_blocks() + self.decoder_head(), self.bottleneck)
        if out != (1, self.resolution, self.resolution):
            raise InvalidSpec(f"decoder produces {out}")


@dataclass(frozen=True)
class GANSpec:
    """Generator: linear -> 512 x r x r, five residual blocks 512->256->128->64->64->64
    (first four upsample 2x), 3x3 conv to one channel, tanh.

    Discriminator: stem conv to 32 channels, four stride-2 residual blocks
    32->64->128->256->512 with LeakyReLU(0.2), flatten, linear -> 1 logit.
    """

    latent_dim: int = 128
    resolution: int = 64
    width_divisor: int = 1
    init: InitScheme = InitScheme("xavier-uniform", 0)

    GENERATOR_CHAIN = ((512, 256, "up"), (256, 128, "up"), (128, 64, "up"), (64, 64, "up"), (64, 64, "none"))
    DISCRIMINATOR_CHAIN = ((32, 64), (64, 128), (128, 256), (256, 512))

    def __post_init__(self):
        if self.latent_dim < 1:
            raise InvalidSpec("latent_dim must be >= 1")
        _check_resolution(self.resolution, 16, "GAN")

    @property
    def _r(self) -> int:
        return self.resolution // 16

    def generator_input(self) -> list[LayerSpec]:
        c = _ch(512, self.width_divisor)
        return [linear(self.latent_dim, c * self._r * self._r), act("relu")]

    def generator_blocks(self) -> list[ResidualBlockSpec]:
        d = self.width_divisor
        return [_block(_ch(a, d), _ch(b, d), r) for a, b, r in self.GENERATOR_CHAIN]

    def generator_head(self) -> list[LayerSpec]:
        return [conv(_ch(64, self.width_divisor), 1, 3), act("tanh")]

    def discriminator_stem(self) -> list[LayerSpec]:
        return [conv(1, _ch(32, self.width_divisor), 3), act("leaky-relu", LEAKY_SLOPE)]

    def discriminator_blocks(self) -> list[ResidualBlockSpec]:
        d = self.width_divisor
        leaky = act("leaky-relu", LEAKY_SLOPE)
        return [_block(_ch(a, d), _ch(b, d), "down", norm=None, activation=leaky)
                for a, b in self.DISCRIMINATOR_CHAIN]

    def discriminator_head(self) -> list[LayerSpec]:
        return [linear(_ch(512, self.width_divisor) * self._r * self._r, 1)]

    def generator_components(self):
        return self.generator_input() + self.generator_blocks() + self.generator_head()

    def discriminator_components(self):
        return self.discriminator_stem() + self.discriminator_blocks() + self.discriminator_head()

    def components(self):
        return self.generator_components() + self.discriminator_components()

    def validate(self):
        chain_shape(self.generator_input(), (self.latent_dim,))
        c = _ch(512, self.width_divisor)
        out = chain_shape(self.generator_blocks() + self.generator_head(), (c, self._r, self._r))
        if out != (1, self.resolution, self.resolution):
            raise InvalidSpec(f"generator produces {out}")
        feat = chain_shape(self.discriminator_stem() + self.discriminator_blocks(),
                           (1, self.resolution, self.resolution))
        chain_shape(self.discriminator_head(), (math.prod(feat),))


@dataclass(frozen=True)
class UNetSpec:
    """U-Net noise predictor.

    Stem conv 1->64; down blocks 64->128->256->256 each followed by 2x2 max-pool;
    bottleneck 256->512->512->256; up blocks (256+256)->256, (256+128)->128,
    (128+64)->64, each preceded by 2x bilinear upsampling (corner-aligned) and
    concatenation with the input of the matching down block; head conv 64->1.
    Every block has three 3x3 convs with 4-group GroupNorm and a per-block
    linear projection of the sinusoidal time embedding.
    """

    resolution: int = 64
    width_divisor: int = 1
    time_embedding_dim: int = TIME_EMBED_DIM
    timesteps: int = 1024
    groups: int = 4

    DOWN_CHAIN = ((64, 128), (128, 256), (256, 256))
    MID_CHAIN = ((256, 512), (512, 512), (512, 256))
    UP_CHAIN = ((256, 256, 256), (256, 128, 128), (128, 64, 64))  # (from below, skip, out)

    def __post_init__(self):
        _check_resolution(self.resolution, 8, "U-Net")
        if self.time_embedding_dim % 2:
            raise InvalidSpec("time embedding dim must be even")
        if self.timesteps < 1:
            raise InvalidSpec("timesteps must be >= 1")

    def _blk(self, cin, cout):
        return _block(cin, cout, n_convs=3, norm="group", groups=self.groups,
                      time_dim=self.time_embedding_dim)

    def stem(self) -> LayerSpec:
        return conv(1, _ch(64, self.width_divisor), 3)

    def down_blocks(self):
        d = self.width_divisor
        return [self._blk(_ch(a, d), _ch(b, d)) for a, b in self.DOWN_CHAIN]

    def mid_blocks(self):
        d = self.width_divisor
        return [self._blk(_ch(a, d), _ch(b, d)) for a, b in self.MID_CHAIN]

    def up_blocks(self):
        d = self.width_divisor
        return [self._blk(_ch(a, d) + _ch(s, d), _ch(b, d)) for a, s, b in self.UP_CHAIN]

    def head(self) -> LayerSpec:
        return conv(_ch(64, self.width_divisor), 1, 3)

    def components(self):
        return [self.stem(), *self.down_blocks(), *self.mid_blocks(), *self.up_blocks(), self.head()]

    def validate(self):
        h = chain_shape([self.stem()], (1, self.resolution, self.resolution))
        skips = []
        for blk in self.down_blocks():
            skips.append(h)
            h = chain_shape([blk, max_pool(2)], h)
        h = chain_shape(self.mid_blocks(), h)
        for blk in self.up_blocks():
            h = chain_shape([upsample(2)], h)
            skip = skips.pop()
            if skip[1:] != h[1:]:
                raise InvalidSpec(f"skip {skip} does not match upsampled {h}")
            h = chain_shape([blk], (h[0] + skip[0], *h[1:]))
        out = chain_shape([self.head()], h)
        if out != (1, self.resolution, self.resolution):
            raise InvalidSpec(f"U-Net produces {out}")


# ---------------------------------------------------------------------------
# modules


def _check_images(x: torch.Tensor, resolution: int):
    if x.dim() != 4 or x.shape[1] != 1 or x.shape[2] != resolution or x.shape[3] != resolution:
        raise InvalidInput(f"expected [B,1,{resolution},{resolution}] images, got {tuple(x.shape)}")


def _check_latent(z: torch.Tensor, latent_dim: int):
    if z.dim() != 2 or z.shape[1] != latent_dim:
        raise InvalidArgument(f"expected [B,{latent_dim}] latents, got {tuple(z.shape)}")


class VAE(nn.Module):
    def __init__(self, spec: VAESpec):
        super().__init__()
        spec.validate()
        self.spec = spec
        self.enc_stem = build_sequence(spec.encoder_stem())
        self.enc_blocks = nn.Sequential(*(ResidualBlock(b) for b in spec.encoder_blocks()))
        mu_head, logvar_head = spec.heads()
        self.mu_head = build_layer(mu_head)
        self.logvar_head = build_layer(logvar_head)
        self.dec_input = build_sequence(spec.decoder_input())
        self.dec_blocks = nn.Sequential(*(ResidualBlock(b) for b in spec.decoder_blocks()))
        self.dec_head = build_sequence(spec.decoder_head())

    def encode(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        _check_images(x, self.spec.resolution)
        h = self.enc_blocks(self.enc_stem(x)).flatten(1)
        return self.mu_head(h), self.logvar_head(h)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        _check_latent(z, self.spec.latent_dim)
        h = self.dec_input(z).reshape(-1, *self.spec.bottleneck)
        return self.dec_head(self.dec_blocks(h))

    def forward(self, x: torch.Tensor, eps: torch.Tensor):
        mu, logvar = self.encode(x)
        return self.decode(reparameterize(mu, logvar, eps)), mu, logvar


class Generator(nn.Module):
    def __init__(self, spec: GANSpec):
        super().__init__()
        spec.validate()
        self.spec = spec
        self.input = build_sequence(spec.generator_input())
        self.blocks = nn.Sequential(*(ResidualBlock(b) for b in spec.generator_blocks()))
        self.head = build_sequence(spec.generator_head())
        apply_init(self, spec.init)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        _check_latent(z, self.spec.latent_dim)
        r = self.spec.resolution // 16
        h = self.input(z).reshape(z.shape[0], -1, r, r)
        return self.head(self.blocks(h))


class Discriminator(nn.Module):
    def __init__(self, spec: GANSpec):
        super().__init__()
        spec.validate()
        self.spec = spec
        self.stem = build_sequence(spec.discriminator_stem())
        self.blocks = nn.Sequential(*(ResidualBlock(b) for b in spec.discriminator_blocks()))
        self.head = build_sequence(spec.discriminator_head())
        apply_init(self, InitScheme(spec.init.kind, spec.init.seed + 1))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _check_images(x, self.spec.resolution)
        return self.head(self.blocks(self.stem(x)).flatten(1)).squeeze(1)


class UNet(nn.Module):
    def __init__(self, spec: UNetSpec):
        super().__init__()
        spec.validate()
        self.spec = spec
        self.stem = build_layer(spec.stem())
        self.down = nn.ModuleList(ResidualBlock(b) for b in spec.down_blocks())
        self.mid = nn.ModuleList(ResidualBlock(b) for b in spec.mid_blocks())
        self.up = nn.ModuleList(ResidualBlock(b) for b in spec.up_blocks())
        self.pool = build_layer(max_pool(2))
        self.upsample = build_layer(upsample(2, align_corners=True))
        self.head = build_layer(spec.head())

    def forward(self, x: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1] != 1:
            raise InvalidInput(f"expected [B,1,H,W] images, got {tuple(x.shape)}")
        t = torch.as_tensor(t, dtype=torch.long).reshape(-1)
        if t.numel() == 1 and x.shape[0] != 1:
            t = t.expand(x.shape[0])
        if t.shape[0] != x.shape[0]:
            raise InvalidArgument("need one time step per image")
        if (t < 0).any() or (t >= self.spec.timesteps).any():
            raise InvalidArgument(f"time step outside [0, {self.spec.timesteps})")
        temb = sinusoidal_time_embedding(t, self.spec.time_embedding_dim).to(x.dtype)

        h = self.stem(x)
        skips = []
        for blk in self.down:
            skips.append(h)
            h = self.pool(blk(h, temb))
        for blk in self.mid:
            h = blk(h, temb)
        for blk in self.up:
            h = torch.cat([self.upsample(h), skips.pop()], dim=1)
            h = blk(h, temb)
        return self.head(h)


def build_model(spec) -> nn.Module | tuple[nn.Module, nn.Module]:
    if isinstance(spec, VAESpec):
        return VAE(spec)
    if isinstance(spec, GANSpec):
        return Generator(spec), Discriminator(spec)
    if isinstance(spec, UNetSpec):
        return UNet(spec)
    raise InvalidSpec(f"unknown model spec {type(spec).__name__}")


# ---------------------------------------------------------------------------
# operations


def vae_encode(model: VAE, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    return model.encode(x)


def reparameterize(mu: torch.Tensor, logvar: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    if mu.shape != logvar.shape or mu.shape != eps.shape:
        raise InvalidArgument("mu, logvar and eps must share a shape")
    return mu + torch.exp(0.5 * logvar) * eps


def vae_decode(model: VAE, z: torch.Tensor) -> torch.Tensor:
    return model.decode(z)


def gan_generate(generator: Generator, z: torch.Tensor) -> torch.Tensor:
    return generator(z)


def discriminate(discriminator: Discriminator, x: torch.Tensor) -> torch.Tensor:
    return discriminator(x)


def unet_predict_noise(unet: UNet, x_t: torch.Tensor, t) -> torch.Tensor:
    return unet(x_t, t)


class _EvalMode:
    def __init__(self, module):
        self.module = module if isinstance(module, nn.Module) else None

    def __enter__(self):
        if self.module is not None:
            self.was_training = self.module.training
            self.module.eval()

    def __exit__(self, *exc):
        if self.module is not None:
            self.module.train(self.was_training)


def _latent_sample(decode: Callable, module: nn.Module, latent_dim: int, n: int, seed: int,
                   batch_size: int, on_batch: Callable[[int, int], None] | None = None) -> torch.Tensor:
    if n < 1:
        raise InvalidArgument("n must be >= 1")
    gen = torch.Generator().manual_seed(int(seed))
    z = torch.randn(n, latent_dim, generator=gen)
    out = []
    with torch.no_grad(), _EvalMode(module):
        for i in range(0, n, batch_size):
            out.append(decode(z[i:i + batch_size]))
            if on_batch is not None:
                on_batch(i, out[-1].shape[0])
    return torch.cat(out)


def vae_sample(model: VAE, n: int, seed: int, batch_size: int = 256, on_batch=None) -> torch.Tensor:
    """Decode ``n`` standard-normal latents; images in (0, 1).

    ``on_batch(start, count)`` is called after each finished batch.
    """
    return _latent_sample(model.decode, model, model.spec.latent_dim, n, seed, batch_size, on_batch)


def gan_sample(generator: Generator, n: int, seed: int, batch_size: int = 256, on_batch=None) -> torch.Tensor:
    """Generate ``n`` images in (-1, 1) from standard-normal latents."""
    return _latent_sample(generator, generator, generator.spec.latent_dim, n, seed, batch_size,
                          on_batch)


def ddpm_sample(
    model: Callable,
    schedule: NoiseSchedule,
    n: int,
    seed: int,
    resolution: int | None = None,
    batch_size: int = 256,
    progress: Callable[[int], None] | None = None,
    on_batch: Callable[[int, int], None] | None = None,
) -> torch.Tensor:
    """Ancestral sampling with posterior variance sigma_t^2 = beta_t.

    ``model(x_t, t)`` predicts the added noise.  Samples are returned unclipped.
    """
    if n < 1:
        raise InvalidArgument("n must be >= 1")
    if resolution is None:
        resolution = model.spec.resolution
    gen = torch.Generator().manual_seed(int(seed))
    betas = schedule.betas
    alphas = schedule.alphas
    abars = schedule.alpha_bars
    out = []
    with torch.no_grad(), _EvalMode(model):
        for start in range(0, n, batch_size):
            b = min(batch_size, n - start)
            x = torch.randn(b, 1, resolution, resolution, generator=gen)
            for t in range(schedule.T - 1, -1, -1):
                steps = torch.full((b,), t, dtype=torch.long)
                eps_hat = model(x, steps)
                coef = float(betas[t] / math.sqrt(1.0 - abars[t]))
                x = (x - coef * eps_hat) / math.sqrt(alphas[t])
                if t > 0:
                    x = x + math.sqrt(betas[t]) * torch.randn(x.shape, generator=gen)
                if progress is not None:
                    progress(t)
            out.append(x)
            if on_batch is not None:
                on_batch(start, b)
    return torch.cat(out)
