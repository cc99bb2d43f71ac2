"""Training objectives for the three families and the discriminator accuracy gate."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .errors import InvalidArgument, KanjiBenchError

BCE_EPS = 1e-7
GP_LAMBDA = 10.0


@dataclass
class LossReport:
    total: torch.Tensor
    components: dict[str, torch.Tensor] = field(default_factory=dict)
    reduction: str = "mean-over-batch"

    def scalars(self) -> dict[str, float]:
        out = {k: float(v.detach()) for k, v in self.components.items()}
        out["total"] = float(self.total.detach())
        return out


def _in_unit_range(t: torch.Tensor) -> bool:
    with torch.no_grad():
        return bool(t.min() >= 0) and bool(t.max() <= 1)


def vae_loss(x: torch.Tensor, x_hat: torch.Tensor, mu: torch.Tensor, logvar: torch.Tensor) -> LossReport:
    """Pixel-summed BCE reconstruction plus KL to N(0, I), both averaged over the batch."""
    if x.shape != x_hat.shape:
        raise InvalidArgument(f"shape mismatch {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    if mu.shape != logvar.shape:
        raise InvalidArgument("mu and logvar must share a shape")
    if not (_in_unit_range(x) and _in_unit_range(x_hat)):
        raise InvalidArgument("vae_loss expects x and x_hat in [0, 1]")
    p = x_hat.clamp(BCE_EPS, 1 - BCE_EPS)
    bce = -(x * torch.log(p) + (1 - x) * torch.log1p(-p))
    recon = bce.flatten(1).sum(1).mean()
    kl = (0.5 * (mu.pow(2) + logvar.exp() - 1 - logvar)).flatten(1).sum(1).mean()
    return LossReport(recon + kl, {"recon": recon, "kl": kl})


def gan_bce_losses(real_logits: torch.Tensor, fake_logits: torch.Tensor) -> tuple[LossReport, LossReport]:
    """Standard discriminator BCE and the non-saturating generator loss."""
    d_real = F.binary_cross_entropy_with_logits(real_logits, torch.ones_like(real_logits))
    d_fake = F.binary_cross_entropy_with_logits(fake_logits, torch.zeros_like(fake_logits))
    g = F.binary_cross_entropy_with_logits(fake_logits, torch.ones_like(fake_logits))
    return (LossReport(d_real + d_fake, {"d_real": d_real, "d_fake": d_fake}),
            LossReport(g, {"g_fake": g}))


def wasserstein_losses(real_logits: torch.Tensor, fake_logits: torch.Tensor) -> tuple[LossReport, LossReport]:
    """Critic loss mean(fake) - mean(real), before any gradient penalty."""
    d_real = -real_logits.mean()
    d_fake = fake_logits.mean()
    g = -fake_logits.mean()
    return (LossReport(d_real + d_fake, {"d_real": d_real, "d_fake": d_fake}),
            LossReport(g, {"g_fake": g}))


def hinge_losses(real_logits: torch.Tensor, fake_logits: torch.Tensor) -> tuple[LossReport, LossReport]:
    d_real = F.relu(1 - real_logits).mean()
    d_fake = F.relu(1 + fake_logits).mean()
    g = -fake_logits.mean()
    return (LossReport(d_real + d_fake, {"d_real": d_real, "d_fake": d_fake}),
            LossReport(g, {"g_fake": g}))


GAN_LOSSES = {
    "bce": gan_bce_losses,
    "wasserstein": wasserstein_losses,
    "hinge": hinge_losses,
}


def generator_loss(kind: str, fake_logits: torch.Tensor) -> LossReport:
    return GAN_LOSSES[kind](fake_logits.detach(), fake_logits)[1]


def gradient_penalty(
    discriminator,
    real_batch: torch.Tensor,
    fake_batch: torch.Tensor,
    lam: float = GP_LAMBDA,
    seed: int | None = None,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """lam * mean((||grad_x D(x~)||_2 - 1)^2) at per-sample random interpolates x~."""
    if real_batch.shape != fake_batch.shape:
        raise InvalidArgument("real and fake batches must share a shape")
    if generator is None:
        generator = torch.Generator()
        if seed is not None:
            generator.manual_seed(int(seed))
    b = real_batch.shape[0]
    u = torch.rand(b, generator=generator, dtype=real_batch.dtype)
    u = u.reshape(b, *([1] * (real_batch.dim() - 1)))
    x = (u * real_batch.detach() + (1 - u) * fake_batch.detach()).requires_grad_(True)
    out = discriminator(x)
    (grad,) = torch.autograd.grad(out.sum(), x, create_graph=True, allow_unused=True)
    if grad is None:
        raise KanjiBenchError("discriminator output does not depend on its input")
    norms = grad.flatten(1).norm(2, dim=1)
    return lam * (norms - 1).pow(2).mean()


def ddpm_loss(eps: torch.Tensor, eps_hat: torch.Tensor) -> torch.Tensor:
    if eps.shape != eps_hat.shape:
        raise InvalidArgument(f"shape mismatch {tuple(eps.shape)} vs {tuple(eps_hat.shape)}")
    return F.mse_loss(eps_hat, eps)


def discriminator_accuracy(real_logits: torch.Tensor, fake_logits: torch.Tensor) -> float:
    """Fraction of the combined batch classified by sign; zero logits count as wrong."""
    with torch.no_grad():
        correct = int((real_logits > 0).sum()) + int((fake_logits < 0).sum())
    total = real_logits.numel() + fake_logits.numel()
    return correct / total if total else 0.0
