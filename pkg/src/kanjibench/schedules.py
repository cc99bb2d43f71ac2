"""Diffusion noise schedules, learning-rate schedules and closed-form forward diffusion."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import InvalidArgument

LINEAR_BETA_START = 1e-4
LINEAR_BETA_END = 2e-2
COSINE_OFFSET = 0.008
MAX_BETA = 0.999


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Per-step betas with derived ``alphas = 1 - betas`` and cumulative products."""

    betas: np.ndarray
    kind: str = "custom"
    alphas: np.ndarray = field(init=False)
    alpha_bars: np.ndarray = field(init=False)

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        if betas.ndim != 1 or len(betas) < 1:
            raise InvalidArgument("betas must be a non-empty vector")
        if not np.all((betas > 0) & (betas < 1)):
            raise InvalidArgument("every beta must lie in (0, 1)")
        betas.setflags(write=False)
        alphas = 1.0 - betas
        alpha_bars = np.cumprod(alphas)
        alphas.setflags(write=False)
        alpha_bars.setflags(write=False)
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "alpha_bars", alpha_bars)

    @property
    def T(self) -> int:
        return len(self.betas)

    def tensor(self, name: str, dtype=torch.float32) -> torch.Tensor:
        return torch.tensor(getattr(self, name), dtype=dtype)


def linear_beta_schedule(T: int) -> NoiseSchedule:
    if T < 2:
        raise InvalidArgument(f"need at least 2 steps, got {T}")
    # np.linspace writes both endpoints exactly
    return NoiseSchedule(np.linspace(LINEAR_BETA_START, LINEAR_BETA_END, T), kind="linear")


def cosine_alpha_bar_fn(t: float, T: int, s: float = COSINE_OFFSET) -> float:
    return math.cos(((t / T) + s) / (1 + s) * math.pi / 2) ** 2


def cosine_beta_schedule(T: int, s: float = COSINE_OFFSET) -> NoiseSchedule:
    """Squared-cosine schedule; step i spans f(i) -> f(i+1), betas clipped at 0.999."""
    if T < 2:
        raise InvalidArgument(f"need at least 2 steps, got {T}")
    steps = np.arange(T + 1, dtype=np.float64)
    f = np.cos(((steps / T) + s) / (1 + s) * np.pi / 2) ** 2
    alpha_bar = f / f[0]
    betas = np.minimum(1.0 - alpha_bar[1:] / alpha_bar[:-1], MAX_BETA)
    return NoiseSchedule(betas, kind="cosine")


def make_noise_schedule(kind: str, T: int) -> NoiseSchedule:
    if kind == "linear":
        return linear_beta_schedule(T)
    if kind == "cosine":
        return cosine_beta_schedule(T)
    raise InvalidArgument(f"unknown noise schedule {kind!r}")


def forward_diffuse(x0: torch.Tensor, t, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """Sample q(x_t | x_0) in closed form: sqrt(abar_t) x0 + sqrt(1 - abar_t) eps.

    ``t`` is a scalar step or a per-sample tensor of steps (length = batch).
    """
    if eps.shape != x0.shape:
        raise InvalidArgument(f"noise shape {tuple(eps.shape)} != image shape {tuple(x0.shape)}")
    steps = torch.as_tensor(t, dtype=torch.long)
    if steps.numel() and (steps.min() < 0 or steps.max() >= schedule.T):
        raise InvalidArgument(f"step out of range [0, {schedule.T})")
    abar = torch.tensor(schedule.alpha_bars, dtype=torch.float64)[steps]
    if steps.dim() == 1:
        abar = abar.reshape(-1, *([1] * (x0.dim() - 1)))
    abar = abar.to(x0.dtype)
    return abar.sqrt() * x0 + (1 - abar).sqrt() * eps


@dataclass(frozen=True)
class LRSchedule:
    kind: str = "constant"  # one-cycle | cosine-anneal | constant
    start_lr: float = 1e-4
    peak_lr: float = 1e-4
    final_lr: float = 0.0
    warm_steps: int = 0
    total_steps: int = 1

    def __post_init__(self):
        if self.kind not in ("one-cycle", "cosine-anneal", "constant"):
            raise InvalidArgument(f"unknown lr schedule {self.kind!r}")
        if min(self.start_lr, self.peak_lr, self.final_lr) < 0:
            raise InvalidArgument("learning rates must be non-negative")
        if not 0 <= self.warm_steps <= self.total_steps:
            raise InvalidArgument("need 0 <= warm_steps <= total_steps")


def _cos_interp(a: float, b: float, frac: float) -> float:
    w = (1 + math.cos(math.pi * frac)) / 2
    return a * w + b * (1 - w)


def lr_at(schedule: LRSchedule, step: int) -> float:
    if step < 0 or step > schedule.total_steps:
        raise InvalidArgument(f"step {step} outside [0, {schedule.total_steps}]")
    if schedule.kind == "constant":
        return schedule.start_lr
    if schedule.kind == "cosine-anneal":
        if schedule.total_steps == 0:
            return schedule.start_lr
        return _cos_interp(schedule.start_lr, schedule.final_lr, step / schedule.total_steps)
    warm, total = schedule.warm_steps, schedule.total_steps
    if step <= warm:
        if warm == 0:
            return schedule.peak_lr
        return _cos_interp(schedule.start_lr, schedule.peak_lr, step / warm)
    return _cos_interp(schedule.peak_lr, schedule.final_lr, (step - warm) / (total - warm))
