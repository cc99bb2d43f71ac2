"""Training loops for the three families, checkpoint writing and run logs."""

from __future__ import annotations

import contextlib
import dataclasses
import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator

import numpy as np
import torch

from . import data as data_mod
from .checkpoint import CheckpointState, capture_state, restore_modules, save_checkpoint
from .errors import ConfigError, InvalidArgument, TrainingAborted
from .losses import (GAN_LOSSES, GP_LAMBDA, ddpm_loss, discriminator_accuracy, generator_loss,
                     gradient_penalty, vae_loss)
from .models import VAE, Discriminator, GANSpec, Generator, UNet, UNetSpec, VAESpec
from .nn_core import InitScheme
from .schedules import LRSchedule, NoiseSchedule, forward_diffuse, lr_at, make_noise_schedule

log = logging.getLogger(__name__)

FAMILIES = ("vae", "gan", "ddpm")
VARIANTS = {
    "vae": ("latent64", "latent128", "latent256"),
    "gan": ("bce", "wasserstein", "hinge"),
    "ddpm": ("linear", "cosine"),
}
NORM_MODE = {"vae": "unit-range", "gan": "symmetric-range", "ddpm": "symmetric-range"}
DATA_ENV = "GANJI_DATA"


def _key(name: str, **kw):
    return field(metadata={"key": name}, **kw)


@dataclass
class TrainConfig:
    family: str = _key("family", default="vae")
    variant: str = _key("variant", default="latent64")
    seed: int = _key("seed", default=0)
    resolution: int = _key("resolution", default=64)
    precision: str = _key("precision", default="full")

    data_path: str = _key("data.path", default="")
    synthetic: bool = _key("data.synthetic", default=False)
    synthetic_count: int = _key("data.synthetic_count", default=1024)
    data_limit: int = _key("data.limit", default=0)
    workers: int = _key("data.workers", default=4)
    prefetch: int = _key("data.prefetch", default=2)

    epochs: int = _key("train.epochs", default=100)
    batch_size: int = _key("train.batch_size", default=128)

    width_divisor: int = _key("model.width_divisor", default=1)
    latent_dim: int = _key("model.latent_dim", default=64)
    timesteps: int = _key("model.timesteps", default=1024)

    lr: float = _key("optim.lr", default=1e-4)
    beta1: float = _key("optim.beta1", default=0.9)
    beta2: float = _key("optim.beta2", default=0.999)
    adam_eps: float = _key("optim.eps", default=1e-8)
    d_lr: float = _key("optim.d_lr", default=1e-4)
    d_beta1: float = _key("optim.d_beta1", default=0.9)
    d_beta2: float = _key("optim.d_beta2", default=0.999)

    lr_kind: str = _key("lr.kind", default="constant")
    lr_start: float = _key("lr.start", default=1e-4)
    lr_peak: float = _key("lr.peak", default=1e-4)
    lr_final: float = _key("lr.final", default=0.0)
    lr_warm_epochs: int = _key("lr.warm_epochs", default=0)

    max_d_steps: int = _key("gan.max_d_steps", default=5)
    d_gate: float = _key("gan.gate", default=0.9)
    gp_lambda: float = _key("gan.gp_lambda", default=GP_LAMBDA)

    out_dir: str = _key("out.dir", default="")

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown family {self.family!r}", "family")
        if self.variant not in VARIANTS[self.family]:
            raise ConfigError(
                f"variant {self.variant!r} not one of {VARIANTS[self.family]}", "variant")
        if self.family == "vae" and self.variant != f"latent{self.latent_dim}":
            raise ConfigError(
                f"vae variant {self.variant!r} disagrees with latent_dim={self.latent_dim}",
                "model.latent_dim")
        if self.precision not in ("full", "bf16"):
            raise ConfigError("precision must be 'full' or 'bf16'", "precision")
        for name, lo in (("epochs", 0), ("batch_size", 1), ("resolution", 8), ("width_divisor", 1),
                         ("latent_dim", 1), ("timesteps", 2), ("max_d_steps", 1), ("workers", 1),
                         ("prefetch", 1), ("synthetic_count", 1), ("data_limit", 0)):
            if getattr(self, name) < lo:
                raise ConfigError(f"must be >= {lo}", key_of(name))
        if self.lr_warm_epochs > self.epochs:
            raise ConfigError("warm-up longer than training", "lr.warm_epochs")

    @property
    def norm_mode(self) -> str:
        return NORM_MODE[self.family]

    def lr_schedule(self) -> LRSchedule:
        return LRSchedule(self.lr_kind, self.lr_start, self.lr_peak, self.lr_final,
                          self.lr_warm_epochs, max(self.epochs, 1))

    def model_spec(self):
        if self.family == "vae":
            return VAESpec(self.latent_dim, self.resolution, self.width_divisor)
        if self.family == "gan":
            return GANSpec(self.latent_dim, self.resolution, self.width_divisor,
                           InitScheme("xavier-uniform", self.seed))
        return UNetSpec(self.resolution, self.width_divisor, timesteps=self.timesteps)

    def noise_schedule(self) -> NoiseSchedule:
        return make_noise_schedule(self.variant, self.timesteps)

    def snapshot(self) -> dict:
        """Config values that define the run (output location excluded)."""
        d = dataclasses.asdict(self)
        d.pop("out_dir")
        return d


def key_of(attr: str) -> str:
    return {f.name: f.metadata["key"] for f in dataclasses.fields(TrainConfig)}[attr]


def config_from_snapshot(snapshot: dict) -> TrainConfig:
    names = {f.name for f in dataclasses.fields(TrainConfig)}
    return TrainConfig(**{k: v for k, v in snapshot.items() if k in names})


@dataclass
class RunLog:
    records: list[dict] = field(default_factory=list)

    def append(self, record: dict):
        self.records.append(record)

    def write_jsonl(self, path: str | os.PathLike):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            for r in self.records:
                fh.write(json.dumps(r, sort_keys=True) + "\n")

    @classmethod
    def read_jsonl(cls, path: str | os.PathLike) -> "RunLog":
        with open(path) as fh:
            return cls([json.loads(line) for line in fh if line.strip()])

    def losses(self, key: str = "total") -> list[float]:
        return [r["losses"][key] for r in self.records]


@dataclass
class TrainingData:
    manifest: data_mod.DatasetManifest
    images: torch.Tensor  # preprocessed cache, aligned with manifest
    norm_mode: str
    resolution: int


def resolve_dataset(config: TrainConfig, cache_dir: str | os.PathLike | None = None) -> data_mod.DatasetManifest:
    """Find the corpus: env override, then ``data.path``, then the synthetic fallback."""
    path = os.environ.get(DATA_ENV) or config.data_path
    if path and not config.synthetic:
        manifest = data_mod.load_dataset(path)
    elif config.synthetic:
        base = Path(cache_dir or config.out_dir or ".")
        target = base / f"synthetic_{config.synthetic_count}_{config.seed}"
        if target.is_dir() and any(target.iterdir()):
            manifest = data_mod.load_dataset(target)
        else:
            manifest = data_mod.synthesize_fallback_dataset(config.synthetic_count, config.seed, target)
    else:
        raise data_mod.NoData(
            f"no dataset: set data.path, the {DATA_ENV} environment variable, or data.synthetic")
    if config.data_limit and manifest.image_count > config.data_limit:
        manifest = dataclasses.replace(manifest, image_paths=manifest.image_paths[:config.data_limit])
    return manifest


def prepare_data(config: TrainConfig, cache_dir=None) -> TrainingData:
    manifest = resolve_dataset(config, cache_dir)
    images = data_mod.load_images(manifest, config.norm_mode, config.resolution)
    return TrainingData(manifest, images, config.norm_mode, config.resolution)


# ---------------------------------------------------------------------------
# shared helpers


def _seed_all(seed: int) -> torch.Generator:
    torch.manual_seed(seed)
    return torch.Generator().manual_seed(seed + 1)


def _set_lr(opt: torch.optim.Optimizer, lr: float):
    for g in opt.param_groups:
        g["lr"] = lr


def _autocast(config: TrainConfig):
    if config.precision == "bf16":
        return torch.autocast("cpu", dtype=torch.bfloat16)
    return contextlib.nullcontext()


def _epoch_batches(config: TrainConfig, data: TrainingData, epoch: int) -> Iterator[data_mod.ImageBatch]:
    loader = data_mod.LoaderConfig(config.batch_size, config.seed * 7919 + epoch,
                                   config.workers, config.prefetch)
    return data_mod.make_batches(data.manifest, loader, data.norm_mode, data.resolution, data.images)


class _Meter:
    def __init__(self):
        self.sums: dict[str, float] = {}
        self.count = 0

    def add(self, values: dict[str, float], n: int):
        for k, v in values.items():
            self.sums[k] = self.sums.get(k, 0.0) + v * n
        self.count += n

    def means(self) -> dict[str, float]:
        return {k: v / max(self.count, 1) for k, v in self.sums.items()}


def _check_finite(loss: torch.Tensor, what: str, config: TrainConfig, snapshot: Callable[[], CheckpointState]):
    if torch.isfinite(loss).all():
        return
    diag = None
    if config.out_dir:
        diag = Path(config.out_dir) / "diagnostic.kbt"
        save_checkpoint(snapshot(), diag)
    raise TrainingAborted(f"non-finite {what} loss", diag)


def _check_data_range(data: TrainingData, family: str):
    expected = NORM_MODE[family]
    if data.norm_mode != expected:
        raise InvalidArgument(f"{family} training needs {expected} data, got {data.norm_mode}")


def _finish(config: TrainConfig, state: CheckpointState, runlog: RunLog):
    if config.out_dir:
        out = Path(config.out_dir)
        save_checkpoint(state, out / "checkpoint.kbt")
        runlog.write_jsonl(out / "runlog.jsonl")


# ---------------------------------------------------------------------------
# VAE


def train_vae(config: TrainConfig, data: TrainingData) -> tuple[CheckpointState, RunLog]:
    _check_data_range(data, "vae")
    gen = _seed_all(config.seed)
    model = VAE(config.model_spec())
    sched = config.lr_schedule()
    opt = torch.optim.Adam(model.parameters(), lr=lr_at(sched, 0),
                           betas=(config.beta1, config.beta2), eps=config.adam_eps)
    runlog = RunLog()

    def snapshot(epoch):
        return capture_state("vae", config.variant, epoch, config.seed, config.snapshot(),
                             {"model": model}, {"opt": opt})

    model.train()
    for epoch in range(config.epochs):
        lr = lr_at(sched, epoch)
        _set_lr(opt, lr)
        meter = _Meter()
        t0 = time.perf_counter()
        for batch in _epoch_batches(config, data, epoch):
            x = batch.data
            eps = torch.randn(x.shape[0], config.latent_dim, generator=gen)
            with _autocast(config):
                x_hat, mu, logvar = model(x, eps)
            report = vae_loss(x, x_hat.float(), mu.float(), logvar.float())
            _check_finite(report.total, "vae", config, lambda: snapshot(epoch))
            opt.zero_grad(set_to_none=True)
            report.total.backward()
            opt.step()
            meter.add(report.scalars(), x.shape[0])
        runlog.append({"epoch": epoch + 1, "lr": lr, "losses": meter.means(),
                       "wall_s": time.perf_counter() - t0})
    state = snapshot(config.epochs)
    _finish(config, state, runlog)
    return state, runlog


# ---------------------------------------------------------------------------
# GAN


def adaptive_disc_loop(
    d_step: Callable[[torch.Tensor], float],
    real_batches: Iterator,
    max_steps: int = 5,
    gate: float = 0.9,
) -> int:
    """Run up to ``max_steps`` discriminator updates, one real batch each.

    ``d_step`` performs one update and returns the discriminator accuracy on
    that batch; the loop stops early once accuracy exceeds ``gate`` or the
    batches run out.  Returns the number of updates performed.
    """
    if max_steps < 1:
        raise InvalidArgument("max_steps must be >= 1")
    steps = 0
    for _ in range(max_steps):
        batch = next(real_batches, None)
        if batch is None:
            break
        acc = d_step(batch)
        steps += 1
        if acc > gate:
            break
    return steps


def train_gan(config: TrainConfig, data: TrainingData) -> tuple[CheckpointState, RunLog]:
    _check_data_range(data, "gan")
    gen = _seed_all(config.seed)
    spec = config.model_spec()
    G, D = Generator(spec), Discriminator(spec)
    opt_g = torch.optim.Adam(G.parameters(), lr=config.lr, betas=(config.beta1, config.beta2),
                             eps=config.adam_eps)
    opt_d = torch.optim.Adam(D.parameters(), lr=config.d_lr, betas=(config.d_beta1, config.d_beta2),
                             eps=config.adam_eps)
    loss_fn = GAN_LOSSES[config.variant]
    use_gp = config.variant == "wasserstein"
    runlog = RunLog()

    def snapshot(epoch):
        return capture_state("gan", config.variant, epoch, config.seed, config.snapshot(),
                             {"generator": G, "discriminator": D}, {"opt_g": opt_g, "opt_d": opt_d})

    G.train()
    D.train()
    for epoch in range(config.epochs):
        meter_d, meter_g = _Meter(), _Meter()
        d_counts: list[int] = []
        t0 = time.perf_counter()
        epoch_no = epoch

        def d_step(batch) -> float:
            real = batch.data
            z = torch.randn(real.shape[0], config.latent_dim, generator=gen)
            with torch.no_grad():
                fake = G(z)
            r_logits, f_logits = D(real), D(fake)
            d_rep, _ = loss_fn(r_logits, f_logits)
            total = d_rep.total
            values = d_rep.scalars()
            if use_gp:
                gp = gradient_penalty(D, real, fake, config.gp_lambda, generator=gen)
                total = total + gp
                values["gp"] = float(gp.detach())
            values["total"] = float(total.detach())
            _check_finite(total, "discriminator", config, lambda: snapshot(epoch_no))
            opt_d.zero_grad(set_to_none=True)
            total.backward()
            opt_d.step()
            acc = discriminator_accuracy(r_logits, f_logits)
            values["accuracy"] = acc
            meter_d.add(values, 1)
            return acc

        batches = _epoch_batches(config, data, epoch)
        while True:
            steps = adaptive_disc_loop(d_step, batches, config.max_d_steps, config.d_gate)
            if steps == 0:
                break
            d_counts.append(steps)
            z = torch.randn(config.batch_size, config.latent_dim, generator=gen)
            g_rep = generator_loss(config.variant, D(G(z)))
            _check_finite(g_rep.total, "generator", config, lambda: snapshot(epoch_no))
            opt_g.zero_grad(set_to_none=True)
            g_rep.total.backward()
            opt_g.step()
            meter_g.add({"g_total": float(g_rep.total.detach())}, 1)
        losses = {f"d_{k}" if not k.startswith("d_") else k: v for k, v in meter_d.means().items()}
        losses.update(meter_g.means())
        runlog.append({"epoch": epoch + 1, "lr": config.lr, "d_lr": config.d_lr, "losses": losses,
                       "d_steps": d_counts, "wall_s": time.perf_counter() - t0})
    state = snapshot(config.epochs)
    _finish(config, state, runlog)
    return state, runlog


# ---------------------------------------------------------------------------
# DDPM


def train_ddpm(config: TrainConfig, data: TrainingData,
               schedule: NoiseSchedule | None = None) -> tuple[CheckpointState, RunLog]:
    _check_data_range(data, "ddpm")
    schedule = schedule or config.noise_schedule()
    if schedule.T != config.timesteps:
        raise InvalidArgument(f"schedule has {schedule.T} steps, config says {config.timesteps}")
    gen = _seed_all(config.seed)
    model = UNet(config.model_spec())
    sched = config.lr_schedule()
    opt = torch.optim.Adam(model.parameters(), lr=lr_at(sched, 0),
                           betas=(config.beta1, config.beta2), eps=config.adam_eps)
    runlog = RunLog()

    def snapshot(epoch):
        return capture_state("ddpm", config.variant, epoch, config.seed, config.snapshot(),
                             {"model": model}, {"opt": opt})

    model.train()
    for epoch in range(config.epochs):
        lr = lr_at(sched, epoch)
        _set_lr(opt, lr)
        meter = _Meter()
        seen = np.zeros(schedule.T, dtype=bool)
        t0 = time.perf_counter()
        for batch in _epoch_batches(config, data, epoch):
            x0 = batch.data
            t = torch.randint(0, schedule.T, (x0.shape[0],), generator=gen)
            eps = torch.randn(x0.shape, generator=gen)
            x_t = forward_diffuse(x0, t, eps, schedule)
            with _autocast(config):
                eps_hat = model(x_t, t)
            loss = ddpm_loss(eps, eps_hat.float())
            _check_finite(loss, "ddpm", config, lambda: snapshot(epoch))
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            seen[t.numpy()] = True
            meter.add({"total": float(loss.detach())}, x0.shape[0])
        runlog.append({"epoch": epoch + 1, "lr": lr, "losses": meter.means(),
                       "t_coverage": float(seen.mean()), "wall_s": time.perf_counter() - t0})
    state = snapshot(config.epochs)
    _finish(config, state, runlog)
    return state, runlog


def train(config: TrainConfig, data: TrainingData | None = None) -> tuple[CheckpointState, RunLog]:
    if data is None:
        data = prepare_data(config)
    return {"vae": train_vae, "gan": train_gan, "ddpm": train_ddpm}[config.family](config, data)


def models_from_state(state: CheckpointState) -> dict[str, torch.nn.Module]:
    """Rebuild the trained modules recorded in a checkpoint (in eval mode)."""
    cfg = config_from_snapshot(state.config)
    spec = cfg.model_spec()
    if state.family == "vae":
        modules = {"model": VAE(spec)}
    elif state.family == "gan":
        modules = {"generator": Generator(spec), "discriminator": Discriminator(spec)}
    else:
        modules = {"model": UNet(spec)}
    restore_modules(state, modules)
    for m in modules.values():
        m.eval()
    return modules
