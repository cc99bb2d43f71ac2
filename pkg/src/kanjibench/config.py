"""Experiment configs: flat ``section.key = value`` text files and named presets.

Example::

    # desk-sized DDPM run
    preset = desk-ddpm
    train.epochs = 3
    out.dir = runs/ddpm-small

A ``preset`` line (anywhere in the file) selects the starting point; every
other line overrides one field.  Unknown keys, duplicate keys and malformed
values are rejected with the offending line number.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .errors import ConfigError
from .metrics import FULL_SAMPLE_COUNT
from .trainer import TrainConfig, VARIANTS


def _key(name: str, **kw):
    return field(metadata={"key": name}, **kw)


@dataclass
class EvalConfig:
    sample_count: int = _key("eval.sample_count", default=FULL_SAMPLE_COUNT)
    sample_batch: int = _key("eval.sample_batch", default=256)
    extractor: str = _key("eval.extractor", default="fixed-random-conv")
    extractor_seed: int = _key("eval.extractor_seed", default=0)
    reference_limit: int = _key("eval.reference_limit", default=0)
    grid_rows: int = _key("eval.grid_rows", default=8)
    grid_cols: int = _key("eval.grid_cols", default=8)

    def __post_init__(self):
        for name in ("sample_count", "sample_batch", "grid_rows", "grid_cols"):
            if getattr(self, name) < 1:
                raise ConfigError("must be >= 1", _keymap(EvalConfig)[name])
        if self.reference_limit < 0:
            raise ConfigError("must be >= 0", "eval.reference_limit")
        if not (self.extractor in ("raw-pixel", "fixed-random-conv")
                or self.extractor.startswith("external:")):
            raise ConfigError(f"unknown extractor {self.extractor!r}", "eval.extractor")


@dataclass
class ExperimentConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    name: str = ""


def _keymap(cls) -> dict[str, str]:
    return {f.name: f.metadata["key"] for f in dataclasses.fields(cls)}


def _fields_by_key() -> dict[str, tuple[str, dataclasses.Field]]:
    out = {}
    for part, cls in (("train", TrainConfig), ("eval", EvalConfig)):
        for f in dataclasses.fields(cls):
            out[f.metadata["key"]] = (part, f)
    return out


FIELDS = _fields_by_key()


# ---------------------------------------------------------------------------
# presets

def _full_train(family: str, variant: str) -> dict[str, Any]:
    if family == "vae":
        return dict(family="vae", variant=variant, latent_dim=int(variant[len("latent"):]),
                    epochs=100, batch_size=128, beta1=0.9, beta2=0.999,
                    lr_kind="one-cycle", lr_start=4e-5, lr_peak=1e-3, lr_final=1e-7,
                    lr_warm_epochs=30)
    if family == "gan":
        return dict(family="gan", variant=variant, latent_dim=128, epochs=100, batch_size=128,
                    lr=1e-4, beta1=0.0, beta2=0.99, d_lr=1e-4, d_beta1=0.9, d_beta2=0.999,
                    lr_kind="constant", lr_start=1e-4, lr_peak=1e-4, max_d_steps=5, d_gate=0.9)
    return dict(family="ddpm", variant=variant, epochs=100, batch_size=32, timesteps=1024,
                beta1=0.9, beta2=0.999, lr_kind="cosine-anneal", lr_start=5e-5, lr_peak=5e-5,
                lr_final=0.0)


FULL_PRESETS: dict[str, dict[str, Any]] = {}
for _fam, _variants in VARIANTS.items():
    for _v in _variants:
        _name = f"vae-{_v}" if _fam == "vae" else f"{_fam}-{_v}"
        FULL_PRESETS[_name] = _full_train(_fam, _v)

DESK_FAMILY_DEFAULTS = {"desk-vae": "vae-latent64", "desk-gan": "gan-bce", "desk-ddpm": "ddpm-linear"}


def desk_overrides(train: dict[str, Any]) -> tuple[dict[str, Any], dict[str, Any]]:
    """Scale a run down to CPU size: 16x16, 1,024 synthetic images, 5 epochs, 1/4 width."""
    t = dict(train)
    t.update(resolution=16, epochs=5, synthetic=True, synthetic_count=1024, data_limit=1024,
             width_divisor=4, workers=1)
    if t["family"] == "vae":
        t["lr_warm_epochs"] = 1
    if t["family"] == "ddpm":
        t.update(timesteps=64, lr_start=1e-3, lr_peak=1e-3)
    ev = dict(sample_count=256, sample_batch=256, reference_limit=0)
    return t, ev


def preset_names() -> list[str]:
    names = list(FULL_PRESETS)
    names += list(DESK_FAMILY_DEFAULTS)
    names += [f"desk-{n}" for n in FULL_PRESETS]
    return names


def load_preset(name: str, desk: bool = False) -> ExperimentConfig:
    base = DESK_FAMILY_DEFAULTS.get(name)
    if base is None and name.startswith("desk-") and name[5:] in FULL_PRESETS:
        base = name[5:]
    if base is not None:
        desk = True
    else:
        base = name
    if base not in FULL_PRESETS:
        raise ConfigError(f"unknown preset {name!r}; known: {', '.join(preset_names())}", "preset")
    train, ev = dict(FULL_PRESETS[base]), {}
    if desk:
        train, ev = desk_overrides(train)
    return ExperimentConfig(TrainConfig(**train), EvalConfig(**ev), name if not desk or
                            name.startswith("desk-") else f"desk-{name}")


def apply_desk(cfg: ExperimentConfig) -> ExperimentConfig:
    train, ev = desk_overrides(dataclasses.asdict(cfg.train))
    ev = {**dataclasses.asdict(cfg.eval), **ev}
    name = cfg.name if cfg.name.startswith("desk-") else f"desk-{cfg.name}" if cfg.name else "desk"
    return ExperimentConfig(TrainConfig(**train), EvalConfig(**ev), name)


def with_overrides(cfg: ExperimentConfig, **train_fields) -> ExperimentConfig:
    train = {**dataclasses.asdict(cfg.train), **train_fields}
    return ExperimentConfig(TrainConfig(**train), cfg.eval, cfg.name)


# ---------------------------------------------------------------------------
# text format


def _convert(raw: str, f: dataclasses.Field, key: str, line: int):
    typ = f.type if isinstance(f.type, str) else f.type.__name__
    try:
        if typ == "bool":
            low = raw.lower()
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            raise ValueError(raw)
        if typ == "int":
            return int(raw)
        if typ == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"cannot parse {raw!r} as {typ}", key, line) from None
    if len(raw) >= 2 and raw[0] == raw[-1] and raw[0] in "\"'":
        raw = raw[1:-1]
    return raw


def parse_config_text(text: str, source: str = "<config>") -> ExperimentConfig:
    entries: dict[str, tuple[str, int]] = {}
    for lineno, rawline in enumerate(text.splitlines(), 1):
        line = rawline.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {rawline.strip()!r}", None, lineno)
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError("empty key", None, lineno)
        if key != "preset" and key not in FIELDS:
            raise ConfigError("unknown key", key, lineno)
        if key in entries:
            raise ConfigError(f"duplicate key (first set on line {entries[key][1]})", key, lineno)
        entries[key] = (value, lineno)

    name = ""
    if "preset" in entries:
        value, lineno = entries.pop("preset")
        try:
            base = load_preset(value)
        except ConfigError as exc:
            raise ConfigError(exc.message, "preset", lineno) from None
        name = base.name
        parts = {"train": dataclasses.asdict(base.train), "eval": dataclasses.asdict(base.eval)}
    else:
        parts = {"train": {}, "eval": {}}

    for key, (value, lineno) in entries.items():
        part, f = FIELDS[key]
        parts[part][f.name] = _convert(value, f, key, lineno)

    try:
        label = Path(source).stem if source != "<config>" else name or "config"
        cfg = ExperimentConfig(TrainConfig(**parts["train"]), EvalConfig(**parts["eval"]), label)
    except ConfigError as exc:
        if exc.key in entries and exc.line is None:
            raise ConfigError(exc.message, exc.key, entries[exc.key][1]) from None
        raise
    return cfg


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    return parse_config_text(text, str(path))


def render_config(cfg: ExperimentConfig) -> str:
    """Serialize to the flat text format (round-trips through ``parse_config_text``)."""
    lines = []
    for obj in (cfg.train, cfg.eval):
        for f in dataclasses.fields(obj):
            v = getattr(obj, f.name)
            if isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.metadata['key']} = {v}")
    return "\n".join(lines) + "\n"
