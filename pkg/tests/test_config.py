import dataclasses

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kanjibench.config import (FULL_PRESETS, apply_desk, load_config, load_preset,
                               parse_config_text, preset_names, render_config)
from kanjibench.errors import ConfigError


def test_eight_full_presets():
    assert sorted(FULL_PRESETS) == sorted([
        "vae-latent64", "vae-latent128", "vae-latent256", "gan-bce", "gan-wasserstein",
        "gan-hinge", "ddpm-linear", "ddpm-cosine"])


@pytest.mark.parametrize("name", preset_names())
def test_presets_load(name):
    cfg = load_preset(name)
    assert cfg.train.family in ("vae", "gan", "ddpm")


def test_vae_preset_values():
    t = load_preset("vae-latent64").train
    assert (t.latent_dim, t.epochs, t.batch_size, t.resolution) == (64, 100, 128, 64)
    assert (t.lr_kind, t.lr_start, t.lr_peak, t.lr_final, t.lr_warm_epochs) == \
        ("one-cycle", 4e-5, 1e-3, 1e-7, 30)
    assert (t.beta1, t.beta2) == (0.9, 0.999)


def test_gan_preset_values():
    t = load_preset("gan-hinge").train
    assert (t.beta1, t.beta2, t.d_beta1, t.d_beta2) == (0.0, 0.99, 0.9, 0.999)
    assert t.lr == t.d_lr == 1e-4 and t.lr_kind == "constant"
    assert (t.batch_size, t.max_d_steps, t.d_gate) == (128, 5, 0.9)


def test_ddpm_preset_values():
    t = load_preset("ddpm-cosine").train
    assert (t.batch_size, t.timesteps, t.lr_kind, t.lr_start, t.lr_final) == \
        (32, 1024, "cosine-anneal", 5e-5, 0.0)


def test_eval_defaults():
    ev = load_preset("gan-bce").eval
    assert ev.sample_count == 10_368 and (ev.grid_rows, ev.grid_cols) == (8, 8)


def test_desk_scaling():
    t = load_preset("desk-ddpm").train
    assert (t.resolution, t.epochs, t.synthetic, t.synthetic_count, t.timesteps) == \
        (16, 5, True, 1024, 64)
    assert apply_desk(load_preset("ddpm-linear")).train == t


def test_parse_overrides_preset():
    cfg = parse_config_text("""
        # comment line
        preset = desk-gan
        train.epochs = 2   # trailing comment
        gan.gate = 0.8
        out.dir = "runs/x"
    """)
    assert cfg.train.family == "gan" and cfg.train.epochs == 2 and cfg.train.d_gate == 0.8
    assert cfg.train.out_dir == "runs/x" and cfg.train.resolution == 16


def test_parse_without_preset():
    cfg = parse_config_text("family = ddpm\nvariant = cosine\ndata.synthetic = yes\n")
    assert cfg.train.variant == "cosine" and cfg.train.synthetic is True


@pytest.mark.parametrize("text,line,key", [
    ("preset = gan-bce\ntrain.epoch = 3\n", 2, "train.epoch"),
    ("train.epochs = many\n", 1, "train.epochs"),
    ("data.synthetic = maybe\n", 1, "data.synthetic"),
    ("family = gan\nfamily = vae\n", 2, "family"),
    ("preset = nope\n", 1, "preset"),
    ("\n\nfamily = gan\nvariant = latent64\n", 4, "variant"),
    ("just words\n", 1, None),
])
def test_diagnostics(text, line, key):
    with pytest.raises(ConfigError) as exc:
        parse_config_text(text)
    assert exc.value.line == line and exc.value.key == key
    assert f"line {line}" in str(exc.value)


def test_render_round_trip():
    cfg = load_preset("desk-vae")
    again = parse_config_text(render_config(cfg))
    assert again.train == cfg.train and again.eval == cfg.eval


def test_load_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.cfg")


@given(st.text(alphabet=st.sampled_from("abc.=_ #\n0123"), max_size=60))
@settings(max_examples=200, deadline=None)
def test_parsing_is_total(text):
    # every input yields either a complete valid config or a ConfigError
    try:
        cfg = parse_config_text(text)
    except ConfigError:
        return
    assert dataclasses.is_dataclass(cfg.train)
    cfg.train.validate()
