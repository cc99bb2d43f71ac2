"""Command-line entry points: train, sample, evaluate, benchmark and grid.

Exit codes: 0 success, 2 usage/config/input error, 3 runtime abort.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
import traceback
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image

from . import config as cfgmod
from .checkpoint import CheckpointState, load_checkpoint
from .config import ExperimentConfig
from .data import NoData, load_dataset, load_images
from .errors import (ConfigError, FormatError, InvalidArgument, InvalidInput, KanjiBenchError,
                     TrainingAborted)
from .metrics import (BenchmarkRecord, FeatureExtractorSpec, emit_results, evaluate_fid, measure)
from .models import ddpm_sample, gan_sample, vae_sample
from .nn_core import count_parameters
from .trainer import config_from_snapshot, models_from_state, prepare_data, train

log = logging.getLogger("kanjibench")

EXIT_OK, EXIT_USAGE, EXIT_ABORT = 0, 2, 3
GRID_SEPARATOR = 2
GRID_BACKGROUND = 255
DESK_SUITE = ("desk-vae", "desk-gan", "desk-ddpm")
FULL_SUITE = tuple(cfgmod.FULL_PRESETS)


# ---------------------------------------------------------------------------
# config resolution


def resolve_config(config_path=None, preset=None, desk=False, seed=None, out=None) -> ExperimentConfig:
    if config_path and preset:
        raise ConfigError("use either --config or --preset, not both")
    if config_path:
        cfg = cfgmod.load_config(config_path)
    elif preset:
        cfg = cfgmod.load_preset(preset)
    else:
        raise ConfigError("one of --config or --preset is required")
    if desk:
        cfg = cfgmod.apply_desk(cfg)
    overrides = {}
    if seed is not None:
        overrides["seed"] = seed
    if out is not None:
        overrides["out_dir"] = str(out)
    if overrides:
        cfg = cfgmod.with_overrides(cfg, **overrides)
    return cfg


def _run_name(cfg: ExperimentConfig) -> str:
    return cfg.name or f"{cfg.train.family}-{cfg.train.variant}"


# ---------------------------------------------------------------------------
# train


def cmd_train(cfg: ExperimentConfig, cache_dir=None):
    """Train one configuration; writes checkpoint.kbt, runlog.jsonl and config.cfg."""
    if not cfg.train.out_dir:
        cfg = cfgmod.with_overrides(cfg, out_dir=str(Path("runs") / _run_name(cfg)))
    out = Path(cfg.train.out_dir)
    data = prepare_data(cfg.train, cache_dir or out)
    log.info("training %s on %d images from %s", _run_name(cfg), data.manifest.image_count,
             data.manifest.root)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.cfg").write_text(cfgmod.render_config(cfg))
    state, runlog = train(cfg.train, data)
    return state, runlog, out


# ---------------------------------------------------------------------------
# sample


def generate(state: CheckpointState, n: int, seed: int, batch_size: int = 256):
    """Draw ``n`` samples mapped to [0, 1] plus per-batch ``(start, count, wall_s)`` timings."""
    modules = models_from_state(state)
    timings = []
    clock = [time.perf_counter()]

    def on_batch(start, count):
        now = time.perf_counter()
        timings.append((start, count, now - clock[0]))
        clock[0] = now

    if state.family == "vae":
        x = vae_sample(modules["model"], n, seed, batch_size, on_batch=on_batch)
    elif state.family == "gan":
        x = (gan_sample(modules["generator"], n, seed, batch_size, on_batch=on_batch) + 1) / 2
    else:
        schedule = config_from_snapshot(state.config).noise_schedule()
        x = ddpm_sample(modules["model"], schedule, n, seed, batch_size=batch_size, on_batch=on_batch)
        x = (x.clamp(-1.0, 1.0) + 1) / 2
    if not torch.isfinite(x).all():
        raise TrainingAborted("sampler produced non-finite values", None)
    return x.clamp(0.0, 1.0), timings


def to_uint8(images: torch.Tensor) -> np.ndarray:
    return np.rint(images.detach().cpu().numpy()[:, 0] * 255.0).astype(np.uint8)


def write_images(images: torch.Tensor, out_dir, prefix: str = "sample") -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    arr = to_uint8(images)
    width = max(5, len(str(len(arr) - 1)))
    paths = []
    for i, img in enumerate(arr):
        p = out_dir / f"{prefix}_{i:0{width}d}.png"
        Image.fromarray(img).save(p)
        paths.append(p)
    return paths


def _write_sampling_log(path: Path, state: CheckpointState, timings, files: list[Path]):
    with open(path, "w") as fh:
        for start, count, wall in timings:
            per_image = wall / count
            for i in range(start, start + count):
                fh.write(json.dumps({"index": i, "file": files[i].name, "family": state.family,
                                     "batch_start": start, "batch_size": count,
                                     "wall_s": per_image}, sort_keys=True) + "\n")


def cmd_sample(checkpoint_path, n: int, seed: int, out_dir, batch_size: int = 256,
               family: str | None = None) -> list[Path]:
    """Write ``n`` PNG samples plus ``sampling_log.jsonl`` with per-image wall time."""
    if n < 1:
        raise InvalidArgument("n must be >= 1")
    state = load_checkpoint(checkpoint_path, family)
    images, timings = generate(state, n, seed, batch_size)
    files = write_images(images, out_dir)
    _write_sampling_log(Path(out_dir) / "sampling_log.jsonl", state, timings, files)
    return files


# ---------------------------------------------------------------------------
# evaluate


def _load_set(path, resolution: int | None, limit: int = 0) -> tuple[torch.Tensor, int]:
    if not Path(path).is_dir():
        raise FileNotFoundError(f"not a directory: {path}")
    manifest = load_dataset(path)
    if limit and manifest.image_count > limit:
        manifest = dataclasses.replace(manifest, image_paths=manifest.image_paths[:limit])
    res = resolution or max(manifest.native_resolution)
    return load_images(manifest, "symmetric-range", res), res


def cmd_evaluate(generated_dir, reference_dir, extractor: str = "fixed-random-conv", out=None,
                 resolution: int | None = None, extractor_seed: int = 0,
                 reference_limit: int = 0) -> dict:
    """FID between two image directories, both decoded and resized identically."""
    spec = FeatureExtractorSpec.parse(extractor, extractor_seed)
    gen, res = _load_set(generated_dir, resolution)
    ref, _ = _load_set(reference_dir, res, reference_limit)
    fid = evaluate_fid(gen, ref, spec)
    result = {"fid": fid, "generated_count": int(gen.shape[0]), "reference_count": int(ref.shape[0]),
              "extractor": extractor, "extractor_seed": extractor_seed, "resolution": res}
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    return result


# ---------------------------------------------------------------------------
# benchmark


def suite_from_file(path) -> tuple[list[str], bool]:
    """Suite files hold ``suite.presets = a, b, c`` and an optional ``suite.desk = true``."""
    presets, desk = None, False
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError("expected 'key = value'", None, lineno)
        key, value = (s.strip() for s in line.split("=", 1))
        if key == "suite.presets":
            presets = [p.strip() for p in value.split(",") if p.strip()]
        elif key == "suite.desk":
            if value.lower() not in ("true", "false"):
                raise ConfigError(f"cannot parse {value!r} as bool", key, lineno)
            desk = value.lower() == "true"
        else:
            raise ConfigError("unknown key", key, lineno)
    if not presets:
        raise ConfigError("suite lists no configurations", "suite.presets")
    return presets, desk


def _suite_configs(entries: Sequence[str], desk: bool, seed: int | None) -> list[ExperimentConfig]:
    cfgs = []
    for entry in entries:
        if Path(entry).is_file():
            cfg = cfgmod.load_config(entry)
        else:
            cfg = cfgmod.load_preset(entry)
        if desk and not cfg.name.startswith("desk"):
            cfg = cfgmod.apply_desk(cfg)
        if seed is not None:
            cfg = cfgmod.with_overrides(cfg, seed=seed)
        cfgs.append(cfg)
    return cfgs


def _benchmark_row(cfg: ExperimentConfig, row_dir: Path, cache_dir: Path) -> tuple[BenchmarkRecord, dict]:
    cfg = cfgmod.with_overrides(cfg, out_dir=str(row_dir))
    data = prepare_data(cfg.train, cache_dir)
    row_dir.mkdir(parents=True, exist_ok=True)
    (row_dir / "config.cfg").write_text(cfgmod.render_config(cfg))
    trained = measure(lambda: train(cfg.train, data))
    state, _ = trained.result

    ev = cfg.eval
    sampled = measure(lambda: generate(state, ev.sample_count, cfg.train.seed, ev.sample_batch))
    images, timings = sampled.result
    files = write_images(images, row_dir / "samples")
    _write_sampling_log(row_dir / "samples" / "sampling_log.jsonl", state, timings, files)

    # generated and reference images go through the same decode + resize + normalize path
    gen = load_images(load_dataset(row_dir / "samples"), "symmetric-range", cfg.train.resolution)
    manifest = data.manifest
    if ev.reference_limit and manifest.image_count > ev.reference_limit:
        manifest = dataclasses.replace(manifest, image_paths=manifest.image_paths[:ev.reference_limit])
    ref = load_images(manifest, "symmetric-range", cfg.train.resolution)
    fid = evaluate_fid(gen, ref, FeatureExtractorSpec.parse(ev.extractor, ev.extractor_seed))

    peaks = [p for p in (trained.peak_mem_bytes, sampled.peak_mem_bytes) if p is not None]
    record = BenchmarkRecord(
        cfg.train.family, cfg.train.variant, fid=fid, train_time_s=trained.wall_clock_s,
        sample_time_s=sampled.wall_clock_s, peak_mem_bytes=max(peaks) if peaks else None,
        param_count=count_parameters(cfg.train.model_spec()))
    meta = {"status": "ok", "reference": "full corpus" if not
            ev.reference_limit else f"first {ev.reference_limit} images",
            "reference_count": int(ref.shape[0]), "generated_count": int(gen.shape[0]),
            "extractor": ev.extractor, "extractor_seed": ev.extractor_seed}
    return record, meta


def cmd_benchmark(configs: Sequence[ExperimentConfig], out_dir) -> tuple[list[BenchmarkRecord], Path]:
    """Train, time sampling and score every config; a failing row is left empty and logged."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cache = out / "data"
    records, metas = [], []
    used: dict[str, int] = {}
    for cfg in configs:
        name = _run_name(cfg)
        used[name] = used.get(name, 0) + 1
        if used[name] > 1:
            name = f"{name}-{used[name]}"
        row_dir = out / name
        log.info("benchmark row %s", name)
        try:
            record, meta = _benchmark_row(cfg, row_dir, cache)
            meta["name"] = name
        except Exception as exc:  # rows are independent: record and move on
            log.error("row %s failed: %s", name, exc)
            row_dir.mkdir(parents=True, exist_ok=True)
            (row_dir / "error.txt").write_text(traceback.format_exc())
            record = BenchmarkRecord(cfg.train.family, cfg.train.variant)
            meta = {"name": name, "status": "failed", "error": f"{type(exc).__name__}: {exc}"}
        records.append(record)
        metas.append(meta)
    path = emit_results(records, out / "results.csv")
    (out / "results.meta.json").write_text(json.dumps({"rows": metas}, indent=2, sort_keys=True) + "\n")
    return records, path


# ---------------------------------------------------------------------------
# grid


def cmd_grid(image_dir, rows: int, cols: int, out_file) -> Path:
    """Tile the first rows*cols images (lexicographic) with 2-pixel separators."""
    if rows < 1 or cols < 1:
        raise InvalidArgument("rows and cols must be >= 1")
    if not Path(image_dir).is_dir():
        raise FileNotFoundError(f"not a directory: {image_dir}")
    manifest = load_dataset(image_dir)
    need = rows * cols
    if manifest.image_count < need:
        raise InvalidArgument(f"grid needs {need} images, found {manifest.image_count}")
    from .data import decode_image

    tiles = [decode_image(p) for p in manifest.image_paths[:need]]
    h, w = tiles[0].shape
    sep = GRID_SEPARATOR
    canvas = np.full((rows * h + (rows - 1) * sep, cols * w + (cols - 1) * sep), GRID_BACKGROUND,
                     dtype=np.uint8)
    for k, tile in enumerate(tiles):
        r, c = divmod(k, cols)
        canvas[r * (h + sep):r * (h + sep) + h, c * (w + sep):c * (w + sep) + w] = tile
    out_file = Path(out_file)
    out_file.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(canvas).save(out_file)
    return out_file


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kanjibench", description="Train and compare VAE, GAN and "
                                "DDPM glyph generators.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="verb", required=True)

    def config_flags(sp):
        sp.add_argument("--config", help="flat key = value config file")
        sp.add_argument("--preset", help="named preset, e.g. vae-latent64 or desk-ddpm")
        sp.add_argument("--desk", action="store_true", help="scale down to CPU desk size")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output directory")

    t = sub.add_parser("train", help="train one configuration")
    config_flags(t)
    t.add_argument("--dry-run", action="store_true", help="print the resolved config and exit")

    s = sub.add_parser("sample", help="write samples from a checkpoint")
    s.add_argument("checkpoint")
    s.add_argument("-n", type=int, default=cfgmod.EvalConfig().sample_count)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--batch-size", type=int, default=256)
    s.add_argument("--family", choices=("vae", "gan", "ddpm"), help="reject other families")

    e = sub.add_parser("evaluate", help="FID between two image directories")
    e.add_argument("generated")
    e.add_argument("reference")
    e.add_argument("--extractor", default="fixed-random-conv",
                   help="raw-pixel | fixed-random-conv | external:PATH")
    e.add_argument("--seed", type=int, default=0, help="fixed-random-conv seed")
    e.add_argument("--resolution", type=int, help="default: native size of the generated set")
    e.add_argument("--out", help="JSON result file")

    b = sub.add_parser("benchmark", help="train, sample and score a suite of configurations")
    b.add_argument("--config", help="suite file (suite.presets, suite.desk)")
    b.add_argument("--preset", action="append", help="add a preset to the suite (repeatable)")
    b.add_argument("--desk", action="store_true", help="desk suite: one config per family")
    b.add_argument("--seed", type=int)
    b.add_argument("--out", default="bench")
    b.add_argument("--extractor", help="override eval.extractor for every row")

    g = sub.add_parser("grid", help="tile images into one composite")
    g.add_argument("images")
    g.add_argument("--rows", type=int, default=cfgmod.EvalConfig().grid_rows)
    g.add_argument("--cols", type=int, default=cfgmod.EvalConfig().grid_cols)
    g.add_argument("--out", required=True)
    return p


def _dispatch(args) -> int:
    if args.verb == "train":
        cfg = resolve_config(args.config, args.preset, args.desk, args.seed, args.out)
        sys.stdout.write(cfgmod.render_config(cfg))
        if args.dry_run:
            return EXIT_OK
        _, runlog, out = cmd_train(cfg)
        last = runlog.records[-1]["losses"] if runlog.records else {}
        print(f"wrote {out / 'checkpoint.kbt'}; final losses {json.dumps(last, sort_keys=True)}")
    elif args.verb == "sample":
        files = cmd_sample(args.checkpoint, args.n, args.seed, args.out, args.batch_size, args.family)
        print(f"wrote {len(files)} images to {args.out}")
    elif args.verb == "evaluate":
        result = cmd_evaluate(args.generated, args.reference, args.extractor, args.out,
                              args.resolution, args.seed)
        print(json.dumps(result, sort_keys=True))
    elif args.verb == "benchmark":
        entries, desk = [], args.desk
        if args.config:
            entries, file_desk = suite_from_file(args.config)
            desk = desk or file_desk
        entries += args.preset or []
        if not entries:
            entries = list(DESK_SUITE if desk else FULL_SUITE)
        cfgs = _suite_configs(entries, desk, args.seed)
        if args.extractor:
            FeatureExtractorSpec.parse(args.extractor)
            cfgs = [dataclasses.replace(c, eval=dataclasses.replace(c.eval, extractor=args.extractor))
                    for c in cfgs]
        records, path = cmd_benchmark(cfgs, args.out)
        print(path.read_text(), end="")
        if any(r.fid is None for r in records):
            return EXIT_ABORT
    elif args.verb == "grid":
        print(cmd_grid(args.images, args.rows, args.cols, args.out))
    return EXIT_OK


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return _dispatch(args)
    except TrainingAborted as exc:
        print(f"error: training aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT
    except (ConfigError, InvalidArgument, InvalidInput, NoData, FormatError, FileNotFoundError,
            NotADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except KanjiBenchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ABORT


if __name__ == "__main__":
    sys.exit(main())
