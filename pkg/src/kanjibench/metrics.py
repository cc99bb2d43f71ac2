"""Frechet distance over pluggable feature extractors, cost measurement and result tables."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
import os
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoint import read_container, write_container
from .errors import FormatError, InvalidArgument

log = logging.getLogger(__name__)

FULL_SAMPLE_COUNT = 10_368
RESULT_COLUMNS = (
    "family", "variant", "fid", "train_time_s", "sample_time_s", "peak_mem_bytes", "param_count",
)

# fixed-random-conv geometry: (out_channels, kernel, stride, padding)
RANDOM_CONV_LAYERS = ((32, 3, 2, 1), (64, 3, 2, 1), (192, 3, 2, 1))


@dataclass(frozen=True)
class FeatureExtractorSpec:
    kind: str = "fixed-random-conv"  # raw-pixel | fixed-random-conv | external-weights
    feature_dim: int | None = None
    seed: int = 0
    weights_file: str | None = None

    def __post_init__(self):
        if self.kind not in ("raw-pixel", "fixed-random-conv", "external-weights"):
            raise InvalidArgument(f"unknown extractor kind {self.kind!r}")
        if self.kind == "external-weights" and not self.weights_file:
            raise InvalidArgument("external-weights extractor needs a weights file")

    @classmethod
    def parse(cls, text: str, seed: int = 0) -> "FeatureExtractorSpec":
        """Parse the CLI form: ``raw-pixel``, ``fixed-random-conv`` or ``external:PATH``."""
        if text.startswith("external:"):
            return cls("external-weights", weights_file=text[len("external:"):])
        return cls(text, seed=seed)


@dataclass
class GaussianStats:
    mu: np.ndarray
    sigma: np.ndarray

    @property
    def dim(self) -> int:
        return self.mu.shape[0]


# ---------------------------------------------------------------------------
# feature extraction


def random_conv_weights(seed: int) -> list[tuple[torch.Tensor, torch.Tensor, int, int]]:
    """Frozen He-scaled conv stack determined entirely by ``seed``."""
    gen = torch.Generator().manual_seed(int(seed))
    layers = []
    cin = 1
    for cout, k, stride, pad in RANDOM_CONV_LAYERS:
        std = math.sqrt(2.0 / (cin * k * k))
        w = torch.randn(cout, cin, k, k, generator=gen, dtype=torch.float64) * std
        b = torch.zeros(cout, dtype=torch.float64)
        layers.append((w, b, stride, pad))
        cin = cout
    return layers


def write_extractor_weights(path: str | os.PathLike, layers) -> None:
    """Store a conv stack in the tensor-container format read by ``external-weights``."""
    tensors = {}
    for i, (w, b, _, _) in enumerate(layers):
        tensors[f"conv{i}.weight"] = w
        tensors[f"conv{i}.bias"] = b
    meta = {
        "kind": "feature-extractor",
        "strides": [s for _, _, s, _ in layers],
        "paddings": [p for _, _, _, p in layers],
    }
    write_container(path, tensors, meta)


def load_extractor_weights(path: str | os.PathLike):
    if not Path(path).is_file():
        raise FileNotFoundError(f"extractor weights not found: {path}")
    tensors, meta = read_container(path)
    if meta.get("kind") != "feature-extractor":
        raise FormatError(f"{path}: not a feature-extractor container")
    strides, paddings = meta.get("strides", []), meta.get("paddings", [])
    layers = []
    for i, (s, p) in enumerate(zip(strides, paddings)):
        try:
            w, b = tensors[f"conv{i}.weight"], tensors[f"conv{i}.bias"]
        except KeyError as exc:
            raise FormatError(f"{path}: missing tensor {exc}") from None
        layers.append((w.to(torch.float64), b.to(torch.float64), int(s), int(p)))
    if not layers:
        raise FormatError(f"{path}: no conv layers")
    return layers


def _conv_features(images: torch.Tensor, layers, batch_size: int = 256) -> np.ndarray:
    out = []
    with torch.no_grad():
        for i in range(0, images.shape[0], batch_size):
            h = images[i:i + batch_size].to(torch.float64)
            for w, b, stride, pad in layers:
                h = F.relu(F.conv2d(h, w, b, stride=stride, padding=pad))
            out.append(h.mean(dim=(2, 3)))
    return torch.cat(out).numpy()


def extract_features(images: torch.Tensor, extractor: FeatureExtractorSpec,
                     norm_mode: str = "symmetric-range") -> np.ndarray:
    """Map ``[N, 1, H, W]`` images to an ``[N, d]`` float64 feature matrix.

    ``raw-pixel`` returns the pixels as given.  Conv extractors first map the
    images to [-1, 1] according to ``norm_mode``.
    """
    if images.dim() != 4:
        raise InvalidArgument(f"expected [N,1,H,W] images, got {tuple(images.shape)}")
    if extractor.kind == "raw-pixel":
        return images.detach().reshape(images.shape[0], -1).to(torch.float64).numpy()
    x = images.detach()
    if norm_mode == "unit-range":
        x = x * 2 - 1
    elif norm_mode != "symmetric-range":
        raise InvalidArgument(f"unknown norm mode {norm_mode!r}")
    if extractor.kind == "fixed-random-conv":
        layers = random_conv_weights(extractor.seed)
    else:
        layers = load_extractor_weights(extractor.weights_file)
    return _conv_features(x, layers)


# ---------------------------------------------------------------------------
# Frechet distance


def fit_gaussian(features: np.ndarray) -> GaussianStats:
    """Column means and the unbiased (n - 1) covariance, symmetrized."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise InvalidArgument("features must be a 2-D matrix")
    if x.shape[0] < 2:
        raise InvalidArgument("need at least two feature rows")
    mu = x.mean(axis=0)
    centred = x - mu
    sigma = centred.T @ centred / (x.shape[0] - 1)
    return GaussianStats(mu, (sigma + sigma.T) / 2)


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((m + m.T) / 2)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_distance(a: GaussianStats, b: GaussianStats) -> float:
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)), clamped to >= 0.

    The trace of the product root is taken from the eigenvalues of the
    symmetric matrix S_a^(1/2) S_b S_a^(1/2), which shares its spectrum with
    S_a S_b.
    """
    if a.mu.shape != b.mu.shape or a.sigma.shape != b.sigma.shape:
        raise InvalidArgument(f"dimension mismatch: {a.mu.shape} vs {b.mu.shape}")
    for arr in (a.mu, b.mu, a.sigma, b.sigma):
        if not np.all(np.isfinite(arr)):
            raise InvalidArgument("non-finite statistics")
    diff = a.mu - b.mu
    root_a = _psd_sqrt(a.sigma)
    inner = root_a @ b.sigma @ root_a
    vals = np.linalg.eigvalsh((inner + inner.T) / 2)
    # only round-off negatives are clamped; the product spectrum scales as
    # lambda^2, so an absolute floor would discard real low-variance directions
    tr_root = float(np.sqrt(np.clip(vals, 0.0, None)).sum())
    d = float(diff @ diff) + float(np.trace(a.sigma) + np.trace(b.sigma)) - 2.0 * tr_root
    return max(d, 0.0)


def evaluate_fid(generated: torch.Tensor, reference: torch.Tensor, extractor: FeatureExtractorSpec,
                 norm_mode: str = "symmetric-range") -> float:
    """FID between two image sets that already share preprocessing."""
    fg = extract_features(generated, extractor, norm_mode)
    fr = extract_features(reference, extractor, norm_mode)
    d = fg.shape[1]
    for name, f in (("generated", fg), ("reference", fr)):
        if f.shape[0] < d:
            log.warning("%s set has %d images for %d features; covariance is rank deficient",
                        name, f.shape[0], d)
    return frechet_distance(fit_gaussian(fg), fit_gaussian(fr))


# ---------------------------------------------------------------------------
# cost measurement


@dataclass
class Measurement:
    wall_clock_s: float
    peak_mem_bytes: int | None  # None: the substrate cannot report it
    result: Any = None


def measure(run: Callable[[], Any]) -> Measurement:
    """Time ``run`` on the monotonic clock; report accelerator peak memory when queryable."""
    cuda = torch.cuda.is_available()
    if cuda:
        torch.cuda.synchronize()
        torch.cuda.reset_peak_memory_stats()
    t0 = time.perf_counter()
    result = run()
    if cuda:
        torch.cuda.synchronize()
    elapsed = time.perf_counter() - t0
    peak = int(torch.cuda.max_memory_allocated()) if cuda else None
    return Measurement(elapsed, peak, result)


# ---------------------------------------------------------------------------
# result tables


@dataclass
class BenchmarkRecord:
    family: str
    variant: str
    fid: float | None = None
    train_time_s: float | None = None
    sample_time_s: float | None = None
    peak_mem_bytes: int | None = None
    param_count: int | None = None

    def __post_init__(self):
        for name in RESULT_COLUMNS[2:]:
            v = getattr(self, name)
            if v is not None and (not math.isfinite(v) or v < 0):
                raise InvalidArgument(f"{name} must be a non-negative number, got {v}")


def _fmt(v) -> str:
    if v is None:
        return ""
    return repr(float(v)) if isinstance(v, float) else str(v)


def emit_results(records: Sequence[BenchmarkRecord], path: str | os.PathLike) -> Path:
    if not records:
        raise InvalidArgument("no records to write")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESULT_COLUMNS)
        for r in records:
            w.writerow([_fmt(getattr(r, c)) for c in RESULT_COLUMNS])
    return path


def parse_results(path: str | os.PathLike) -> list[BenchmarkRecord]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != RESULT_COLUMNS:
            raise FormatError(f"{path}: unexpected columns {reader.fieldnames}")
        out = []
        for row in reader:
            kw: dict[str, Any] = {"family": row["family"], "variant": row["variant"]}
            for c in ("fid", "train_time_s", "sample_time_s"):
                kw[c] = float(row[c]) if row[c] else None
            for c in ("peak_mem_bytes", "param_count"):
                kw[c] = int(row[c]) if row[c] else None
            out.append(BenchmarkRecord(**kw))
    return out
