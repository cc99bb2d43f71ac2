"""Character-image corpus: discovery, preprocessing and shuffled batch streaming."""

from __future__ import annotations

import logging
import os
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, UnidentifiedImageError

from .errors import InvalidArgument, InvalidInput, NoData

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".bmp", ".pgm", ".tif", ".tiff", ".gif"}
NORM_MODES = ("unit-range", "symmetric-range")
NATIVE_RESOLUTION = 48
TARGET_RESOLUTION = 64


@dataclass(frozen=True)
class DatasetManifest:
    root: str
    image_paths: tuple[str, ...]
    native_resolution: tuple[int, int]
    channels: int = 1
    polarity: str = "unknown"  # dark-on-light | light-on-dark

    @property
    def image_count(self) -> int:
        return len(self.image_paths)

    def __len__(self) -> int:
        return len(self.image_paths)


@dataclass(frozen=True)
class LoaderConfig:
    batch_size: int = 128
    shuffle_seed: int = 0
    worker_count: int = 4
    prefetch_depth: int = 2

    def __post_init__(self):
        if self.batch_size < 1:
            raise InvalidArgument("batch_size must be >= 1")
        if self.worker_count < 1 or self.prefetch_depth < 1:
            raise InvalidArgument("worker_count and prefetch_depth must be >= 1")


@dataclass
class ImageBatch:
    data: torch.Tensor  # [B, 1, R, R]
    norm_mode: str
    indices: np.ndarray


def _to_gray(img: Image.Image) -> np.ndarray:
    if img.mode in ("1", "L", "P", "I", "I;16", "LA", "F"):
        if img.mode in ("I", "I;16"):
            arr = np.asarray(img, dtype=np.float64)
            return np.clip(arr / (256.0 if arr.max() > 255 else 1.0), 0, 255).astype(np.uint8)
        return np.asarray(img.convert("L"))
    arr = np.asarray(img.convert("RGB"))
    if np.array_equal(arr[..., 0], arr[..., 1]) and np.array_equal(arr[..., 1], arr[..., 2]):
        return arr[..., 0].copy()
    raise InvalidInput(f"image has {len(img.getbands())} distinct colour channels")


def decode_image(path: str | os.PathLike) -> np.ndarray:
    """Read one grayscale image as a ``uint8`` ``[H, W]`` array."""
    with Image.open(path) as img:
        img.load()
        return _to_gray(img)


def load_dataset(path: str | os.PathLike) -> DatasetManifest:
    """Index every decodable grayscale image under ``path`` in lexicographic order."""
    root = Path(path)
    if not root.is_dir():
        raise NoData(f"{root} is not a directory")
    candidates = sorted(
        p for p in root.rglob("*") if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES
    )
    candidates.sort(key=lambda p: p.relative_to(root).as_posix())
    if not candidates:
        raise NoData(f"no images found in {root}")

    kept: list[str] = []
    size = None
    means = []
    for p in candidates:
        try:
            arr = decode_image(p)
        except (UnidentifiedImageError, OSError, InvalidInput) as exc:
            log.warning("skipping %s: %s", p, exc)
            continue
        if size is None:
            size = arr.shape
        elif arr.shape != size:
            log.warning("skipping %s: resolution %s differs from %s", p, arr.shape, size)
            continue
        kept.append(str(p))
        if len(means) < 256:
            means.append(float(arr.mean()))
    if not kept:
        raise NoData(f"none of the {len(candidates)} files in {root} could be decoded")
    polarity = "dark-on-light" if np.mean(means) > 127.5 else "light-on-dark"
    return DatasetManifest(str(root), tuple(kept), (int(size[0]), int(size[1])), 1, polarity)


def preprocess(image, norm_mode: str = "unit-range", resolution: int = TARGET_RESOLUTION) -> torch.Tensor:
    """Bilinear resize (half-pixel centres) to ``resolution``, scale to [0, 1], optionally map to [-1, 1]."""
    if norm_mode not in NORM_MODES:
        raise InvalidArgument(f"unknown norm mode {norm_mode!r}")
    arr = np.asarray(image)
    if arr.ndim == 3 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.ndim != 2:
        raise InvalidInput(f"expected a single-channel image, got shape {arr.shape}")
    x = torch.as_tensor(arr.astype(np.float32))[None, None]
    if x.shape[-2:] != (resolution, resolution):
        x = F.interpolate(x, size=(resolution, resolution), mode="bilinear", align_corners=False)
    x = (x[0] / 255.0).clamp_(0.0, 1.0)
    if norm_mode == "symmetric-range":
        x = (x - 0.5) / 0.5
    return x


def load_images(
    manifest: DatasetManifest,
    norm_mode: str,
    resolution: int = TARGET_RESOLUTION,
    indices: Sequence[int] | None = None,
) -> torch.Tensor:
    """Decode and preprocess images into one ``[N, 1, R, R]`` tensor."""
    if indices is None:
        indices = range(manifest.image_count)
    if len(indices) == 0:
        return torch.empty(0, 1, resolution, resolution)
    return torch.stack(
        [preprocess(decode_image(manifest.image_paths[i]), norm_mode, resolution) for i in indices]
    )


def epoch_permutation(n: int, shuffle_seed: int) -> np.ndarray:
    return np.random.default_rng(shuffle_seed).permutation(n)


def make_batches(
    manifest: DatasetManifest,
    config: LoaderConfig,
    norm_mode: str,
    resolution: int = TARGET_RESOLUTION,
    images: torch.Tensor | None = None,
) -> Iterator[ImageBatch]:
    """Yield one epoch of shuffled batches; the final batch may be partial.

    With ``images`` (a preprocessed cache aligned with the manifest) batches are
    sliced from memory.  Otherwise files are decoded by ``worker_count`` threads
    with at most ``worker_count * prefetch_depth`` batches in flight; the stream
    order is the permutation order either way.
    """
    n = manifest.image_count
    if n == 0:
        raise NoData("empty manifest")
    perm = epoch_permutation(n, config.shuffle_seed)
    chunks = [perm[i:i + config.batch_size] for i in range(0, n, config.batch_size)]

    if images is not None:
        if images.shape[0] != n:
            raise InvalidArgument("image cache does not match the manifest")
        for idx in chunks:
            yield ImageBatch(images[torch.from_numpy(idx)], norm_mode, idx)
        return

    depth = config.worker_count * config.prefetch_depth
    with ThreadPoolExecutor(max_workers=config.worker_count) as pool:
        pending: deque = deque()
        it = iter(chunks)
        for idx in it:
            pending.append((idx, pool.submit(load_images, manifest, norm_mode, resolution, idx)))
            if len(pending) >= depth:
                break
        while pending:
            idx, fut = pending.popleft()
            nxt = next(it, None)
            if nxt is not None:
                pending.append((nxt, pool.submit(load_images, manifest, norm_mode, resolution, nxt)))
            yield ImageBatch(fut.result(), norm_mode, idx)


def _stroke_image(rng: np.random.Generator, size: int = NATIVE_RESOLUTION) -> np.ndarray:
    img = np.full((size, size), 255, dtype=np.uint8)
    margin = size // 8
    lo, hi = margin, size - margin
    for _ in range(int(rng.integers(3, 9))):
        thick = int(rng.integers(2, 4))
        length = int(rng.integers(size // 4, hi - lo))
        if rng.random() < 0.5:
            y = int(rng.integers(lo, hi - thick))
            x = int(rng.integers(lo, hi - length + 1))
            img[y:y + thick, x:x + length] = 0
        else:
            x = int(rng.integers(lo, hi - thick))
            y = int(rng.integers(lo, hi - length + 1))
            img[y:y + length, x:x + thick] = 0
    return img


def synthesize_fallback_dataset(n: int, seed: int, out: str | os.PathLike) -> DatasetManifest:
    """Write ``n`` deterministic 48x48 stroke-composition PNGs (black ink on white)."""
    if n < 1:
        raise InvalidArgument("n must be >= 1")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    width = max(5, len(str(n - 1)))
    for i in range(n):
        Image.fromarray(_stroke_image(rng)).save(out / f"glyph_{i:0{width}d}.png")
    return load_dataset(out)
