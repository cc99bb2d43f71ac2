"""Declarative building blocks shared by the VAE, GAN and U-Net.

Architectures are described with immutable :class:`LayerSpec` /
:class:`ResidualBlockSpec` values.  Shapes and parameter counts are derived from
the specs alone; :func:`build_layer` and :class:`ResidualBlock` turn them into
``torch.nn`` modules.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence, Union

import numpy as np
import torch
from torch import nn

from .errors import InvalidArgument, InvalidSpec

LAYER_KINDS = (
    "convolution",
    "transposed-convolution",
    "linear",
    "batch-norm",
    "group-norm",
    "activation",
    "pool",
    "upsample",
)
ACTIVATIONS = ("relu", "leaky-relu", "tanh", "sigmoid", "none")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_channels: int = 1
    out_channels: int = 1
    kernel: int = 1
    stride: int = 1
    padding: int = 0
    output_padding: int = 0
    activation_kind: str = "none"
    slope: float | None = None
    groups: int | None = None
    bias: bool = True
    factor: int = 2
    align_corners: bool = False

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise InvalidSpec(f"unknown layer kind {self.kind!r}")
        if min(self.in_channels, self.out_channels, self.kernel, self.stride, self.factor) < 1:
            raise InvalidSpec(f"{self.kind}: counts must be strictly positive")
        if self.padding < 0 or self.output_padding < 0:
            raise InvalidSpec(f"{self.kind}: negative padding")
        if self.kind == "activation":
            if self.activation_kind not in ACTIVATIONS:
                raise InvalidSpec(f"unknown activation {self.activation_kind!r}")
            if self.activation_kind == "leaky-relu" and self.slope is None:
                raise InvalidSpec("leaky-relu requires an explicit slope")
        if self.kind == "group-norm":
            if self.groups is None or self.groups < 1 or self.out_channels % self.groups:
                raise InvalidSpec(
                    f"group-norm: {self.groups} groups do not divide {self.out_channels} channels"
                )
        if self.kind in ("batch-norm", "group-norm") and self.in_channels != self.out_channels:
            raise InvalidSpec(f"{self.kind} cannot change the channel count")
        if self.kind == "transposed-convolution" and self.output_padding >= self.stride:
            raise InvalidSpec("output_padding must be smaller than stride")


# Small constructors; keep call sites readable.

def conv(cin: int, cout: int, kernel: int = 3, stride: int = 1, padding: int | None = None) -> LayerSpec:
    if padding is None:
        padding = kernel // 2
    return LayerSpec("convolution", cin, cout, kernel, stride, padding)


def conv_transpose_x2(cin: int, cout: int, kernel: int = 3) -> LayerSpec:
    """Transposed convolution configured for exact 2x spatial doubling."""
    # out = (H-1)*2 - 2p + k + op == 2H  <=>  k + op - 2p == 2
    padding = (kernel - 1) // 2
    output_padding = 2 - kernel + 2 * padding
    return LayerSpec(
        "transposed-convolution", cin, cout, kernel, 2, padding, output_padding=output_padding
    )


def linear(fin: int, fout: int) -> LayerSpec:
    return LayerSpec("linear", fin, fout)


def batch_norm(c: int) -> LayerSpec:
    return LayerSpec("batch-norm", c, c)


def group_norm(c: int, groups: int = 4) -> LayerSpec:
    return LayerSpec("group-norm", c, c, groups=groups)


def act(kind: str, slope: float | None = None) -> LayerSpec:
    return LayerSpec("activation", activation_kind=kind, slope=slope)


def max_pool(size: int = 2) -> LayerSpec:
    return LayerSpec("pool", kernel=size, stride=size)


def upsample(factor: int = 2, align_corners: bool = True) -> LayerSpec:
    return LayerSpec("upsample", factor=factor, align_corners=align_corners)


@dataclass(frozen=True)
class ResidualBlockSpec:
    """Residual block: ``post(conv_path(x) [+ time] + shortcut(x))``.

    ``shortcut`` is either ``"identity"`` or the projection :class:`LayerSpec`.
    ``resample`` is ``"none"``, ``"down"`` or ``"up"``; the resampling itself is
    carried by the layers in ``conv_layers``.
    """

    conv_layers: tuple[LayerSpec, ...]
    shortcut: Union[str, LayerSpec] = "identity"
    resample: str = "none"
    time_embedding_dim: int | None = None
    post_activation: LayerSpec | None = None

    def __post_init__(self):
        if not self.conv_layers:
            raise InvalidSpec("residual block needs at least one layer")
        if self.resample not in ("none", "down", "up"):
            raise InvalidSpec(f"unknown resample {self.resample!r}")
        if isinstance(self.shortcut, str) and self.shortcut != "identity":
            raise InvalidSpec(f"unknown shortcut {self.shortcut!r}")
        if self.time_embedding_dim is not None and self.time_embedding_dim < 1:
            raise InvalidSpec("time_embedding_dim must be positive")

    @property
    def in_channels(self) -> int:
        return self.conv_layers[0].in_channels

    @property
    def out_channels(self) -> int:
        chans = [l.out_channels for l in self.conv_layers if l.kind in _CHANNEL_LAYERS]
        return chans[-1]


_CHANNEL_LAYERS = ("convolution", "transposed-convolution", "batch-norm", "group-norm")


@dataclass(frozen=True)
class InitScheme:
    kind: str = "default"  # "xavier-uniform" | "default"
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("xavier-uniform", "default"):
            raise InvalidArgument(f"unknown init kind {self.kind!r}")


# ---------------------------------------------------------------------------
# shape inference and parameter counting


def _spatial(shape: Sequence[int], kind: str) -> tuple[int, ...]:
    if len(shape) not in (3, 4):
        raise InvalidSpec(f"{kind} expects a (C,H,W) or (N,C,H,W) shape, got {tuple(shape)}")
    return tuple(int(s) for s in shape)


def infer_output_shape(spec: LayerSpec, input_shape: Sequence[int]) -> tuple[int, ...]:
    """Output shape of one layer. Accepts an optional leading batch dim."""
    shape = tuple(int(s) for s in input_shape)
    if spec.kind == "linear":
        if len(shape) not in (1, 2):
            raise InvalidSpec(f"linear expects (F,) or (N,F), got {shape}")
        if shape[-1] != spec.in_channels:
            raise InvalidSpec(f"linear expects {spec.in_channels} features, got {shape[-1]}")
        return shape[:-1] + (spec.out_channels,)
    if spec.kind == "activation":
        return shape

    shape = _spatial(shape, spec.kind)
    *lead, c, h, w = shape
    lead = tuple(lead)
    if spec.kind in ("pool", "upsample"):
        if spec.kind == "pool":
            h, w = ((d - spec.kernel) // spec.stride + 1 for d in (h, w))
        else:
            h, w = h * spec.factor, w * spec.factor
        if h < 1 or w < 1:
            raise InvalidSpec(f"{spec.kind} collapses spatial dims of {shape}")
        return lead + (c, h, w)
    if c != spec.in_channels:
        raise InvalidSpec(f"{spec.kind} expects {spec.in_channels} channels, got {c}")
    if spec.kind in ("batch-norm", "group-norm"):
        return shape
    k, s, p = spec.kernel, spec.stride, spec.padding
    if spec.kind == "convolution":
        h, w = ((d + 2 * p - k) // s + 1 for d in (h, w))
    else:
        h, w = ((d - 1) * s - 2 * p + k + spec.output_padding for d in (h, w))
    if h < 1 or w < 1:
        raise InvalidSpec(f"{spec.kind} collapses spatial dims of {shape}")
    return lead + (spec.out_channels, h, w)


def block_output_shape(block: ResidualBlockSpec, input_shape: Sequence[int]) -> tuple[int, ...]:
    shape = tuple(input_shape)
    for layer in block.conv_layers:
        shape = infer_output_shape(layer, shape)
    short = tuple(input_shape)
    if isinstance(block.shortcut, LayerSpec):
        short = infer_output_shape(block.shortcut, short)
    if short != shape:
        raise InvalidSpec(f"residual paths disagree: conv path {shape}, shortcut {short}")
    return shape


def chain_shape(components: Iterable, input_shape: Sequence[int]) -> tuple[int, ...]:
    """Push a shape through a sequence of layers/blocks, raising on the first mismatch."""
    shape = tuple(input_shape)
    for comp in components:
        if isinstance(comp, ResidualBlockSpec):
            shape = block_output_shape(comp, shape)
        else:
            shape = infer_output_shape(comp, shape)
    return shape


def _layer_params(spec: LayerSpec) -> int:
    if spec.kind == "convolution" or spec.kind == "transposed-convolution":
        n = spec.in_channels * spec.out_channels * spec.kernel * spec.kernel
        return n + (spec.out_channels if spec.bias else 0)
    if spec.kind == "linear":
        return spec.in_channels * spec.out_channels + (spec.out_channels if spec.bias else 0)
    if spec.kind in ("batch-norm", "group-norm"):
        return 2 * spec.out_channels
    return 0


def count_parameters(spec) -> int:
    """Exact number of trainable weights + biases.

    ``spec`` may be a :class:`LayerSpec`, a :class:`ResidualBlockSpec`, an
    iterable of those, or a model spec exposing ``components()`` and
    ``validate()`` (the latter runs full shape inference first).
    """
    if isinstance(spec, LayerSpec):
        return _layer_params(spec)
    if isinstance(spec, ResidualBlockSpec):
        n = sum(_layer_params(l) for l in spec.conv_layers)
        if isinstance(spec.shortcut, LayerSpec):
            n += _layer_params(spec.shortcut)
        if spec.time_embedding_dim is not None:
            n += spec.time_embedding_dim * spec.out_channels + spec.out_channels
        return n
    if hasattr(spec, "components"):
        spec.validate()
        return sum(count_parameters(c) for c in spec.components())
    try:
        items = list(spec)
    except TypeError:
        raise InvalidSpec(f"cannot count parameters of {type(spec).__name__}") from None
    return sum(count_parameters(c) for c in items)


# ---------------------------------------------------------------------------
# initialization and embeddings


def xavier_bound(fan_in: int, fan_out: int) -> float:
    return math.sqrt(6.0 / (fan_in + fan_out))


def xavier_uniform_init(
    fan_in: int, fan_out: int, shape: Sequence[int], seed: int, dtype: torch.dtype = torch.float64
) -> torch.Tensor:
    """Weights drawn from U[-b, b], b = sqrt(6 / (fan_in + fan_out)); pure function of the seed."""
    if fan_in < 1 or fan_out < 1:
        raise InvalidArgument("fan_in and fan_out must be >= 1")
    b = xavier_bound(fan_in, fan_out)
    gen = torch.Generator().manual_seed(int(seed))
    w = (torch.rand(tuple(shape), generator=gen, dtype=torch.float64) * 2.0 - 1.0) * b
    if dtype != torch.float64:
        # rounding to a narrower float must not push samples past the bound
        lim = float(np.nextafter(np.float32(b), np.float32(0))) if np.float32(b) > b else b
        w = w.to(dtype).clamp_(-lim, lim)
    return w


def time_frequencies(dim: int, base: float = 10000.0) -> np.ndarray:
    half = dim // 2
    return base ** (-np.arange(half, dtype=np.float64) / half)


def sinusoidal_time_embedding(t, dim: int, base: float = 10000.0) -> torch.Tensor:
    """Interleaved ``(sin(t w_k), cos(t w_k))`` pairs with w_k = base^(-k / (dim/2)).

    ``t`` may be a scalar (returns shape ``[dim]``) or a 1-D tensor of steps
    (returns ``[len(t), dim]``).
    """
    if dim < 2 or dim % 2:
        raise InvalidArgument(f"embedding dim must be even and >= 2, got {dim}")
    scalar = not torch.is_tensor(t) or t.dim() == 0
    steps = torch.as_tensor(t, dtype=torch.float64).reshape(-1)
    if (steps < 0).any():
        raise InvalidArgument("time steps must be non-negative")
    freqs = torch.from_numpy(time_frequencies(dim, base))
    angles = steps[:, None] * freqs[None, :]
    emb = torch.stack((torch.sin(angles), torch.cos(angles)), dim=-1).reshape(len(steps), dim)
    emb = emb.to(torch.get_default_dtype())
    return emb[0] if scalar else emb


# ---------------------------------------------------------------------------
# torch modules


class _Upsample(nn.Module):
    def __init__(self, factor: int, align_corners: bool):
        super().__init__()
        self.factor = factor
        self.align_corners = align_corners

    def forward(self, x):
        return nn.functional.interpolate(
            x, scale_factor=self.factor, mode="bilinear", align_corners=self.align_corners
        )


def build_layer(spec: LayerSpec) -> nn.Module:
    k = spec.kind
    if k == "convolution":
        return nn.Conv2d(spec.in_channels, spec.out_channels, spec.kernel, spec.stride,
                         spec.padding, bias=spec.bias)
    if k == "transposed-convolution":
        return nn.ConvTranspose2d(spec.in_channels, spec.out_channels, spec.kernel, spec.stride,
                                  spec.padding, output_padding=spec.output_padding, bias=spec.bias)
    if k == "linear":
        return nn.Linear(spec.in_channels, spec.out_channels, bias=spec.bias)
    if k == "batch-norm":
        return nn.BatchNorm2d(spec.out_channels, momentum=0.1)
    if k == "group-norm":
        return nn.GroupNorm(spec.groups, spec.out_channels)
    if k == "pool":
        return nn.MaxPool2d(spec.kernel, spec.stride)
    if k == "upsample":
        return _Upsample(spec.factor, spec.align_corners)
    if spec.activation_kind == "leaky-relu":
        return nn.LeakyReLU(spec.slope)
    return {"relu": nn.ReLU, "tanh": nn.Tanh, "sigmoid": nn.Sigmoid, "none": nn.Identity}[
        spec.activation_kind
    ]()


def build_sequence(specs: Iterable[LayerSpec]) -> nn.Sequential:
    return nn.Sequential(*(build_layer(s) for s in specs))


class ResidualBlock(nn.Module):
    def __init__(self, spec: ResidualBlockSpec):
        super().__init__()
        self.spec = spec
        self.body = build_sequence(spec.conv_layers)
        self.shortcut = (
            build_layer(spec.shortcut) if isinstance(spec.shortcut, LayerSpec) else nn.Identity()
        )
        self.time_proj = (
            nn.Linear(spec.time_embedding_dim, spec.out_channels)
            if spec.time_embedding_dim is not None
            else None
        )
        self.post = build_layer(spec.post_activation) if spec.post_activation else nn.Identity()

    def forward(self, x: torch.Tensor, temb: torch.Tensor | None = None) -> torch.Tensor:
        h = self.body(x)
        if self.time_proj is not None:
            if temb is None:
                raise InvalidArgument("time-conditioned block called without an embedding")
            h = h + self.time_proj(temb)[:, :, None, None]
        return self.post(h + self.shortcut(x))


def apply_init(module: nn.Module, scheme: InitScheme) -> nn.Module:
    """Re-initialize conv/linear weights in place. Biases are zeroed under xavier."""
    if scheme.kind == "default":
        return module
    layers = [m for m in module.modules() if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear))]
    for i, m in enumerate(layers):
        w = m.weight
        fan_in, fan_out = nn.init._calculate_fan_in_and_fan_out(w)
        with torch.no_grad():
            w.copy_(xavier_uniform_init(fan_in, fan_out, w.shape, scheme.seed * 100003 + i, w.dtype))
            if m.bias is not None:
                m.bias.zero_()
    return module


def module_parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad)
