"""Tensor container used for checkpoints and external feature-extractor weights.

Layout::

    b"KBTC"                       4-byte magic
    uint64 little-endian          header length in bytes
    header                        UTF-8 JSON (sorted keys)
    blobs                         raw little-endian float32 data, back to back

The header lists every tensor as ``{name, shape, dtype, source_dtype, offset,
nbytes}`` with offsets relative to the start of the blob section, plus a
``format_version`` and a free-form ``meta`` mapping (family, variant, epoch,
seed, config snapshot, optimizer hyper-parameters).
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
import torch
from torch import nn

from .errors import FamilyMismatch, FormatError, InvalidArgument

MAGIC = b"KBTC"
FORMAT_VERSION = 1
_LEN = struct.Struct("<Q")

_DTYPES = {
    "float32": torch.float32,
    "float64": torch.float64,
    "float16": torch.float16,
    "bfloat16": torch.bfloat16,
    "int64": torch.int64,
    "int32": torch.int32,
}


def _dtype_name(dtype: torch.dtype) -> str:
    for name, dt in _DTYPES.items():
        if dt == dtype:
            return name
    raise InvalidArgument(f"unsupported tensor dtype {dtype}")


def write_container(path: str | os.PathLike, tensors: Mapping[str, torch.Tensor], meta: Mapping | None = None):
    entries = []
    blobs = []
    offset = 0
    for name, t in tensors.items():
        t = t.detach().cpu()
        src = _dtype_name(t.dtype)
        arr = t.to(torch.float32).contiguous().numpy().astype("<f4", copy=False)
        if not np.isfinite(arr).all():
            raise InvalidArgument(f"refusing to write non-finite values in tensor {name!r}")
        raw = arr.tobytes()
        entries.append({
            "name": name,
            "shape": list(t.shape),
            "dtype": "float32",
            "source_dtype": src,
            "offset": offset,
            "nbytes": len(raw),
        })
        blobs.append(raw)
        offset += len(raw)
    header = {"format_version": FORMAT_VERSION, "tensors": entries, "meta": dict(meta or {})}
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(_LEN.pack(len(hbytes)))
        fh.write(hbytes)
        for raw in blobs:
            fh.write(raw)
    os.replace(tmp, path)


def read_container(path: str | os.PathLike) -> tuple[dict[str, torch.Tensor], dict]:
    """Return ``(tensors, meta)``; raises :class:`FormatError` on any inconsistency."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    if len(data) < len(MAGIC) + _LEN.size or data[:4] != MAGIC:
        raise FormatError(f"{path}: not a tensor container")
    (hlen,) = _LEN.unpack_from(data, 4)
    start = 4 + _LEN.size
    if start + hlen > len(data):
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(data[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable header") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise FormatError(
            f"{path}: format version {header.get('format_version')} != {FORMAT_VERSION}"
        )
    body = memoryview(data)[start + hlen:]
    tensors: dict[str, torch.Tensor] = {}
    expected = 0
    for e in header.get("tensors", []):
        shape = tuple(e["shape"])
        n = 4 * math.prod(shape)
        if e["nbytes"] != n or e["offset"] != expected or e["dtype"] != "float32":
            raise FormatError(f"{path}: blob {e['name']!r} has inconsistent length/offset")
        if e["offset"] + n > len(body):
            raise FormatError(f"{path}: blob {e['name']!r} is truncated")
        arr = np.frombuffer(body, dtype="<f4", count=n // 4, offset=e["offset"]).reshape(shape)
        t = torch.from_numpy(arr.astype(np.float32))
        tensors[e["name"]] = t.to(_DTYPES[e.get("source_dtype", "float32")])
        expected += n
    if expected != len(body):
        raise FormatError(f"{path}: {len(body) - expected} trailing bytes after the last blob")
    return tensors, header.get("meta", {})


@dataclass
class CheckpointState:
    family: str
    variant: str
    epoch: int
    seed: int
    config: dict
    tensors: dict[str, torch.Tensor] = field(default_factory=dict)
    optimizers: dict[str, dict] = field(default_factory=dict)  # name -> param_groups


def capture_state(family: str, variant: str, epoch: int, seed: int, config: dict,
                  modules: Mapping[str, nn.Module],
                  optimizers: Mapping[str, torch.optim.Optimizer] | None = None) -> CheckpointState:
    tensors: dict[str, torch.Tensor] = {}
    for prefix, module in modules.items():
        for k, v in module.state_dict().items():
            tensors[f"{prefix}/{k}"] = v.detach().clone()
    groups = {}
    for oname, opt in (optimizers or {}).items():
        sd = opt.state_dict()
        groups[oname] = sd["param_groups"]
        for idx, pstate in sd["state"].items():
            for k, v in pstate.items():
                tensors[f"optim/{oname}/{idx}/{k}"] = torch.as_tensor(v).detach().clone()
    return CheckpointState(family, variant, epoch, seed, dict(config), tensors, groups)


def restore_modules(state: CheckpointState, modules: Mapping[str, nn.Module]):
    for prefix, module in modules.items():
        sd = {k[len(prefix) + 1:]: v for k, v in state.tensors.items() if k.startswith(prefix + "/")}
        module.load_state_dict(sd)


def restore_optimizers(state: CheckpointState, optimizers: Mapping[str, torch.optim.Optimizer]):
    for oname, opt in optimizers.items():
        per_param: dict[int, dict] = {}
        pre = f"optim/{oname}/"
        for k, v in state.tensors.items():
            if k.startswith(pre):
                idx, key = k[len(pre):].split("/", 1)
                per_param.setdefault(int(idx), {})[key] = v.clone()
        opt.load_state_dict({"state": per_param, "param_groups": state.optimizers[oname]})


def save_checkpoint(state: CheckpointState, path: str | os.PathLike):
    meta = {
        "kind": "checkpoint",
        "family": state.family,
        "variant": state.variant,
        "epoch": state.epoch,
        "seed": state.seed,
        "config": state.config,
        "optimizers": state.optimizers,
    }
    write_container(path, state.tensors, meta)


def load_checkpoint(path: str | os.PathLike, family: str | None = None) -> CheckpointState:
    tensors, meta = read_container(path)
    if meta.get("kind") != "checkpoint":
        raise FormatError(f"{path}: container is not a training checkpoint")
    if family is not None and meta.get("family") != family:
        raise FamilyMismatch(f"{path}: checkpoint family {meta.get('family')!r}, expected {family!r}")
    return CheckpointState(
        meta["family"], meta["variant"], int(meta["epoch"]), int(meta["seed"]),
        meta.get("config", {}), tensors, meta.get("optimizers", {}),
    )
