"""Checkpoint format: JSON header + concatenated raw little-endian float32.

Layout: 8-byte magic, little-endian uint32 header length, UTF-8 JSON header
{"stage", "iteration", "config", "arrays": [{"name", "shape"}, ...], "meta"},
then each array's raw float32 bytes in header order. Parameter paths are
plain strings like ``model.encoder.stages.0.0.weight``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import CheckpointError

MAGIC = b"ELNCKPT1"


@dataclass
class Checkpoint:
    stage: str
    iteration: int
    config: dict
    arrays: dict[str, np.ndarray]
    meta: dict


def save_checkpoint(path: Path | str, arrays: dict[str, np.ndarray], *, stage: str,
                    iteration: int, config: dict, meta: dict | None = None) -> None:
    entries = []
    blobs = []
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype="<f4")  # tobytes() serializes in C order
        entries.append({"name": name, "shape": list(arr.shape)})
        blobs.append(arr.tobytes())
    header = json.dumps({
        "stage": stage,
        "iteration": iteration,
        "config": config,
        "arrays": entries,
        "meta": meta or {},
    }, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path: Path | str) -> Checkpoint:
    path = Path(path)
    with open(path, "rb") as f:
        magic = f.read(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
        (header_len,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(header_len).decode("utf-8"))
        arrays = {}
        for entry in header["arrays"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = f.read(4 * count)
            if len(buf) != 4 * count:
                raise CheckpointError(f"{path} truncated while reading '{entry['name']}'")
            arrays[entry["name"]] = np.frombuffer(buf, dtype="<f4").reshape(shape).copy()
    return Checkpoint(stage=header["stage"], iteration=header["iteration"],
                      config=header["config"], arrays=arrays, meta=header.get("meta", {}))


def module_arrays(module: nn.Module, prefix: str) -> dict[str, np.ndarray]:
    """Flatten a module's parameters into path -> float32 array."""
    out = {}
    for name, p in module.named_parameters():
        out[f"{prefix}.{name}"] = p.detach().cpu().numpy().astype("<f4")
    return out


def load_module_arrays(module: nn.Module, arrays: dict[str, np.ndarray], prefix: str) -> None:
    """Copy checkpoint arrays into a module; strict on names and shapes."""
    params = dict(module.named_parameters())
    expected = {f"{prefix}.{name}" for name in params}
    present = {k for k in arrays if k.startswith(prefix + ".")}
    missing = expected - present
    if missing:
        raise CheckpointError(f"checkpoint missing parameters: {sorted(missing)[:5]}")
    with torch.no_grad():
        for name, p in params.items():
            arr = arrays[f"{prefix}.{name}"]
            if tuple(arr.shape) != tuple(p.shape):
                raise CheckpointError(
                    f"shape mismatch for {prefix}.{name}: "
                    f"checkpoint {tuple(arr.shape)} vs model {tuple(p.shape)}")
            p.copy_(torch.from_numpy(arr))


def optimizer_arrays(optimizer: torch.optim.Optimizer,
                     named_params: list[tuple[str, nn.Parameter]],
                     prefix: str = "optim") -> dict[str, np.ndarray]:
    """Flatten AdamW per-parameter state (step, exp_avg, exp_avg_sq)."""
    out = {}
    for name, p in named_params:
        state = optimizer.state.get(p)
        if not state:
            continue
        out[f"{prefix}.{name}.step"] = np.asarray(float(state["step"]), dtype="<f4")
        out[f"{prefix}.{name}.exp_avg"] = state["exp_avg"].detach().cpu().numpy().astype("<f4")
        out[f"{prefix}.{name}.exp_avg_sq"] = state["exp_avg_sq"].detach().cpu().numpy().astype("<f4")
    return out


def load_optimizer_arrays(optimizer: torch.optim.Optimizer,
                          named_params: list[tuple[str, nn.Parameter]],
                          arrays: dict[str, np.ndarray],
                          prefix: str = "optim") -> None:
    for name, p in named_params:
        key = f"{prefix}.{name}.step"
        if key not in arrays:
            continue
        optimizer.state[p] = {
            "step": torch.tensor(float(arrays[key])),
            "exp_avg": torch.from_numpy(arrays[f"{prefix}.{name}.exp_avg"].copy()),
            "exp_avg_sq": torch.from_numpy(arrays[f"{prefix}.{name}.exp_avg_sq"].copy()),
        }
