"""Repo-wide checkpoint format.

A checkpoint is a directory holding manifest.json plus one "HCWT" binary file
per parameter: magic "HCWT", u32 rank, u32 dims[rank], little-endian float32
data. The manifest records schema_version, module name, a config echo, the
RNG seed, the step count, and the parameter file list.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .errors import FormatError, StateError

SCHEMA_VERSION = "hicast-ckpt/1"
_MAGIC = b"HCWT"


def write_array(path: str | Path, arr: np.ndarray) -> None:
    arr = np.asarray(arr, dtype="<f4")
    with open(path, "wb") as f:
        f.write(struct.pack("<4sI", _MAGIC, arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        f.write(arr.tobytes())


def read_array(path: str | Path) -> np.ndarray:
    with open(path, "rb") as f:
        head = f.read(8)
        if len(head) != 8 or head[:4] != _MAGIC:
            raise FormatError(f"{path}: not a parameter file (bad magic)")
        rank = struct.unpack("<4sI", head)[1]
        dims = struct.unpack(f"<{rank}I", f.read(4 * rank)) if rank else ()
        data = np.frombuffer(f.read(), dtype="<f4")
    count = int(np.prod(dims)) if dims else 1
    if data.size != count:
        raise FormatError(f"{path}: expected {count} values, found {data.size}")
    return data.reshape(dims).copy()


def _fname(name: str) -> str:
    return name.replace("/", "__") + ".hcwt"


def save_checkpoint(
    ckpt_dir: str | Path,
    module: str,
    config: dict,
    seed: int,
    step: int,
    params: dict[str, np.ndarray | torch.Tensor],
    extra: dict | None = None,
) -> Path:
    ckpt_dir = Path(ckpt_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    names = sorted(params)
    for name in names:
        value = params[name]
        if isinstance(value, torch.Tensor):
            value = value.detach().cpu().numpy()
        write_array(ckpt_dir / _fname(name), value)
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "module": module,
        "config": config,
        "seed": seed,
        "step": step,
        "parameters": names,
    }
    if extra:
        manifest.update(extra)
    with open(ckpt_dir / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True, default=str)
    return ckpt_dir


def load_checkpoint(ckpt_dir: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    ckpt_dir = Path(ckpt_dir)
    manifest_path = ckpt_dir / "manifest.json"
    if not manifest_path.exists():
        raise StateError(f"missing checkpoint: {ckpt_dir} has no manifest.json")
    with open(manifest_path) as f:
        manifest = json.load(f)
    params = {name: read_array(ckpt_dir / _fname(name)) for name in manifest["parameters"]}
    return manifest, params


def module_state_arrays(module: torch.nn.Module) -> dict[str, np.ndarray]:
    """State dict as float32 arrays (parameters and float buffers only)."""
    out = {}
    for name, tensor in module.state_dict().items():
        if tensor.is_floating_point():
            out[name] = tensor.detach().cpu().to(torch.float32).numpy()
    return out


def load_module_state(module: torch.nn.Module, params: dict[str, np.ndarray]) -> None:
    state = {k: torch.from_numpy(np.ascontiguousarray(v)) for k, v in params.items()}
    missing = [k for k, t in module.state_dict().items() if t.is_floating_point() and k not in state]
    if missing:
        raise FormatError(f"checkpoint is missing parameters: {missing[:4]}...")
    module.load_state_dict(state, strict=False)
