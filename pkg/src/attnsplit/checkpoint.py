"""Bit-exact network and optimizer checkpoints.

One ``.npz`` file per network: a JSON header (format version, byte order,
architecture descriptor) stored as a byte array next to the parameter arrays,
each written little-endian.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

FORMAT_VERSION = 1
BYTE_ORDER = "little"
_HEADER = "__header__"


def _le(array: np.ndarray) -> np.ndarray:
    return array.astype(array.dtype.newbyteorder("<"), copy=False)


def _encode_header(header: dict) -> np.ndarray:
    return np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)


def _decode_header(raw: np.ndarray) -> dict:
    header = json.loads(raw.tobytes().decode())
    if header.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format {header.get('format_version')}")
    if header.get("byte_order") != BYTE_ORDER:
        raise ValueError(f"unsupported byte order {header.get('byte_order')}")
    return header


def save_network(path: str | Path, module: nn.Module, **extra) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = {k: _le(v.detach().cpu().numpy()) for k, v in module.state_dict().items()}
    header = {"format_version": FORMAT_VERSION, "byte_order": BYTE_ORDER,
              "arch": getattr(module, "arch", {}), "keys": list(state), **extra}
    with open(path, "wb") as fh:
        np.savez(fh, **{_HEADER: _encode_header(header)}, **state)
    return path


def load_network(path: str | Path, module: nn.Module | None = None) -> nn.Module:
    """Restore parameters into ``module`` (built from the stored descriptor if omitted)."""
    with np.load(path) as data:
        header = _decode_header(data[_HEADER])
        state = {k: torch.from_numpy(np.array(data[k])) for k in header["keys"]}
    if module is None:
        from .networks import build_network

        module = build_network(header["arch"])
    module.load_state_dict(state)
    return module


def read_header(path: str | Path) -> dict:
    with np.load(path) as data:
        return _decode_header(data[_HEADER])


def save_optimizer(path: str | Path, optimizer: torch.optim.Optimizer) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    sd = optimizer.state_dict()
    arrays = {}
    for idx, slots in sd["state"].items():
        for name, value in slots.items():
            arrays[f"state.{idx}.{name}"] = _le(torch.as_tensor(value).detach().cpu().numpy())
    header = {"format_version": FORMAT_VERSION, "byte_order": BYTE_ORDER,
              "param_groups": sd["param_groups"], "keys": list(arrays)}
    with open(path, "wb") as fh:
        np.savez(fh, **{_HEADER: _encode_header(header)}, **arrays)
    return path


def load_optimizer(path: str | Path, optimizer: torch.optim.Optimizer) -> torch.optim.Optimizer:
    with np.load(path) as data:
        header = _decode_header(data[_HEADER])
        state: dict[int, dict] = {}
        for key in header["keys"]:
            _, idx, name = key.split(".", 2)
            state.setdefault(int(idx), {})[name] = torch.from_numpy(np.array(data[key]))
    groups = header["param_groups"]
    for g in groups:
        if "betas" in g:
            g["betas"] = tuple(g["betas"])
    optimizer.load_state_dict({"state": state, "param_groups": groups})
    return optimizer
