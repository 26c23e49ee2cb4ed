"""Single-file archive: named arrays plus a JSON metadata record."""

from __future__ import annotations

import json
import os

import numpy as np
import torch

FORMAT_VERSION = 1
_META_KEY = "__meta__"


def save_archive(path, arrays: dict, meta: dict) -> str:
    path = os.fspath(path)
    if not path.endswith(".npz"):
        path += ".npz"
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    payload = {}
    for name, value in arrays.items():
        if name == _META_KEY:
            raise ValueError(f"{_META_KEY} is reserved")
        if isinstance(value, torch.Tensor):
            value = value.detach().cpu().numpy()
        payload[name] = np.asarray(value)
    meta = {"version": FORMAT_VERSION, **meta}
    payload[_META_KEY] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    tmp = path + ".tmp.npz"
    np.savez(tmp, **payload)
    os.replace(tmp, path)
    return path


def load_archive(path) -> tuple[dict[str, np.ndarray], dict]:
    with np.load(os.fspath(path), allow_pickle=False) as data:
        if _META_KEY not in data.files:
            raise ValueError(f"{path}: missing metadata record")
        meta = json.loads(bytes(data[_META_KEY]).decode())
        arrays = {k: data[k] for k in data.files if k != _META_KEY}
    return arrays, meta


def state_to_arrays(module: torch.nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def arrays_to_state(arrays: dict[str, np.ndarray]) -> dict[str, torch.Tensor]:
    return {k: torch.from_numpy(np.array(v)) for k, v in arrays.items()}
