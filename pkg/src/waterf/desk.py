"""Desk-scale presets: bundled decoders, calibration data, and the default scene."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass
from importlib import resources

import numpy as np
import torch

from .codec import load_codec
from .corpus import random_crops
from .field import ExplicitField, ImplicitField, fit_field, load_field, save_field
from .scene import SyntheticSceneSpec, camera_ring, generate_synthetic_scene
from .wavelet import TransformSpec, decoder_view

BUNDLED_LENGTHS = (4, 8, 16)


def cache_dir() -> str:
    path = os.environ.get("WATERF_CACHE_DIR", os.path.join(os.path.expanduser("~"), ".cache", "waterf"))
    os.makedirs(path, exist_ok=True)
    return path


def bundled_path(name: str) -> str:
    return str(resources.files("waterf") / "data" / name)


def bundled_decoder(msg_len: int, whitened: bool = True):
    name = f"decoder_L{msg_len}.npz" if whitened else f"decoder_raw_L{msg_len}.npz"
    path = bundled_path(name)
    if not os.path.exists(path):
        raise FileNotFoundError(f"no bundled decoder for L={msg_len}; run scripts/train_desk_decoders.py")
    return load_codec(path)


def bundled_encoder(msg_len: int):
    return load_codec(bundled_path(f"encoder_L{msg_len}.npz"))


def scene_renders(n: int, seed: int, width: int = 64, height: int = 64,
                  views_per_scene: int = 3) -> np.ndarray:
    """``n`` vanilla renders of fresh random blob scenes from random ring positions."""
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < n:
        spec = SyntheticSceneSpec(seed=int(rng.integers(1_000, 1_000_000)), width=width, height=height,
                                  num_primitives=int(rng.integers(4, 16)))
        cams = camera_ring(views_per_scene, spec.radius, float(rng.uniform(10, 50)), width, height, spec.fov_deg,
                           phase=float(rng.random()))
        _, views = generate_synthetic_scene(spec, cams)
        out.extend(v.image.astype(np.float32) for v in views)
    return np.stack(out[:n])


def calibration_inputs(n: int, seed: int = 2, transform: TransformSpec | None = None,
                       size: int = 64, use_cache: bool = True) -> np.ndarray:
    """Unwatermarked decoder inputs: half blob-scene renders, half photo crops."""
    transform = transform or TransformSpec()
    path = os.path.join(cache_dir(), "calibration",
                        f"{_hash({'n': n, 'seed': seed, 'size': size, 't': repr(transform), 'v': 2})}.npy")
    if use_cache and os.path.exists(path):
        return np.load(path)
    half = n // 2
    imgs = np.concatenate([scene_renders(half, seed, size, size), random_crops(n - half, size, seed)])
    with torch.no_grad():
        out = decoder_view(torch.from_numpy(imgs), transform).numpy()
    if use_cache:
        os.makedirs(os.path.dirname(path), exist_ok=True)
        tmp = path + ".tmp.npy"
        np.save(tmp, out)
        os.replace(tmp, path)
    return out


# --- default desk scene and initial fields ----------------------------------------

EXPLICIT_DEFAULTS = {"resolution": 32, "density_rank": 8, "appearance_rank": 8, "appearance_dim": 12}
IMPLICIT_DEFAULTS = {"position_encoding_levels": 6, "direction_encoding_levels": 2, "depth": 4, "width": 64}
FIT_DEFAULTS = {"explicit": {"iters": 1500, "lr": 0.02}, "implicit": {"iters": 1000, "lr": 2e-3}}


@dataclass
class DeskScene:
    spec: SyntheticSceneSpec
    field: object
    train: list
    heldout: list
    sampling: object


def desk_scene(spec: SyntheticSceneSpec | None = None, heldout_every: int = 3) -> DeskScene:
    """Blob scene on a camera ring; every ``heldout_every``-th view is held out."""
    spec = spec or SyntheticSceneSpec()
    gt, views = generate_synthetic_scene(spec)
    held = [v for i, v in enumerate(views) if i % heldout_every == heldout_every - 1]
    train = [v for i, v in enumerate(views) if i % heldout_every != heldout_every - 1]
    return DeskScene(spec, gt, train, held, spec.sampling())


def _hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def initial_field(kind: str, scene: DeskScene, seed: int = 0, use_cache: bool = True, field_kwargs=None,
                  fit_kwargs=None, progress=None):
    """Photometrically pre-trained field F_theta0 for the desk scene (cached on disk)."""
    field_kwargs = {**(EXPLICIT_DEFAULTS if kind == "explicit" else IMPLICIT_DEFAULTS), **(field_kwargs or {})}
    fit_kwargs = {**FIT_DEFAULTS[kind], **(fit_kwargs or {})}
    key = _hash({"kind": kind, "scene": scene.spec.to_json(), "seed": seed, "field": field_kwargs,
                 "fit": fit_kwargs, "train_views": len(scene.train), "v": 1})
    path = os.path.join(cache_dir(), "fields", f"{kind}_{key}.npz")
    if use_cache and os.path.exists(path):
        return load_field(path)[0]
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    if kind == "explicit":
        f = ExplicitField(bounds=scene.spec.bounds, generator=gen, **field_kwargs)
    else:
        f = ImplicitField(bounds=scene.spec.bounds, **field_kwargs)
    fit_field(f, scene.train, scene.sampling, seed=seed, log=progress, **fit_kwargs)
    if use_cache:
        save_field(f, path, {"fit": fit_kwargs, "seed": seed})
    return f
