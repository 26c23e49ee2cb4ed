"""Desk-scale natural-image corpus built from photos that ship with scikit-image / scikit-learn.

Training and held-out crops come from disjoint source photos.
"""

from __future__ import annotations

import glob
import os

import numpy as np
from PIL import Image

TRAIN_SOURCES = ("astronaut", "rocket", "immunohistochemistry", "hubble_deep_field", "retina",
                 "colorwheel", "sk_china", "camera", "coins", "gravel", "brick", "grass")
HELDOUT_SOURCES = ("coffee", "chelsea", "sk_flower", "motorcycle_left", "horse")


def _source_image(name: str) -> np.ndarray:
    if name.startswith("sk_"):
        from sklearn.datasets import load_sample_image

        img = load_sample_image(name[3:] + ".jpg")
    else:
        import skimage.data

        loader = getattr(skimage.data, name, None)
        if loader is not None:
            img = loader()
        else:
            path = os.path.join(os.path.dirname(skimage.data.__file__), name + ".png")
            img = np.asarray(Image.open(path))
    img = np.asarray(img)
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=-1)
    img = img[..., :3]
    if img.dtype == bool:
        img = img.astype(np.uint8) * 255
    return img.astype(np.uint8)


def random_crops(n: int, size: int, seed: int, sources=TRAIN_SOURCES) -> np.ndarray:
    """``n`` random square crops (random scale, flip, position) resized to ``size``."""
    rng = np.random.default_rng(seed)
    images = [_source_image(s) for s in sources]
    out = np.empty((n, size, size, 3), dtype=np.float32)
    for k in range(n):
        img = images[int(rng.integers(len(images)))]
        h, w = img.shape[:2]
        side = int(rng.integers(max(size, min(h, w) // 8), min(h, w) + 1))
        y0 = int(rng.integers(0, h - side + 1))
        x0 = int(rng.integers(0, w - side + 1))
        crop = Image.fromarray(img[y0 : y0 + side, x0 : x0 + side]).resize((size, size), Image.BILINEAR)
        arr = np.asarray(crop, dtype=np.float32) / 255.0
        if rng.random() < 0.5:
            arr = arr[:, ::-1]
        out[k] = arr
    return out


def write_corpus(path, images: np.ndarray):
    os.makedirs(path, exist_ok=True)
    for k, img in enumerate(images):
        Image.fromarray(np.round(img * 255).astype(np.uint8)).save(os.path.join(path, f"{k:05d}.png"))


def load_corpus(path, size: int | None = None) -> np.ndarray:
    files = sorted(glob.glob(os.path.join(os.fspath(path), "*.png")) + glob.glob(os.path.join(os.fspath(path), "*.jpg")))
    if not files:
        raise ValueError(f"no images found in {path}")
    out = []
    for f in files:
        img = Image.open(f).convert("RGB")
        if size is not None and img.size != (size, size):
            img = img.resize((size, size), Image.BILINEAR)
        out.append(np.asarray(img, dtype=np.float32) / 255.0)
    return np.stack(out)
