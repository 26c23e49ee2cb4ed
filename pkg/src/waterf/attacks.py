"""Image distortions applied to renders before message extraction."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from .codec import MIN_DECODER_SIZE, bit_accuracy, jpeg_roundtrip
from .field import render_image_nograd
from .wavelet import TransformSpec

_PARAMS = {
    "identity": {},
    "gaussian_noise": {"variance": 0.1},
    "rotation": {"max_angle": math.pi / 6},
    "scaling": {"factor": 0.25, "upscale_back": False},
    "gaussian_blur": {"sigma": 0.1},
    "crop": {"keep_area": 0.4},
    "brightness": {"factor": 2.0},
    "jpeg": {"quality": 10},
    "combined": {"steps": []},
}


@dataclass
class AttackSpec:
    kind: str
    params: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in _PARAMS:
            raise ValueError(f"unknown attack kind {self.kind!r}; expected one of {sorted(_PARAMS)}")
        unknown = set(self.params) - set(_PARAMS[self.kind])
        if unknown:
            raise ValueError(f"{self.kind}: unknown parameters {sorted(unknown)}")
        self.params = {**_PARAMS[self.kind], **self.params}
        p = self.params
        if self.kind == "gaussian_noise" and p["variance"] < 0:
            raise ValueError("variance must be >= 0")
        if self.kind == "crop" and not 0 < p["keep_area"] <= 1:
            raise ValueError("keep_area must be in (0, 1]")
        if self.kind == "jpeg" and not 1 <= p["quality"] <= 100:
            raise ValueError("quality must be in [1, 100]")
        if self.kind == "scaling" and p["factor"] <= 0:
            raise ValueError("scaling factor must be > 0")
        if self.kind == "gaussian_blur" and p["sigma"] < 0:
            raise ValueError("sigma must be >= 0")
        if self.kind == "brightness" and p["factor"] < 0:
            raise ValueError("brightness factor must be >= 0")
        if self.kind == "rotation" and p["max_angle"] < 0:
            raise ValueError("max_angle must be >= 0")
        if self.kind == "combined":
            p["steps"] = [s if isinstance(s, AttackSpec) else AttackSpec.from_json(s) for s in p["steps"]]

    @property
    def label(self) -> str:
        if self.kind == "combined":
            return "combined(" + ",".join(s.label for s in self.params["steps"]) + ")"
        args = ",".join(f"{k}={v}" for k, v in self.params.items() if k != "upscale_back")
        return f"{self.kind}({args})" if args else self.kind

    def to_json(self) -> dict:
        params = dict(self.params)
        if self.kind == "combined":
            params["steps"] = [s.to_json() for s in params["steps"]]
        return {"kind": self.kind, "params": params, "seed": self.seed}

    @classmethod
    def from_json(cls, data: dict) -> "AttackSpec":
        unknown = set(data) - {"kind", "params", "seed"}
        if unknown:
            raise ValueError(f"unknown attack keys {sorted(unknown)}")
        return cls(data["kind"], dict(data.get("params", {})), int(data.get("seed", 0)))


def standard_suite() -> list[AttackSpec]:
    """The evaluation suite: clean, six single distortions, JPEG and a crop/brightness/JPEG chain."""
    return [
        AttackSpec("identity"),
        AttackSpec("gaussian_noise"),
        AttackSpec("rotation"),
        AttackSpec("scaling"),
        AttackSpec("gaussian_blur"),
        AttackSpec("crop"),
        AttackSpec("brightness"),
        AttackSpec("jpeg"),
        AttackSpec("combined", {"steps": [AttackSpec("crop"), AttackSpec("brightness"), AttackSpec("jpeg")]}),
    ]


def _resize(img: np.ndarray, h: int, w: int) -> np.ndarray:
    x = torch.from_numpy(np.ascontiguousarray(img)).permute(2, 0, 1)[None]
    y = F.interpolate(x, size=(h, w), mode="bilinear", align_corners=False, antialias=h < img.shape[0])
    return y[0].permute(1, 2, 0).numpy()


def crop_side(n: int, keep_area: float) -> int:
    return max(1, int(round(n * math.sqrt(keep_area))))


def _apply(img: np.ndarray, spec: AttackSpec, rng: np.random.Generator) -> np.ndarray:
    p = spec.params
    kind = spec.kind
    if kind == "identity":
        return img
    if kind == "gaussian_noise":
        return img + rng.normal(0.0, math.sqrt(p["variance"]), img.shape) if p["variance"] > 0 else img
    if kind == "rotation":
        angle = rng.uniform(-p["max_angle"], p["max_angle"])
        return ndimage.rotate(img, math.degrees(angle), axes=(1, 0), reshape=False, order=1,
                              mode="constant", cval=0.0)
    if kind == "scaling":
        h, w = img.shape[:2]
        out = _resize(img, max(1, round(h * p["factor"])), max(1, round(w * p["factor"])))
        return _resize(out, h, w) if p["upscale_back"] else out
    if kind == "gaussian_blur":
        return ndimage.gaussian_filter(img, sigma=(p["sigma"], p["sigma"], 0), mode="reflect") if p["sigma"] else img
    if kind == "crop":
        h, w = img.shape[:2]
        ch, cw = crop_side(h, p["keep_area"]), crop_side(w, p["keep_area"])
        y0, x0 = (h - ch) // 2, (w - cw) // 2
        return img[y0 : y0 + ch, x0 : x0 + cw]
    if kind == "brightness":
        return img * p["factor"]
    if kind == "jpeg":
        return jpeg_roundtrip(img, p["quality"])
    if kind == "combined":
        for step in p["steps"]:
            img = np.clip(_apply(img, step, rng), 0.0, 1.0)
        return img
    raise AssertionError(kind)


def apply_attack(image, spec: AttackSpec):
    """Distort an (H, W, 3) image in [0, 1]; returns the same array type, clamped to [0, 1].

    Stochastic kinds draw from a generator seeded by ``spec.seed``.
    """
    as_torch = isinstance(image, torch.Tensor)
    arr = image.detach().cpu().double().numpy() if as_torch else np.asarray(image, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[-1] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got shape {arr.shape}")
    if arr.min() < 0 or arr.max() > 1:
        raise ValueError("image values must lie in [0, 1]")
    out = np.clip(_apply(arr, spec, np.random.default_rng(spec.seed)), 0.0, 1.0)
    if as_torch:
        return torch.from_numpy(np.ascontiguousarray(out)).to(image.dtype)
    return out


def extraction_size(height: int, width: int, transform: TransformSpec) -> tuple[int, int]:
    """Smallest size at least as large as the input that the decoder can read.

    Sides are rounded up to a multiple of the transform's block size and raised so
    the decoder sees at least MIN_DECODER_SIZE pixels.
    """
    block = 2 ** transform.level if transform.domain == "dwt" else 1
    floor = MIN_DECODER_SIZE * block

    def fit(n):
        return max(floor, -(-n // block) * block)

    return fit(height), fit(width)


def prepare_for_extraction(image, transform: TransformSpec):
    img = torch.as_tensor(image)
    h, w = img.shape[:2]
    th, tw = extraction_size(h, w, transform)
    if (th, tw) == (h, w):
        return img
    return torch.from_numpy(_resize(img.double().numpy(), th, tw)).to(img.dtype)


@torch.no_grad()
def robustness_sweep(field, views, decoder, transform: TransformSpec, specs: list[AttackSpec], message,
                     sampling, chunk_rows: int = 16, renders=None) -> list[dict]:
    """Mean bit accuracy of render -> attack -> extract for each attack spec.

    ``renders`` may hold precomputed renders of ``views`` to skip re-rendering.
    """
    from .finetune import extract_message

    if renders is None:
        renders = [render_image_nograd(field, v.camera, sampling, chunk_rows=chunk_rows) for v in views]
    rows = []
    for spec in specs:
        accs = []
        for i, x in enumerate(renders):
            view_spec = AttackSpec(spec.kind, spec.params, spec.seed + i)
            attacked = prepare_for_extraction(apply_attack(x, view_spec), transform)
            accs.append(bit_accuracy(extract_message(attacked, decoder, transform), message))
        rows.append({"setting": spec.label, "attack": spec.to_json(), "bit_accuracy": float(np.mean(accs)),
                     "per_view": accs})
    return rows
