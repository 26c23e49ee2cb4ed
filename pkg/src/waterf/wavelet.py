"""Orthonormal 2D Haar DWT plus DCT/DFT alternates.

Images are channel-last tensors: (H, W, C) or batched (B, H, W, C). Every
transform here is differentiable so it can sit between a renderer and the
watermark decoder.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

DOMAINS = ("dwt", "dct", "dft", "none")


@dataclass(frozen=True)
class TransformSpec:
    """Which frequency view of an image the decoder reads.

    ``domain`` selects DWT (default), DCT, DFT magnitude, or the raw image.
    ``subband`` is only used for the DWT: "LL" or "LH_j"/"HL_j"/"HH_j".
    """

    family: str = "haar"
    level: int = 2
    normalize_ll: bool = True
    domain: str = "dwt"
    subband: str = "LL"

    def __post_init__(self):
        if self.family != "haar":
            raise ValueError(f"unsupported wavelet family {self.family!r}")
        if not 1 <= self.level <= 4:
            raise ValueError(f"level must be in [1, 4], got {self.level}")
        if self.domain not in DOMAINS:
            raise ValueError(f"domain must be one of {DOMAINS}, got {self.domain!r}")
        if self.domain == "dwt":
            _parse_subband(self.subband, self.level)

    @property
    def divisor(self) -> int:
        return 2**self.level if self.domain == "dwt" else 1

    def label(self) -> str:
        if self.domain == "dwt":
            name = self.subband if self.subband != "LL" else f"LL_{self.level}"
            return f"dwt{self.level}:{name}"
        return self.domain


@dataclass
class WaveletPyramid:
    ll: torch.Tensor
    details: dict[int, dict[str, torch.Tensor]] = field(default_factory=dict)
    spec: TransformSpec = field(default_factory=TransformSpec)

    @property
    def level(self) -> int:
        return len(self.details)

    def num_coefficients(self) -> int:
        n = self.ll.numel()
        for bands in self.details.values():
            n += sum(b.numel() for b in bands.values())
        return n


def _as_tensor(image) -> torch.Tensor:
    if isinstance(image, np.ndarray):
        return torch.from_numpy(image)
    return image


def _haar_step(x: torch.Tensor):
    # x: (..., H, W, C)
    a = x[..., 0::2, 0::2, :]
    b = x[..., 0::2, 1::2, :]
    c = x[..., 1::2, 0::2, :]
    d = x[..., 1::2, 1::2, :]
    ll = (a + b + c + d) / 2
    lh = (a + b - c - d) / 2
    hl = (a - b + c - d) / 2
    hh = (a - b - c + d) / 2
    return ll, lh, hl, hh


def _haar_step_inverse(ll, lh, hl, hh) -> torch.Tensor:
    a = (ll + lh + hl + hh) / 2
    b = (ll + lh - hl - hh) / 2
    c = (ll - lh + hl - hh) / 2
    d = (ll - lh - hl + hh) / 2
    *lead, h, w, ch = ll.shape
    out = ll.new_empty(*lead, 2 * h, 2 * w, ch)
    out[..., 0::2, 0::2, :] = a
    out[..., 0::2, 1::2, :] = b
    out[..., 1::2, 0::2, :] = c
    out[..., 1::2, 1::2, :] = d
    return out


def dwt2(image, spec: TransformSpec | int = 2) -> WaveletPyramid:
    """Recursive orthonormal Haar analysis of the LL band, ``level`` times."""
    if isinstance(spec, int):
        spec = TransformSpec(level=spec)
    x = _as_tensor(image)
    h, w = x.shape[-3], x.shape[-2]
    k = 2**spec.level
    if h % k or w % k:
        raise ValueError(f"image {h}x{w} is not divisible by 2^{spec.level}={k}")
    details = {}
    ll = x
    for j in range(1, spec.level + 1):
        ll, lh, hl, hh = _haar_step(ll)
        details[j] = {"lh": lh, "hl": hl, "hh": hh}
    return WaveletPyramid(ll=ll, details=details, spec=spec)


def idwt2(pyramid: WaveletPyramid) -> torch.Tensor:
    ll = pyramid.ll
    for j in range(pyramid.level, 0, -1):
        bands = pyramid.details[j]
        for name in ("lh", "hl", "hh"):
            if bands[name].shape != ll.shape:
                raise ValueError(
                    f"level {j} {name} has shape {tuple(bands[name].shape)}, "
                    f"expected {tuple(ll.shape)}"
                )
        ll = _haar_step_inverse(ll, bands["lh"], bands["hl"], bands["hh"])
    return ll


def _parse_subband(name: str, level: int) -> tuple[str, int]:
    if name == "LL":
        return "ll", level
    try:
        kind, lvl = name.split("_")
        lvl = int(lvl)
    except ValueError:
        raise ValueError(f"unknown subband {name!r}") from None
    if kind not in ("LH", "HL", "HH"):
        raise ValueError(f"unknown subband {name!r}")
    if not 1 <= lvl <= level:
        raise ValueError(f"subband {name!r} needs level {lvl} but pyramid has {level}")
    return kind.lower(), lvl


def select_subband(pyramid: WaveletPyramid, name: str) -> torch.Tensor:
    kind, lvl = _parse_subband(name, pyramid.level)
    if kind == "ll":
        ll = pyramid.ll
        if pyramid.spec.normalize_ll:
            ll = ll / 2**pyramid.level
        return ll
    return pyramid.details[lvl][kind]


def dct_matrix(n: int, dtype=torch.float64) -> torch.Tensor:
    """Orthonormal type-II DCT matrix, rows are frequencies."""
    k = torch.arange(n, dtype=dtype)[:, None]
    i = torch.arange(n, dtype=dtype)[None, :]
    m = torch.cos(math.pi * (2 * i + 1) * k / (2 * n)) * math.sqrt(2.0 / n)
    m[0] /= math.sqrt(2.0)
    return m


def dct2(image) -> torch.Tensor:
    x = _as_tensor(image)
    h, w = x.shape[-3], x.shape[-2]
    ch = dct_matrix(h, x.dtype).to(x.device)
    cw = dct_matrix(w, x.dtype).to(x.device)
    return torch.einsum("ij,...jkc,lk->...ilc", ch, x, cw)


def idct2(coeffs) -> torch.Tensor:
    x = _as_tensor(coeffs)
    h, w = x.shape[-3], x.shape[-2]
    ch = dct_matrix(h, x.dtype).to(x.device)
    cw = dct_matrix(w, x.dtype).to(x.device)
    return torch.einsum("ji,...jkc,kl->...ilc", ch, x, cw)


def dft2(image) -> torch.Tensor:
    x = _as_tensor(image)
    return torch.fft.fft2(x, dim=(-3, -2), norm="ortho")


def idft2(coeffs) -> torch.Tensor:
    return torch.fft.ifft2(_as_tensor(coeffs), dim=(-3, -2), norm="ortho")


def decoder_view(image: torch.Tensor, spec: TransformSpec) -> torch.Tensor:
    """Map a channel-last image to the real array the decoder consumes."""
    if spec.domain == "none":
        return image
    if spec.domain == "dct":
        return dct2(image)
    if spec.domain == "dft":
        return dft2(image).abs()
    return select_subband(dwt2(image, spec), spec.subband)
