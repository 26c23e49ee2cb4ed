"""Image losses for fine-tuning: SSIM, TV, MAE, perceptual distance, full/patch composites.

All functions take channel-last images, (H, W, C) or (B, H, W, C).
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .codec import message_loss

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


@dataclass(frozen=True)
class LossWeights:
    lambda_i: float = 0.05
    lambda_m: float = 0.95
    lambda_mae: float = 0.1
    lambda_tv: float = 0.06
    lambda_ssim: float = 0.02

    def __post_init__(self):
        for name, v in self.__dict__.items():
            if v < 0:
                raise ValueError(f"{name} must be >= 0, got {v}")

    @classmethod
    def preset(cls, dataset: str, **overrides) -> "LossWeights":
        full = {"blender": (0.05, 0.95), "llff": (0.1, 0.9)}
        if dataset not in full:
            raise ValueError(f"unknown preset {dataset!r}; choose from {sorted(full)}")
        li, lm = full[dataset]
        return cls(**{"lambda_i": li, "lambda_m": lm, **overrides})


def _bchw(x: torch.Tensor) -> torch.Tensor:
    x = torch.as_tensor(x)
    if x.dim() == 3:
        x = x[None]
    return x.permute(0, 3, 1, 2)


def _check_same(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA, dtype=torch.float64) -> torch.Tensor:
    r = torch.arange(size, dtype=dtype) - (size - 1) / 2
    g = torch.exp(-(r**2) / (2 * sigma**2))
    g = g / g.sum()
    return g[:, None] * g[None, :]


def ssim(a, b) -> torch.Tensor:
    """Mean SSIM over valid 11x11 Gaussian windows and channels, for [0, 1] images."""
    a, b = torch.as_tensor(a), torch.as_tensor(b)
    _check_same(a, b)
    x, y = _bchw(a), _bchw(b)
    if min(x.shape[-2:]) < SSIM_WINDOW:
        raise ValueError(f"image {tuple(x.shape[-2:])} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    c = x.shape[1]
    w = gaussian_window(dtype=x.dtype).to(x.device).expand(c, 1, SSIM_WINDOW, SSIM_WINDOW)

    def filt(z):
        return F.conv2d(z, w, groups=c)

    mx, my = filt(x), filt(y)
    sxx = filt(x * x) - mx * mx
    syy = filt(y * y) - my * my
    sxy = filt(x * y) - mx * my
    num = (2 * mx * my + SSIM_C1) * (2 * sxy + SSIM_C2)
    den = (mx * mx + my * my + SSIM_C1) * (sxx + syy + SSIM_C2)
    return (num / den).mean()


def total_variation(image) -> torch.Tensor:
    """Sum of absolute forward differences along x and y, divided by the pixel count (H*W*C)."""
    x = torch.as_tensor(image)
    dy = (x[..., 1:, :, :] - x[..., :-1, :, :]).abs().sum()
    dx = (x[..., :, 1:, :] - x[..., :, :-1, :]).abs().sum()
    return (dx + dy) / x.numel()


def mae(a, b) -> torch.Tensor:
    a, b = torch.as_tensor(a), torch.as_tensor(b)
    _check_same(a, b)
    return (a - b).abs().mean()


class MultiScaleSSIMDistance:
    """Mean of (1 - SSIM) over a 2x average-pooled pyramid, down to the SSIM window size."""

    name = "ms-ssim"

    def __init__(self, max_scales: int = 4):
        self.max_scales = max_scales

    def __call__(self, x0, x) -> torch.Tensor:
        a, b = torch.as_tensor(x0), torch.as_tensor(x)
        terms = []
        for _ in range(self.max_scales):
            if min(a.shape[-3], a.shape[-2]) < SSIM_WINDOW:
                break
            terms.append(1 - ssim(a, b))
            a = F.avg_pool2d(_bchw(a), 2).permute(0, 2, 3, 1)
            b = F.avg_pool2d(_bchw(b), 2).permute(0, 2, 3, 1)
        if not terms:
            raise ValueError(f"image {tuple(x0.shape)} too small for the perceptual distance")
        return torch.stack(terms).mean()


class DeepFeatureDistance:
    """Weighted squared distance between unit-normalized feature maps of a frozen extractor.

    ``extractor(x)`` takes a (B, 3, H, W) batch and returns a list of feature maps.
    """

    name = "deep-feature"

    def __init__(self, extractor, layer_weights=None):
        self.extractor = extractor
        self.layer_weights = layer_weights

    def __call__(self, x0, x) -> torch.Tensor:
        fa = self.extractor(_bchw(torch.as_tensor(x0)))
        fb = self.extractor(_bchw(torch.as_tensor(x)))
        weights = self.layer_weights or [1.0] * len(fa)
        total = 0.0
        for w, a, b in zip(weights, fa, fb):
            a = a / (a.norm(dim=1, keepdim=True) + 1e-10)
            b = b / (b.norm(dim=1, keepdim=True) + 1e-10)
            total = total + w * ((a - b) ** 2).sum(1).mean()
        return total


def vgg_feature_distance(layers=(3, 8, 15, 22)):
    """Deep-feature plugin on torchvision VGG16; needs pretrained weights available locally."""
    from torchvision.models import VGG16_Weights, vgg16

    net = vgg16(weights=VGG16_Weights.DEFAULT).features.eval()
    for p in net.parameters():
        p.requires_grad_(False)
    mean = torch.tensor([0.485, 0.456, 0.406])[:, None, None]
    std = torch.tensor([0.229, 0.224, 0.225])[:, None, None]

    def extract(x):
        x = (x.float() - mean) / std
        feats = []
        for i, layer in enumerate(net):
            x = layer(x)
            if i in layers:
                feats.append(x)
            if i >= max(layers):
                break
        return feats

    return DeepFeatureDistance(extract)


DEFAULT_PERCEPTUAL = MultiScaleSSIMDistance()


def perceptual_loss(model, x0, x) -> torch.Tensor:
    x0, x = torch.as_tensor(x0), torch.as_tensor(x)
    _check_same(x0, x)
    return (model or DEFAULT_PERCEPTUAL)(x0, x)


def full_loss(weights: LossWeights, x0, x, logits, message, model=None) -> torch.Tensor:
    """lambda_i * perceptual(x0, x) + lambda_m * BCE(message, logits)."""
    total = weights.lambda_m * message_loss(logits, message)
    if weights.lambda_i:
        total = total + weights.lambda_i * perceptual_loss(model, x0, x)
    return total


def patch_loss(weights: LossWeights, rendered, gt) -> torch.Tensor:
    """lambda_MAE * MAE + lambda_TV * TV(rendered) + lambda_SSIM * (1 - SSIM)."""
    rendered, gt = torch.as_tensor(rendered), torch.as_tensor(gt).to(torch.as_tensor(rendered).dtype)
    _check_same(rendered, gt)
    if min(rendered.shape[-3], rendered.shape[-2]) < SSIM_WINDOW:
        raise ValueError(f"patch {tuple(rendered.shape[-3:-1])} is smaller than the SSIM window")
    return (weights.lambda_mae * mae(rendered, gt)
            + weights.lambda_tv * total_variation(rendered)
            + weights.lambda_ssim * (1 - ssim(rendered, gt)))
