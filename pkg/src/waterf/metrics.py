from __future__ import annotations

import math

import torch

PSNR_CAP_DB = 99.0


def psnr(a, b) -> float:
    """10 log10(1 / MSE) for [0, 1] images, capped at 99 dB."""
    a = torch.as_tensor(a).detach().to(torch.float64)
    b = torch.as_tensor(b).detach().to(torch.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    mse = float(((a - b) ** 2).mean())
    if mse <= 10 ** (-PSNR_CAP_DB / 10):
        return PSNR_CAP_DB
    return 10 * math.log10(1.0 / mse)
