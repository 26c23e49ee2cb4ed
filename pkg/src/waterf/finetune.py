"""Embed a fixed message into a radiance field with deferred back-propagation.

Per view:

1. render the full image with autograd off, evaluate the full-image loss
   (perceptual + message) on it and cache dL/dX for every pixel;
2. re-render patch by patch with autograd on and push the cached pixel
   gradients (plus the gradient of the patch loss) into the field
   parameters; step the optimizer once.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import torch

from .codec import Decoder, bit_accuracy, bits_to_str, decode
from .field import SamplingConfig, render_image_nograd, render_patch_grad, save_field
from .losses import LossWeights, MultiScaleSSIMDistance, full_loss, patch_loss, ssim
from .metrics import psnr
from .scene import ViewSample
from .wavelet import TransformSpec, decoder_view

log = logging.getLogger(__name__)


@dataclass
class FinetuneConfig:
    message: list
    transform: TransformSpec = field(default_factory=TransformSpec)
    weights: LossWeights = field(default_factory=LossWeights)
    epochs: int = 8
    lr: float | None = None
    patch_size: int = 64
    seed: int = 0
    psnr_floor: float = 26.0
    gt_source: str = "dataset"
    decoder_path: str | None = None
    chunk_rows: int = 16

    def __post_init__(self):
        self.message = [int(b) for b in self.message]
        if not self.message or set(self.message) - {0, 1}:
            raise ValueError("message must be a non-empty list of 0/1 bits")
        if not 5 <= self.epochs <= 10:
            raise ValueError(f"epochs must be in [5, 10], got {self.epochs}")
        if self.patch_size < 1:
            raise ValueError("patch_size must be positive")
        if self.gt_source not in ("dataset", "prewatermark"):
            raise ValueError(f"gt_source must be 'dataset' or 'prewatermark', got {self.gt_source!r}")

    def learning_rate(self, field) -> float:
        if self.lr is not None:
            return self.lr
        return 5e-4 if field.kind == "implicit" else 1e-3

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, data: dict) -> "FinetuneConfig":
        data = dict(data)
        if "transform" in data:
            data["transform"] = TransformSpec(**data["transform"])
        if "weights" in data:
            data["weights"] = LossWeights(**data["weights"])
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown finetune fields: {sorted(unknown)}")
        return cls(**data)


class StaleCacheError(RuntimeError):
    pass


def _param_version(field) -> tuple:
    return (id(field),) + tuple(p._version for p in field.parameters())


@dataclass
class GradientCache:
    grads: torch.Tensor  # dL_full / dX, (H, W, 3)
    version: tuple
    loss: float

    def patch(self, rect) -> torch.Tensor:
        y0, x0, h, w = rect
        return self.grads[y0 : y0 + h, x0 : x0 + w]


def patch_grid(height: int, width: int, patch_size: int) -> list[tuple[int, int, int, int]]:
    ph, pw = min(patch_size, height), min(patch_size, width)
    if height % ph or width % pw:
        raise ValueError(f"patch size {patch_size} does not tile a {height}x{width} image")
    return [(y, x, ph, pw) for y in range(0, height, ph) for x in range(0, width, pw)]


def extract_message(image, decoder: Decoder, transform: TransformSpec) -> torch.Tensor:
    """Decoder logits from the chosen frequency view (LL of the level-2 DWT by default)."""
    return decode(decoder, decoder_view(torch.as_tensor(image), transform))


def _frozen(decoder: Decoder) -> Decoder:
    decoder.eval()
    for p in decoder.parameters():
        p.requires_grad_(False)
    return decoder


def cache_full_grads(field, camera, x0, message, decoder, config: FinetuneConfig, sampling: SamplingConfig,
                     weights: LossWeights | None = None, perceptual=None):
    """Render without autograd, evaluate the full-image loss and cache dL/dX.

    Returns ``(X, cache, logits)``; ``cache.loss`` holds the loss value.
    """
    weights = weights or config.weights
    x = render_image_nograd(field, camera, sampling, chunk_rows=config.chunk_rows)
    version = _param_version(field)
    leaf = x.detach().clone().requires_grad_(True)
    with torch.enable_grad():
        logits = extract_message(leaf, decoder, config.transform)
        loss = full_loss(weights, torch.as_tensor(x0).to(leaf.dtype), leaf, logits, message, perceptual)
        if loss.requires_grad:
            (grad,) = torch.autograd.grad(loss, leaf)
        else:
            grad = torch.zeros_like(leaf)
    if not torch.isfinite(grad).all():
        raise FloatingPointError(f"non-finite full-image gradients (loss={loss.item()})")
    return x, GradientCache(grad.detach(), version, loss.item()), logits.detach()


def accumulate_deferred_grads(field, camera, cache: GradientCache, gt, config: FinetuneConfig,
                              sampling: SamplingConfig, weights: LossWeights | None = None,
                              on_patch=None):
    """Patch-wise re-render with autograd; adds cached pixel grads and patch-loss grads to ``.grad``."""
    weights = weights or config.weights
    if _param_version(field) != cache.version:
        raise StaleCacheError("field parameters changed since the gradient cache was computed")
    use_patch_loss = any((weights.lambda_mae, weights.lambda_tv, weights.lambda_ssim))
    gt = torch.as_tensor(gt)
    total = 0.0
    for rect in patch_grid(camera.height, camera.width, config.patch_size):
        pix = render_patch_grad(field, camera, sampling, rect)
        obj = (pix * cache.patch(rect).to(pix.dtype)).sum()
        if use_patch_loss:
            y0, x0, h, w = rect
            pl = patch_loss(weights, pix, gt[y0 : y0 + h, x0 : x0 + w].to(pix.dtype))
            obj = obj + pl
            total += pl.item()
        if obj.requires_grad:
            obj.backward()
        if on_patch is not None:
            on_patch(rect)
        del pix, obj
    return total


def deferred_step(field, optimizer, camera, cache: GradientCache, gt, config: FinetuneConfig,
                  sampling: SamplingConfig, weights: LossWeights | None = None) -> float:
    optimizer.zero_grad(set_to_none=False)
    total = accumulate_deferred_grads(field, camera, cache, gt, config, sampling, weights)
    optimizer.step()
    return total


@torch.no_grad()
def evaluate_views(field, views, decoder, transform, message, sampling, references=None, chunk_rows=16):
    """Per-view bit accuracy, and PSNR/SSIM against ``references`` when given."""
    rows = []
    for i, v in enumerate(views):
        x = render_image_nograd(field, v.camera, sampling, chunk_rows=chunk_rows)
        logits = extract_message(x, decoder, transform)
        row = {"view": i, "bit_accuracy": bit_accuracy(logits, message),
               "bits": bits_to_str((torch.sigmoid(logits) > 0.5).int())}
        if references is not None:
            ref = torch.as_tensor(references[i]).to(x.dtype)
            row["psnr"] = psnr(x, ref)
            row["ssim"] = float(ssim(x.clamp(0, 1), ref))
        rows.append(row)
    return rows


def _mean(rows, key):
    return float(np.mean([r[key] for r in rows])) if rows else float("nan")


def finetune(field, views: list[ViewSample], decoder: Decoder, config: FinetuneConfig,
             sampling: SamplingConfig, heldout: list[ViewSample] | None = None,
             run_dir: str | None = None, progress=None, perceptual=None):
    """Fine-tune ``field`` in place so every render carries ``config.message``.

    Returns ``(field, history)`` where history has one record per epoch.
    """
    if decoder.msg_len != len(config.message):
        raise ValueError(f"decoder decodes {decoder.msg_len} bits but message has {len(config.message)}")
    decoder = _frozen(decoder)
    perceptual = perceptual or MultiScaleSSIMDistance()
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    message = np.asarray(config.message)
    dtype = next(field.parameters()).dtype

    x0 = [render_image_nograd(field, v.camera, sampling, chunk_rows=config.chunk_rows) for v in views]
    x0_held = [render_image_nograd(field, v.camera, sampling, chunk_rows=config.chunk_rows) for v in heldout or []]
    gts = [x0[i] if config.gt_source == "prewatermark" else torch.as_tensor(v.image).to(dtype)
           for i, v in enumerate(views)]
    optimizer = torch.optim.Adam([p for p in field.parameters() if p.requires_grad], lr=config.learning_rate(field))

    if run_dir is not None:
        os.makedirs(os.path.join(run_dir, "checkpoints"), exist_ok=True)
        with open(os.path.join(run_dir, "config.json"), "w") as f:
            json.dump(config.to_json(), f, indent=2, sort_keys=True)

    history = []
    for epoch in range(config.epochs):
        weights = config.weights
        events = []
        step_rows = []
        for i in rng.permutation(len(views)):
            cam = views[i].camera
            x, cache, logits = cache_full_grads(field, cam, x0[i], message, decoder, config, sampling,
                                                weights, perceptual)
            p = psnr(x, x0[i])
            if p < config.psnr_floor and weights.lambda_m > 0:
                weights = replace(weights, lambda_m=weights.lambda_m / 2)
                events.append({"view": int(i), "psnr": p, "lambda_m": weights.lambda_m})
                log.info("epoch %d view %d: PSNR %.2f below floor, lambda_m -> %g", epoch, i, p, weights.lambda_m)
                x, cache, logits = cache_full_grads(field, cam, x0[i], message, decoder, config, sampling,
                                                    weights, perceptual)
            pl = deferred_step(field, optimizer, cam, cache, gts[i], config, sampling, weights)
            step_rows.append({"bit_accuracy": bit_accuracy(logits, message), "psnr": p,
                              "full_loss": cache.loss, "patch_loss": pl})
        rec = {
            "epoch": epoch,
            "train_bit_accuracy": _mean(step_rows, "bit_accuracy"),
            "train_psnr": _mean(step_rows, "psnr"),
            "full_loss": _mean(step_rows, "full_loss"),
            "patch_loss": _mean(step_rows, "patch_loss"),
            "divergence_events": events,
        }
        if heldout:
            rows = evaluate_views(field, heldout, decoder, config.transform, message, sampling, x0_held,
                                  config.chunk_rows)
            rec["heldout_bit_accuracy"] = _mean(rows, "bit_accuracy")
            rec["heldout_psnr"] = _mean(rows, "psnr")
        history.append(rec)
        if progress is not None:
            progress(rec)
        if run_dir is not None:
            with open(os.path.join(run_dir, "metrics.jsonl"), "a") as f:
                f.write(json.dumps(rec) + "\n")
            save_field(field, os.path.join(run_dir, "checkpoints", f"epoch_{epoch}"),
                       {"epoch": epoch, "message": bits_to_str(message)})
    return field, history
