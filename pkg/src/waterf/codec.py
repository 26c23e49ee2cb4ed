"""HiDDeN-style watermark encoder/decoder, noise layer, BCE message loss and whitening.

The encoder only exists to pre-train the decoder; fine-tuning a radiance
field uses the decoder alone.
"""

from __future__ import annotations

import copy
import io
import logging
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from torch import nn

from .checkpoint import arrays_to_state, load_archive, save_archive, state_to_arrays

log = logging.getLogger(__name__)

MESSAGE_LENGTHS = (4, 8, 16, 32, 48)
MIN_DECODER_SIZE = 8


class ConvBNRelu(nn.Module):
    def __init__(self, channels_in, channels_out):
        super().__init__()
        self.layers = nn.Sequential(
            nn.Conv2d(channels_in, channels_out, 3, stride=1, padding=1),
            nn.BatchNorm2d(channels_out),
            nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return self.layers(x)


class Encoder(nn.Module):
    """Residual message embedder. The last conv is zero-initialized, so a fresh
    encoder returns the cover unchanged.

    With ``message_grid > 0`` the message goes through a linear map to a coarse
    ``message_channels x grid x grid`` tensor that is upsampled to the image size
    before concatenation; ``message_grid = 0`` broadcasts the raw ±1 bits to every
    pixel instead. The spatial map trains several times faster at small sizes.
    """

    def __init__(self, msg_len: int, channels: int = 64, message_grid: int = 8, message_channels: int = 4):
        super().__init__()
        self.msg_len = msg_len
        self.message_grid = message_grid
        self.message_channels = message_channels if message_grid else msg_len
        self.features = nn.Sequential(
            ConvBNRelu(3, channels), ConvBNRelu(channels, channels), ConvBNRelu(channels, channels)
        )
        if message_grid:
            self.message_map = nn.Linear(msg_len, self.message_channels * message_grid**2)
        self.after_concat = ConvBNRelu(channels + self.message_channels + 3, channels)
        self.final = nn.Conv2d(channels, 3, kernel_size=1)
        nn.init.zeros_(self.final.weight)
        nn.init.zeros_(self.final.bias)

    def _message_planes(self, message, h, w):
        b = message.shape[0]
        m = message.to(self.final.weight.dtype) * 2 - 1
        if not self.message_grid:
            return m[:, :, None, None].expand(b, self.msg_len, h, w)
        g = self.message_grid
        grid = self.message_map(m).view(b, self.message_channels, g, g)
        return F.interpolate(grid, size=(h, w), mode="bilinear", align_corners=False)

    def forward(self, image, message):
        # image: (B, 3, H, W), message: (B, L) in {0, 1}
        h, w = image.shape[-2:]
        x = torch.cat([self.features(image), self._message_planes(message, h, w), image], dim=1)
        return (image + self.final(self.after_concat(x))).clamp(0, 1)


class Decoder(nn.Module):
    def __init__(self, msg_len: int, channels: int = 64, blocks: int = 7):
        super().__init__()
        self.msg_len = msg_len
        layers = [ConvBNRelu(3, channels)]
        layers += [ConvBNRelu(channels, channels) for _ in range(blocks - 1)]
        self.layers = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.linear = nn.Linear(channels, msg_len)
        self.whitened = False

    def forward(self, x):
        return self.linear(self.pool(self.layers(x)).flatten(1))


@dataclass
class NoiseLayerConfig:
    crop_keep_ratios: tuple = (0.3, 0.7)
    scale_factors: tuple = (0.3, 0.7)
    jpeg_qualities: tuple = (50, 80)
    identity_probability: float = 0.25

    def choices(self) -> list[tuple[str, float]]:
        return ([("crop", r) for r in self.crop_keep_ratios]
                + [("scale", s) for s in self.scale_factors]
                + [("jpeg", q) for q in self.jpeg_qualities])


def _to_bchw(image: torch.Tensor) -> tuple[torch.Tensor, bool]:
    if image.dim() == 3:
        return image.permute(2, 0, 1)[None], True
    return image.permute(0, 3, 1, 2), False


def _from_bchw(x: torch.Tensor, single: bool) -> torch.Tensor:
    x = x.permute(0, 2, 3, 1)
    return x[0] if single else x


def _as_message(message, length: int | None = None, dtype=torch.float32) -> torch.Tensor:
    m = torch.as_tensor(np.asarray(message), dtype=dtype)
    if length is not None and m.shape[-1] != length:
        raise ValueError(f"message has {m.shape[-1]} bits, expected {length}")
    return m


def jpeg_roundtrip(image: np.ndarray, quality: int) -> np.ndarray:
    """Real JPEG encode/decode of an (H, W, 3) image in [0, 1]."""
    buf = io.BytesIO()
    Image.fromarray(np.round(np.clip(image, 0, 1) * 255).astype(np.uint8)).save(
        buf, format="JPEG", quality=int(quality)
    )
    buf.seek(0)
    return np.asarray(Image.open(buf).convert("RGB"), dtype=np.float64) / 255.0


def _jpeg_straight_through(x: torch.Tensor, quality: int) -> torch.Tensor:
    # forward: codec round-trip, backward: identity
    with torch.no_grad():
        arr = x.detach().permute(0, 2, 3, 1).cpu().double().numpy()
        out = np.stack([jpeg_roundtrip(a, quality) for a in arr])
        y = torch.from_numpy(out).to(x.dtype).permute(0, 3, 1, 2)
    return x + (y - x).detach()


def apply_noise(x: torch.Tensor, kind: str, param: float, rng: np.random.Generator) -> torch.Tensor:
    """One distortion on a (B, 3, H, W) batch."""
    h, w = x.shape[-2:]
    if kind == "identity":
        return x
    if kind == "crop":
        ch = max(MIN_DECODER_SIZE, int(round(h * param)))
        cw = max(MIN_DECODER_SIZE, int(round(w * param)))
        y0 = int(rng.integers(0, h - ch + 1))
        x0 = int(rng.integers(0, w - cw + 1))
        return x[..., y0 : y0 + ch, x0 : x0 + cw]
    if kind == "scale":
        size = (max(MIN_DECODER_SIZE, int(round(h * param))), max(MIN_DECODER_SIZE, int(round(w * param))))
        return F.interpolate(x, size=size, mode="bilinear", align_corners=False, antialias=True)
    if kind == "jpeg":
        return _jpeg_straight_through(x, int(param))
    raise ValueError(f"unknown noise kind {kind!r}")


def sample_noise(cfg: NoiseLayerConfig, rng: np.random.Generator) -> tuple[str, float]:
    if rng.random() < cfg.identity_probability:
        return "identity", 0.0
    choices = cfg.choices()
    return choices[int(rng.integers(len(choices)))]


def distort(image, cfg: NoiseLayerConfig, rng: np.random.Generator):
    """Sample one distortion (possibly identity) and apply it to an (H, W, 3) or (B, H, W, 3) image."""
    x, single = _to_bchw(torch.as_tensor(image))
    return _from_bchw(apply_noise(x, *sample_noise(cfg, rng), rng), single)


def encode(encoder: Encoder, cover, message) -> torch.Tensor:
    cover = torch.as_tensor(cover)
    m = _as_message(message, encoder.msg_len, cover.dtype)
    x, single = _to_bchw(cover)
    if m.dim() == 1:
        m = m.expand(x.shape[0], -1)
    return _from_bchw(encoder(x, m), single)


def decode(decoder: Decoder, image) -> torch.Tensor:
    """Logits for an (H, W, 3) image or (B, H, W, 3) batch."""
    image = torch.as_tensor(image)
    h, w = image.shape[-3], image.shape[-2]
    if h < MIN_DECODER_SIZE or w < MIN_DECODER_SIZE:
        raise ValueError(f"decoder input {h}x{w} is smaller than {MIN_DECODER_SIZE}x{MIN_DECODER_SIZE}")
    image = image.to(decoder.linear.weight.dtype)
    x, single = _to_bchw(image)
    logits = decoder(x)
    return logits[0] if single else logits


def message_loss(logits, message) -> torch.Tensor:
    """Binary cross-entropy summed over bits (mean over any leading batch dims)."""
    logits = torch.as_tensor(logits)
    m = _as_message(message, dtype=logits.dtype)
    if m.shape[-1] != logits.shape[-1]:
        raise ValueError(f"message length {m.shape[-1]} != logits length {logits.shape[-1]}")
    m = m.expand_as(logits)
    per_bit = F.binary_cross_entropy_with_logits(logits, m, reduction="none")
    return per_bit.sum(-1).mean()


def bit_accuracy(logits, message) -> float:
    logits = torch.as_tensor(logits).detach()
    m = _as_message(message, dtype=logits.dtype)
    if m.shape[-1] != logits.shape[-1]:
        raise ValueError(f"message length {m.shape[-1]} != logits length {logits.shape[-1]}")
    pred = (torch.sigmoid(logits) > 0.5).to(m.dtype)
    return float((pred == m.expand_as(pred)).to(torch.float64).mean())


def random_message(length: int, rng: np.random.Generator) -> np.ndarray:
    return rng.integers(0, 2, size=length).astype(np.int64)


def bits_to_str(bits) -> str:
    return "".join(str(int(b)) for b in np.asarray(bits).reshape(-1))


def str_to_bits(s: str) -> np.ndarray:
    if not s or set(s) - {"0", "1"}:
        raise ValueError(f"not a bit string: {s!r}")
    return np.array([int(c) for c in s], dtype=np.int64)


# --- phase-1 training ---------------------------------------------------------

@dataclass
class DecoderTrainConfig:
    msg_len: int = 16
    epochs: int = 100
    batch_size: int = 32
    lr: float = 1e-3
    image_size: int = 16
    channels: int = 64
    message_grid: int = 8
    noise: NoiseLayerConfig = field(default_factory=NoiseLayerConfig)
    seed: int = 0
    min_corpus: int = 1000

    def to_json(self) -> dict:
        return asdict(self)


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    for i in range(0, n - batch_size + 1, batch_size):
        yield perm[i : i + batch_size]


def train_decoder(corpus: np.ndarray, cfg: DecoderTrainConfig, progress=None):
    """Jointly train encoder and decoder on the message loss alone.

    ``corpus`` is an (N, H, W, 3) float array in [0, 1] with H = W = cfg.image_size.
    Returns ``(encoder, decoder, history)``; history holds per-epoch mean loss
    and bit accuracy on the distorted training batches.
    """
    if len(corpus) == 0:
        raise ValueError("empty corpus")
    if len(corpus) < cfg.min_corpus:
        raise ValueError(f"corpus has {len(corpus)} images, need at least {cfg.min_corpus}")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    encoder = Encoder(cfg.msg_len, cfg.channels, cfg.message_grid)
    decoder = Decoder(cfg.msg_len, cfg.channels)
    params = list(encoder.parameters()) + list(decoder.parameters())
    opt = torch.optim.Adam(params, lr=cfg.lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=cfg.epochs)
    data = torch.from_numpy(np.asarray(corpus, dtype=np.float32)).permute(0, 3, 1, 2)
    history = []
    for epoch in range(cfg.epochs):
        encoder.train()
        decoder.train()
        losses, accs = [], []
        for idx in _batches(len(data), cfg.batch_size, rng):
            cover = data[idx]
            if rng.random() < 0.5:
                cover = cover.flip(-1)
            msg = torch.from_numpy(rng.integers(0, 2, size=(len(idx), cfg.msg_len))).float()
            watermarked = encoder(cover, msg)
            noised = apply_noise(watermarked, *sample_noise(cfg.noise, rng), rng)
            logits = decoder(noised)
            loss = message_loss(logits, msg)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
            accs.append(bit_accuracy(logits, msg))
        sched.step()
        rec = {"epoch": epoch, "loss": float(np.mean(losses)), "bit_accuracy": float(np.mean(accs))}
        history.append(rec)
        if progress is not None:
            progress(rec)
    encoder.eval()
    decoder.eval()
    return encoder, decoder, history


def adapt_decoder(encoder: Encoder, decoder: Decoder, covers: np.ndarray, view=None, epochs: int = 3,
                  lr: float = 3e-4, batch_size: int = 32, seed: int = 0, progress=None) -> Decoder:
    """Fine-tune a copy of ``decoder`` on ``view(encode(I, M))`` with the encoder frozen.

    ``view`` maps a channel-first batch to the decoder's input (e.g. a normalized
    LL subband); ``covers`` is (N, H, W, 3) in [0, 1].
    """
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    view = view or (lambda x: x)
    encoder = copy.deepcopy(encoder).eval().requires_grad_(False)
    out = copy.deepcopy(decoder)
    opt = torch.optim.Adam(out.parameters(), lr=lr)
    data = torch.from_numpy(np.asarray(covers, dtype=np.float32)).permute(0, 3, 1, 2)
    for epoch in range(epochs):
        out.train()
        accs = []
        for idx in _batches(len(data), batch_size, rng):
            msg = torch.from_numpy(rng.integers(0, 2, size=(len(idx), decoder.msg_len))).float()
            logits = out(view(encoder(data[idx], msg)))
            loss = message_loss(logits, msg)
            opt.zero_grad()
            loss.backward()
            opt.step()
            accs.append(bit_accuracy(logits, msg))
        if progress is not None:
            progress({"epoch": epoch, "bit_accuracy": float(np.mean(accs))})
    out.eval()
    out.whitened = False
    return out


@torch.no_grad()
def evaluate_codec(encoder, decoder, images: np.ndarray, noise: NoiseLayerConfig | None, seed: int = 0,
                   batch_size: int = 64) -> float:
    """Held-out bit accuracy of decode(distort(encode(I, M))) with random messages."""
    rng = np.random.default_rng(seed)
    encoder.eval()
    decoder.eval()
    accs, counts = [], []
    data = torch.from_numpy(np.asarray(images, dtype=np.float32)).permute(0, 3, 1, 2)
    for i in range(0, len(data), batch_size):
        cover = data[i : i + batch_size]
        msg = torch.from_numpy(rng.integers(0, 2, size=(len(cover), encoder.msg_len))).float()
        x = encoder(cover, msg)
        if noise is not None:
            x = apply_noise(x, *sample_noise(noise, rng), rng)
        accs.append(bit_accuracy(decoder(x), msg))
        counts.append(len(cover))
    return float(np.average(accs, weights=counts))


# --- whitening ----------------------------------------------------------------

@torch.no_grad()
def decoder_logits(decoder: Decoder, images, batch_size: int = 256, dtype=torch.float64) -> torch.Tensor:
    d = copy.deepcopy(decoder).to(dtype).eval()
    images = torch.as_tensor(np.asarray(images)).to(dtype)
    out = [decode(d, images[i : i + batch_size]) for i in range(0, len(images), batch_size)]
    return torch.cat(out)


def fit_whitening(decoder: Decoder, calibration, eps: float = 1e-6, min_images: int = 1000) -> Decoder:
    """Fold z -> Sigma^{-1/2} (z - mu) into the decoder's final linear layer.

    ``calibration`` is an (N, H, W, 3) batch of unwatermarked decoder inputs;
    mu and Sigma are the mean and covariance of the decoder's logits on it.
    The symmetric inverse square root keeps each output aligned with its bit.
    """
    if len(calibration) < min_images:
        raise ValueError(f"calibration set has {len(calibration)} images, need at least {min_images}")
    z = decoder_logits(decoder, calibration)
    mu = z.mean(0)
    zc = z - mu
    cov = zc.T @ zc / z.shape[0]
    evals, evecs = torch.linalg.eigh(cov)
    if evals.min() <= eps:
        warnings.warn(f"near-singular logit covariance (min eigenvalue {float(evals.min()):.3g}); "
                      f"regularizing with {eps}*I", RuntimeWarning, stacklevel=2)
        evals, evecs = torch.linalg.eigh(cov + eps * torch.eye(cov.shape[0], dtype=cov.dtype))
    a = evecs @ torch.diag(evals.rsqrt()) @ evecs.T
    out = copy.deepcopy(decoder)
    w = out.linear.weight.detach().to(torch.float64)
    b = out.linear.bias.detach().to(torch.float64)
    with torch.no_grad():
        out.linear.weight.copy_(a @ w)
        out.linear.bias.copy_(a @ (b - mu))
    out.whitened = True
    return out


# --- checkpoints ----------------------------------------------------------------

def save_codec(path, module: nn.Module, role: str, meta: dict | None = None) -> str:
    if role not in ("encoder", "decoder"):
        raise ValueError(f"role must be encoder or decoder, got {role!r}")
    info = {"role": role, "L": module.msg_len, "whitened": bool(getattr(module, "whitened", False))}
    if isinstance(module, Decoder):
        info["channels"] = module.linear.in_features
        info["blocks"] = len(module.layers)
    else:
        info["channels"] = module.final.in_channels
        info["message_grid"] = module.message_grid
        info["message_channels"] = module.message_channels
    # structural keys always describe the module being saved
    info.update({k: v for k, v in (meta or {}).items() if k not in info and k != "version"})
    return save_archive(path, state_to_arrays(module), info)


def load_codec(path):
    arrays, meta = load_archive(path)
    role = meta.get("role")
    if role == "decoder":
        module = Decoder(meta["L"], meta.get("channels", 64), meta.get("blocks", 7))
        module.whitened = bool(meta.get("whitened", False))
    elif role == "encoder":
        module = Encoder(meta["L"], meta.get("channels", 64), meta.get("message_grid", 0),
                         meta.get("message_channels", 4))
    else:
        raise ValueError(f"{path}: not an encoder/decoder checkpoint (role={role!r})")
    module.load_state_dict(arrays_to_state(arrays))
    module.eval()
    return module, meta
