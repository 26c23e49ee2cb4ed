"""Radiance fields (implicit MLP and factorized grid) and volume rendering.

Both field types are ``nn.Module``s with the same call signature::

    sigma, rgb = field(x, d)      # x, d: (N, 3) -> (N,), (N, 3)

so everything downstream (rendering, fine-tuning) is representation-agnostic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .checkpoint import arrays_to_state, load_archive, save_archive, state_to_arrays
from .scene import CameraModel, generate_rays


@dataclass(frozen=True)
class SamplingConfig:
    t_near: float = 2.0
    t_far: float = 6.0
    samples_per_ray: int = 64
    jitter: bool = False

    def __post_init__(self):
        if not self.t_near < self.t_far:
            raise ValueError("t_near must be < t_far")
        if self.samples_per_ray < 2:
            raise ValueError("samples_per_ray must be >= 2")


def _normalize(x: torch.Tensor, bounds) -> torch.Tensor:
    lo = torch.as_tensor(bounds[0], dtype=x.dtype, device=x.device)
    hi = torch.as_tensor(bounds[1], dtype=x.dtype, device=x.device)
    return (x - lo) / (hi - lo) * 2 - 1


def positional_encoding(x: torch.Tensor, levels: int) -> torch.Tensor:
    if levels == 0:
        return x
    freqs = (2.0 ** torch.arange(levels, dtype=x.dtype, device=x.device)) * math.pi
    xb = x[..., None, :] * freqs[:, None]
    enc = torch.cat([torch.sin(xb), torch.cos(xb)], dim=-1).flatten(-2)
    return torch.cat([x, enc], dim=-1)


class ImplicitField(nn.Module):
    """MLP field: positions and directions in, density and color out."""

    kind = "implicit"

    def __init__(
        self,
        bounds=((-1.5,) * 3, (1.5,) * 3),
        position_encoding_levels: int = 6,
        direction_encoding_levels: int = 2,
        depth: int = 4,
        width: int = 64,
        density_shift: float = 0.0,
    ):
        super().__init__()
        self.bounds = tuple(tuple(float(v) for v in b) for b in bounds)
        self.position_encoding_levels = position_encoding_levels
        self.direction_encoding_levels = direction_encoding_levels
        self.depth = depth
        self.width = width
        self.density_shift = density_shift

        in_x = 3 * (1 + 2 * position_encoding_levels)
        in_d = 3 * (1 + 2 * direction_encoding_levels)
        layers = []
        for i in range(depth):
            layers += [nn.Linear(in_x if i == 0 else width, width), nn.ReLU()]
        self.trunk = nn.Sequential(*layers)
        self.density_head = nn.Linear(width, 1)
        self.color_head = nn.Sequential(
            nn.Linear(width + in_d, width // 2), nn.ReLU(), nn.Linear(width // 2, 3)
        )

    def config(self) -> dict:
        return {
            "bounds": self.bounds,
            "position_encoding_levels": self.position_encoding_levels,
            "direction_encoding_levels": self.direction_encoding_levels,
            "depth": self.depth,
            "width": self.width,
            "density_shift": self.density_shift,
        }

    def forward(self, x: torch.Tensor, d: torch.Tensor):
        h = self.trunk(positional_encoding(_normalize(x, self.bounds), self.position_encoding_levels))
        sigma = F.softplus(self.density_head(h)[..., 0] + self.density_shift)
        hd = torch.cat([h, positional_encoding(d, self.direction_encoding_levels)], dim=-1)
        rgb = torch.sigmoid(self.color_head(hd))
        return sigma, rgb


# (plane axes, line axis) per vector-matrix component, axes as 0=x 1=y 2=z
_MAT_MODES = ((0, 1), (0, 2), (1, 2))
_VEC_MODES = (2, 1, 0)


class ExplicitField(nn.Module):
    """Grid field with a vector-matrix factorized or dense density/appearance grid.

    Grid samples sit on the vertices of a ``resolution``^3 lattice spanning
    ``bounds`` (align_corners convention), so interpolation at a lattice
    point returns the stored value. Points outside ``bounds`` have zero
    density.
    """

    kind = "explicit"

    def __init__(
        self,
        bounds=((-1.5,) * 3, (1.5,) * 3),
        resolution: int = 32,
        mode: str = "vm",
        density_rank: int = 8,
        appearance_rank: int = 8,
        appearance_dim: int = 12,
        color_decoder: str = "mlp",
        hidden: int = 32,
        density_shift: float = -4.0,
        init_scale: float = 0.1,
        generator: torch.Generator | None = None,
    ):
        super().__init__()
        if mode not in ("vm", "dense"):
            raise ValueError(f"mode must be 'vm' or 'dense', got {mode!r}")
        if color_decoder not in ("mlp", "rgb"):
            raise ValueError(f"color_decoder must be 'mlp' or 'rgb', got {color_decoder!r}")
        if mode == "vm" and (density_rank < 1 or appearance_rank < 1):
            raise ValueError("factor ranks must be >= 1")
        if color_decoder == "rgb" and appearance_dim != 3:
            raise ValueError("color_decoder='rgb' needs appearance_dim=3")
        self.bounds = tuple(tuple(float(v) for v in b) for b in bounds)
        self.resolution = resolution
        self.mode = mode
        self.density_rank = density_rank
        self.appearance_rank = appearance_rank
        self.appearance_dim = appearance_dim
        self.color_decoder = color_decoder
        self.hidden = hidden
        self.density_shift = density_shift

        def rnd(*shape):
            return nn.Parameter(init_scale * torch.randn(*shape, generator=generator))

        r = resolution
        if mode == "vm":
            self.density_planes = rnd(3, density_rank, r, r)
            self.density_lines = rnd(3, density_rank, r, 1)
            self.app_planes = rnd(3, appearance_rank, r, r)
            self.app_lines = rnd(3, appearance_rank, r, 1)
            self.basis = nn.Linear(3 * appearance_rank, appearance_dim, bias=False)
        else:
            self.density_grid = rnd(1, 1, r, r, r)
            self.app_grid = rnd(1, appearance_dim, r, r, r)
        if color_decoder == "mlp":
            self.render_mlp = nn.Sequential(
                nn.Linear(appearance_dim + 3, hidden), nn.ReLU(), nn.Linear(hidden, 3)
            )

    def config(self) -> dict:
        return {
            "bounds": self.bounds,
            "resolution": self.resolution,
            "mode": self.mode,
            "density_rank": self.density_rank,
            "appearance_rank": self.appearance_rank,
            "appearance_dim": self.appearance_dim,
            "color_decoder": self.color_decoder,
            "hidden": self.hidden,
            "density_shift": self.density_shift,
        }

    def voxel_position(self, i: int, j: int, k: int) -> torch.Tensor:
        """World position of lattice vertex (i, j, k) along (x, y, z)."""
        lo = torch.tensor(self.bounds[0], dtype=torch.float64)
        hi = torch.tensor(self.bounds[1], dtype=torch.float64)
        idx = torch.tensor([i, j, k], dtype=torch.float64)
        return lo + (hi - lo) * idx / (self.resolution - 1)

    def _vm_features(self, planes, lines, xn):
        n = xn.shape[0]
        feats = []
        for m, ((a, b), c) in enumerate(zip(_MAT_MODES, _VEC_MODES)):
            pg = xn[:, [a, b]].view(1, n, 1, 2)
            lg = torch.stack([torch.zeros_like(xn[:, c]), xn[:, c]], dim=-1).view(1, n, 1, 2)
            p = F.grid_sample(planes[m : m + 1], pg, align_corners=True).view(-1, n)
            v = F.grid_sample(lines[m : m + 1], lg, align_corners=True).view(-1, n)
            feats.append(p * v)
        return feats

    def density_feature(self, xn: torch.Tensor) -> torch.Tensor:
        """Interpolated raw density at normalized coordinates in [-1, 1]^3."""
        if self.mode == "vm":
            return sum(f.sum(0) for f in self._vm_features(self.density_planes, self.density_lines, xn))
        g = xn.view(1, -1, 1, 1, 3)
        return F.grid_sample(self.density_grid, g, align_corners=True).view(-1)

    def appearance_feature(self, xn: torch.Tensor) -> torch.Tensor:
        if self.mode == "vm":
            feats = torch.cat(self._vm_features(self.app_planes, self.app_lines, xn), dim=0)
            return self.basis(feats.T)
        g = xn.view(1, -1, 1, 1, 3)
        return F.grid_sample(self.app_grid, g, align_corners=True).view(self.appearance_dim, -1).T

    def forward(self, x: torch.Tensor, d: torch.Tensor):
        xn = _normalize(x, self.bounds)
        inside = (xn.abs() <= 1).all(dim=-1)
        xn = xn.clamp(-1, 1)
        sigma = F.softplus(self.density_feature(xn) + self.density_shift) * inside
        feat = self.appearance_feature(xn)
        if self.color_decoder == "rgb":
            rgb = feat.clamp(0, 1)
        else:
            rgb = torch.sigmoid(self.render_mlp(torch.cat([feat, d], dim=-1)))
        return sigma, rgb


RadianceField = ImplicitField | ExplicitField


def _check_finite(*tensors):
    for t in tensors:
        if not torch.isfinite(t).all():
            raise ValueError("non-finite field input")


def query_implicit(field: ImplicitField, x, d):
    x = torch.as_tensor(x, dtype=field.density_head.weight.dtype)
    d = torch.as_tensor(d, dtype=x.dtype)
    _check_finite(x, d)
    sigma, rgb = field(x.reshape(-1, 3), d.reshape(-1, 3))
    return sigma.reshape(x.shape[:-1]), rgb.reshape(x.shape)


def query_explicit(field: ExplicitField, x, d):
    dtype = next(field.parameters()).dtype
    x = torch.as_tensor(x, dtype=dtype)
    d = torch.as_tensor(d, dtype=dtype)
    sigma, rgb = field(x.reshape(-1, 3), d.reshape(-1, 3))
    return sigma.reshape(x.shape[:-1]), rgb.reshape(x.shape)


def _field_dtype(field) -> torch.dtype:
    return next(field.parameters()).dtype


def sample_depths(n_rays: int, sampling: SamplingConfig, dtype, generator=None):
    """Bin midpoints (or jittered bin positions) and bin widths along each ray."""
    n = sampling.samples_per_ray
    edges = torch.linspace(sampling.t_near, sampling.t_far, n + 1, dtype=dtype)
    delta = edges[1:] - edges[:-1]
    if sampling.jitter:
        u = torch.rand(n_rays, n, dtype=dtype, generator=generator)
    else:
        u = torch.full((n_rays, n), 0.5, dtype=dtype)
    t = edges[:-1] + u * delta
    return t, delta.expand(n_rays, n)


def composite(sigma: torch.Tensor, rgb: torch.Tensor, delta: torch.Tensor):
    """Alpha-composite (R, S) densities and (R, S, 3) colors on black."""
    tau = sigma * delta
    trans = torch.exp(-torch.cumsum(tau, dim=-1) + tau)  # exclusive prefix sum
    weights = trans * (1 - torch.exp(-tau))
    color = (weights[..., None] * rgb).sum(dim=-2)
    return color, weights


def render_rays(field, origins, directions, sampling: SamplingConfig, generator=None, return_weights=False):
    dtype = _field_dtype(field)
    origins = torch.as_tensor(origins).to(dtype).reshape(-1, 3)
    directions = torch.as_tensor(directions).to(dtype).reshape(-1, 3)
    r = origins.shape[0]
    t, delta = sample_depths(r, sampling, dtype, generator)
    pts = origins[:, None, :] + t[..., None] * directions[:, None, :]
    dirs = directions[:, None, :].expand_as(pts)
    sigma, rgb = field(pts.reshape(-1, 3), dirs.reshape(-1, 3))
    color, weights = composite(sigma.view(r, -1), rgb.view(r, -1, 3), delta)
    if return_weights:
        return color, weights
    return color


def render_ray(field, origin, direction, sampling: SamplingConfig, return_weights=False):
    out = render_rays(field, origin, direction, sampling, return_weights=return_weights)
    if return_weights:
        return out[0][0], out[1][0]
    return out[0]


def _camera_rays(camera: CameraModel, dtype):
    o, d = generate_rays(camera)
    return torch.from_numpy(o).to(dtype), torch.from_numpy(d).to(dtype)


@torch.no_grad()
def render_image_nograd(field, camera: CameraModel, sampling: SamplingConfig, chunk_rows: int = 16, generator=None):
    """Full-resolution render with autograd off, evaluated ``chunk_rows`` rows at a time."""
    o, d = _camera_rays(camera, _field_dtype(field))
    h, w = camera.height, camera.width
    rows = []
    for y0 in range(0, h, chunk_rows):
        y1 = min(h, y0 + chunk_rows)
        c = render_rays(field, o[y0:y1], d[y0:y1], sampling, generator=generator)
        rows.append(c.view(y1 - y0, w, 3))
    return torch.cat(rows, dim=0)


def render_patch_grad(field, camera: CameraModel, sampling: SamplingConfig, patch, generator=None):
    """Render the pixel rectangle ``patch = (y0, x0, height, width)`` with autograd on."""
    y0, x0, ph, pw = patch
    if ph <= 0 or pw <= 0:
        raise ValueError(f"empty patch {patch}")
    if y0 < 0 or x0 < 0 or y0 + ph > camera.height or x0 + pw > camera.width:
        raise ValueError(f"patch {patch} outside {camera.height}x{camera.width} image")
    o, d = _camera_rays(camera, _field_dtype(field))
    o = o[y0 : y0 + ph, x0 : x0 + pw]
    d = d[y0 : y0 + ph, x0 : x0 + pw]
    with torch.enable_grad():
        c = render_rays(field, o, d, sampling, generator=generator)
    return c.view(ph, pw, 3)


def build_field(kind: str, **kwargs):
    if kind == "implicit":
        return ImplicitField(**kwargs)
    if kind == "explicit":
        return ExplicitField(**kwargs)
    raise ValueError(f"unknown representation {kind!r}")


def save_field(field, path, extra: dict | None = None) -> str:
    meta = {
        "role": "field",
        "representation": field.kind,
        "config": field.config(),
        "shapes": {k: list(v.shape) for k, v in field.state_dict().items()},
        "dtype": str(_field_dtype(field)).replace("torch.", ""),
    }
    if extra:
        meta.update(extra)
    return save_archive(path, state_to_arrays(field), meta)


def load_field(path):
    arrays, meta = load_archive(path)
    if meta.get("role", "field") != "field":
        raise ValueError(f"{path} holds a {meta.get('role')!r}, not a field")
    field = build_field(meta["representation"], **meta["config"])
    field = field.to(getattr(torch, meta.get("dtype", "float32")))
    field.load_state_dict(arrays_to_state(arrays))
    return field, meta


def fit_field(field, views, sampling: SamplingConfig, iters: int = 1000, lr: float = 0.02,
              batch_rays: int = 2048, seed: int = 0, log=None):
    """Photometric pre-training on random rays; produces the initial field."""
    g = torch.Generator().manual_seed(seed)
    dtype = _field_dtype(field)
    origins, dirs, colors = [], [], []
    for v in views:
        o, d = _camera_rays(v.camera, dtype)
        origins.append(o.reshape(-1, 3))
        dirs.append(d.reshape(-1, 3))
        colors.append(torch.as_tensor(v.image).to(dtype).reshape(-1, 3))
    origins, dirs, colors = torch.cat(origins), torch.cat(dirs), torch.cat(colors)
    opt = torch.optim.Adam(field.parameters(), lr=lr)
    sched = torch.optim.lr_scheduler.ExponentialLR(opt, gamma=0.1 ** (1 / max(iters, 1)))
    for it in range(iters):
        idx = torch.randint(0, origins.shape[0], (batch_rays,), generator=g)
        pred = render_rays(field, origins[idx], dirs[idx], sampling)
        loss = F.mse_loss(pred, colors[idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        if log is not None and (it % 100 == 0 or it == iters - 1):
            log(it, loss.item())
    return field
