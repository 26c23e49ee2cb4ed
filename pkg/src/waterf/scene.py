"""Cameras, dataset loaders/writers, rays, and procedural blob scenes."""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass

import numpy as np
from PIL import Image


class DatasetFormatError(ValueError):
    pass


class DatasetConsistencyError(ValueError):
    pass


@dataclass
class CameraModel:
    width: int
    height: int
    focal_x: float
    focal_y: float
    principal_x: float
    principal_y: float
    cam_to_world: np.ndarray

    def __post_init__(self):
        self.cam_to_world = np.asarray(self.cam_to_world, dtype=np.float64)
        if self.cam_to_world.shape != (4, 4):
            raise ValueError(f"cam_to_world must be 4x4, got {self.cam_to_world.shape}")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("width and height must be positive")
        if self.focal_x <= 0 or self.focal_y <= 0:
            raise ValueError("focal lengths must be positive")
        r = self.cam_to_world[:3, :3]
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-6):
            raise ValueError("rotation block of cam_to_world is not orthonormal")

    @classmethod
    def centered(cls, width, height, focal, cam_to_world):
        return cls(width, height, focal, focal, width / 2, height / 2, cam_to_world)

    def resized(self, width: int, height: int) -> "CameraModel":
        sx, sy = width / self.width, height / self.height
        return CameraModel(width, height, self.focal_x * sx, self.focal_y * sy,
                           self.principal_x * sx, self.principal_y * sy, self.cam_to_world)

    def to_json(self) -> dict:
        d = asdict(self)
        d["cam_to_world"] = self.cam_to_world.tolist()
        return d


@dataclass
class ViewSample:
    camera: CameraModel
    image: np.ndarray
    near: float | None = None
    far: float | None = None

    def __post_init__(self):
        self.image = np.asarray(self.image)
        if self.image.shape != (self.camera.height, self.camera.width, 3):
            raise DatasetConsistencyError(
                f"image shape {self.image.shape} does not match camera "
                f"{self.camera.height}x{self.camera.width}"
            )
        if self.image.size and (self.image.min() < 0 or self.image.max() > 1):
            raise ValueError("image values must lie in [0, 1]")


def generate_rays(camera: CameraModel):
    """Per-pixel ray origins and unit directions through pixel centers, (H, W, 3) each."""
    i, j = np.meshgrid(np.arange(camera.width, dtype=np.float64) + 0.5,
                       np.arange(camera.height, dtype=np.float64) + 0.5, indexing="xy")
    dirs = np.stack([(i - camera.principal_x) / camera.focal_x,
                     -(j - camera.principal_y) / camera.focal_y,
                     -np.ones_like(i)], axis=-1)
    rot = camera.cam_to_world[:3, :3]
    dirs = dirs @ rot.T
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    origins = np.broadcast_to(camera.cam_to_world[:3, 3], dirs.shape).copy()
    return origins, dirs


def look_at(position, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)) -> np.ndarray:
    position = np.asarray(position, dtype=np.float64)
    back = position - np.asarray(target, dtype=np.float64)
    back /= np.linalg.norm(back)
    right = np.cross(up, back)
    right /= np.linalg.norm(right)
    true_up = np.cross(back, right)
    m = np.eye(4)
    m[:3, 0], m[:3, 1], m[:3, 2], m[:3, 3] = right, true_up, back, position
    return m


def camera_ring(n: int, radius: float, elevation_deg: float, width: int, height: int,
                fov_deg: float, phase: float = 0.0) -> list[CameraModel]:
    focal = (width / 2) / math.tan(math.radians(fov_deg) / 2)
    el = math.radians(elevation_deg)
    cams = []
    for k in range(n):
        az = 2 * math.pi * (k + phase) / n
        pos = radius * np.array([math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el)])
        cams.append(CameraModel.centered(width, height, focal, look_at(pos)))
    return cams


# --- dataset IO -------------------------------------------------------------

def _read_image(path: str) -> np.ndarray:
    img = np.asarray(Image.open(path), dtype=np.float64) / 255.0
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=-1)
    if img.shape[-1] == 4:
        img = img[..., :3] * img[..., 3:]  # opaque-on-black composite
    return img[..., :3]


def _write_image(path: str, image: np.ndarray):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    Image.fromarray(np.round(np.clip(image, 0, 1) * 255).astype(np.uint8)).save(path)


def _resolve_image(root: str, file_path: str) -> str | None:
    p = os.path.join(root, file_path)
    for cand in (p, p + ".png", p + ".jpg"):
        if os.path.isfile(cand):
            return cand
    return None


def _matrix(value, where: str) -> np.ndarray:
    try:
        m = np.asarray(value, dtype=np.float64)
    except (TypeError, ValueError):
        raise DatasetFormatError(f"{where}: not a numeric 4x4 matrix") from None
    if m.shape != (4, 4):
        raise DatasetFormatError(f"{where}: expected 4x4 matrix, got shape {m.shape}")
    return m


def _load_blender_file(root: str, json_path: str) -> list[ViewSample]:
    try:
        with open(json_path) as f:
            meta = json.load(f)
    except json.JSONDecodeError as e:
        raise DatasetFormatError(f"{json_path}: malformed JSON ({e})") from None
    if not isinstance(meta, dict):
        raise DatasetFormatError(f"{json_path}: top level must be an object")
    if "camera_angle_x" not in meta:
        raise DatasetFormatError(f"{json_path}: missing field 'camera_angle_x'")
    if "frames" not in meta or not isinstance(meta["frames"], list):
        raise DatasetFormatError(f"{json_path}: missing or non-list field 'frames'")
    try:
        fov = float(meta["camera_angle_x"])
    except (TypeError, ValueError):
        raise DatasetFormatError(f"{json_path}: field 'camera_angle_x' is not a number") from None
    views = []
    for idx, frame in enumerate(meta["frames"]):
        for key in ("file_path", "transform_matrix"):
            if key not in frame:
                raise DatasetFormatError(f"{json_path}: frames[{idx}] missing field '{key}'")
        m = _matrix(frame["transform_matrix"], f"{json_path}: frames[{idx}].transform_matrix")
        img_path = _resolve_image(root, frame["file_path"])
        if img_path is None:
            raise DatasetConsistencyError(
                f"{json_path}: frames[{idx}] references missing image {frame['file_path']!r}"
            )
        img = _read_image(img_path)
        h, w = img.shape[:2]
        focal = (w / 2) / math.tan(fov / 2)
        views.append(ViewSample(CameraModel.centered(w, h, focal, m), img))
    return views


def load_blender_dataset(path) -> dict[str, list[ViewSample]]:
    """Load ``transforms_{train,val,test}.json`` (or a single ``transforms.json``)."""
    path = os.fspath(path)
    splits = {}
    for split in ("train", "val", "test"):
        p = os.path.join(path, f"transforms_{split}.json")
        if os.path.isfile(p):
            splits[split] = _load_blender_file(path, p)
    single = os.path.join(path, "transforms.json")
    if os.path.isfile(single):
        splits["all"] = _load_blender_file(path, single)
    if not splits:
        raise DatasetFormatError(f"{path}: no transforms*.json camera file found")
    return splits


def write_blender_dataset(path, splits: dict[str, list[ViewSample]]):
    path = os.fspath(path)
    os.makedirs(path, exist_ok=True)
    for split, views in splits.items():
        frames = []
        fov = None
        for idx, v in enumerate(views):
            cam = v.camera
            fov_v = 2 * math.atan((cam.width / 2) / cam.focal_x)
            if fov is not None and not math.isclose(fov, fov_v, rel_tol=1e-12):
                raise DatasetConsistencyError("all frames in a split must share one field of view")
            fov = fov_v
            rel = f"{split}/r_{idx:03d}"
            _write_image(os.path.join(path, rel + ".png"), v.image)
            frames.append({"file_path": rel, "transform_matrix": cam.cam_to_world.tolist()})
        name = "transforms.json" if split == "all" else f"transforms_{split}.json"
        with open(os.path.join(path, name), "w") as f:
            json.dump({"camera_angle_x": fov if fov is not None else 0.0, "frames": frames}, f, indent=1)


def load_llff_poses(path) -> list[ViewSample]:
    """Simplified forward-facing layout: a directory with ``poses.json`` and images."""
    path = os.fspath(path)
    p = os.path.join(path, "poses.json")
    try:
        with open(p) as f:
            entries = json.load(f)
    except FileNotFoundError:
        raise DatasetFormatError(f"{path}: missing poses.json") from None
    except json.JSONDecodeError as e:
        raise DatasetFormatError(f"{p}: malformed JSON ({e})") from None
    if not isinstance(entries, list):
        raise DatasetFormatError(f"{p}: top level must be an array")
    views = []
    for idx, e in enumerate(entries):
        for key in ("image", "cam_to_world", "focal", "near", "far"):
            if key not in e:
                raise DatasetFormatError(f"{p}: entry {idx} missing field '{key}'")
        m = _matrix(e["cam_to_world"], f"{p}: entry {idx}.cam_to_world")
        img_path = _resolve_image(path, e["image"])
        if img_path is None:
            raise DatasetConsistencyError(f"{p}: entry {idx} references missing image {e['image']!r}")
        img = _read_image(img_path)
        h, w = img.shape[:2]
        cam = CameraModel.centered(w, h, float(e["focal"]), m)
        views.append(ViewSample(cam, img, near=float(e["near"]), far=float(e["far"])))
    return views


def write_llff_poses(path, views: list[ViewSample]):
    path = os.fspath(path)
    os.makedirs(path, exist_ok=True)
    entries = []
    for idx, v in enumerate(views):
        rel = f"images/{idx:03d}.png"
        _write_image(os.path.join(path, rel), v.image)
        entries.append({"image": rel, "cam_to_world": v.camera.cam_to_world.tolist(),
                        "focal": v.camera.focal_x, "near": v.near, "far": v.far})
    with open(os.path.join(path, "poses.json"), "w") as f:
        json.dump(entries, f, indent=1)


# --- procedural scenes ------------------------------------------------------

@dataclass
class SyntheticSceneSpec:
    grid_resolution: int = 48
    num_primitives: int = 12
    seed: int = 0
    bounds: tuple = ((-1.5, -1.5, -1.5), (1.5, 1.5, 1.5))
    num_views: int = 24
    width: int = 64
    height: int = 64
    radius: float = 4.0
    elevation_deg: float = 30.0
    fov_deg: float = 40.0
    samples_per_ray: int = 64

    def __post_init__(self):
        if self.grid_resolution < 4:
            raise ValueError("grid_resolution must be >= 4")
        if self.num_primitives < 1:
            raise ValueError("num_primitives must be >= 1")
        self.bounds = tuple(tuple(float(v) for v in b) for b in self.bounds)

    @classmethod
    def from_json(cls, data: dict) -> "SyntheticSceneSpec":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown scene fields: {sorted(unknown)}")
        return cls(**data)

    def to_json(self) -> dict:
        return asdict(self)

    def sampling(self):
        from .field import SamplingConfig

        half_diag = 0.5 * float(np.linalg.norm(np.subtract(self.bounds[1], self.bounds[0])))
        return SamplingConfig(max(1e-3, self.radius - half_diag), self.radius + half_diag,
                              self.samples_per_ray)

    def cameras(self, phase: float = 0.0) -> list[CameraModel]:
        return camera_ring(self.num_views, self.radius, self.elevation_deg, self.width,
                           self.height, self.fov_deg, phase)


@dataclass
class BlobScene:
    centers: np.ndarray
    radii: np.ndarray
    amplitudes: np.ndarray
    colors: np.ndarray

    def density(self, x: np.ndarray) -> np.ndarray:
        r2 = ((x[..., None, :] - self.centers) ** 2).sum(-1)
        return (self.amplitudes * np.exp(-r2 / (2 * self.radii**2))).sum(-1)

    def color(self, x: np.ndarray) -> np.ndarray:
        r2 = ((x[..., None, :] - self.centers) ** 2).sum(-1)
        w = self.amplitudes * np.exp(-r2 / (2 * self.radii**2)) + 1e-12
        return (w[..., None] * self.colors).sum(-2) / w.sum(-1, keepdims=True)


def sample_blobs(spec: SyntheticSceneSpec) -> BlobScene:
    rng = np.random.default_rng(spec.seed)
    lo, hi = np.array(spec.bounds[0]), np.array(spec.bounds[1])
    mid, half = (lo + hi) / 2, (hi - lo) / 2
    n = spec.num_primitives
    if n == 1:
        centers = mid[None].copy()
    else:
        centers = mid + rng.uniform(-0.5, 0.5, size=(n, 3)) * half
    radii = rng.uniform(0.08, 0.16, size=n) * half.min()
    amplitudes = rng.uniform(15.0, 30.0, size=n)
    colors = rng.uniform(0.15, 1.0, size=(n, 3))
    return BlobScene(centers, radii, amplitudes, colors)


def _inverse_softplus(y: np.ndarray) -> np.ndarray:
    y = np.maximum(y, 1e-6)
    return np.where(y > 20, y, np.log(np.expm1(np.minimum(y, 20))))


def blob_field(blobs: BlobScene, spec: SyntheticSceneSpec):
    """Dense-grid field holding the blob density and color at lattice vertices."""
    import torch

    from .field import ExplicitField

    r = spec.grid_resolution
    lo, hi = np.array(spec.bounds[0]), np.array(spec.bounds[1])
    axes = [np.linspace(lo[a], hi[a], r) for a in range(3)]
    z, y, x = np.meshgrid(axes[2], axes[1], axes[0], indexing="ij")
    pts = np.stack([x, y, z], axis=-1)  # indexed [k, j, i]
    sigma = blobs.density(pts)
    rgb = blobs.color(pts)
    field = ExplicitField(bounds=spec.bounds, resolution=r, mode="dense", appearance_dim=3,
                          color_decoder="rgb", density_shift=0.0)
    with torch.no_grad():
        field.density_grid.copy_(torch.from_numpy(_inverse_softplus(sigma))[None, None])
        field.app_grid.copy_(torch.from_numpy(rgb).permute(3, 0, 1, 2)[None])
    return field


def generate_synthetic_scene(spec: SyntheticSceneSpec, cameras: list[CameraModel] | None = None):
    """Return ``(ground_truth_field, views)`` for a seeded blob scene on a camera ring."""
    from .field import render_image_nograd

    field = blob_field(sample_blobs(spec), spec)
    sampling = spec.sampling()
    views = []
    for cam in cameras if cameras is not None else spec.cameras():
        img = render_image_nograd(field, cam, sampling).clamp(0, 1).numpy().astype(np.float64)
        views.append(ViewSample(cam, img))
    return field, views
