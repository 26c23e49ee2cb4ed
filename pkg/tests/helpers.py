import torch

from waterf.scene import CameraModel, look_at


def central_difference(fn, param, idx, step):
    """(f(p + h) - f(p - h)) / 2h for one entry of a parameter tensor, in place."""
    with torch.no_grad():
        orig = param[idx].item()
        param[idx] = orig + step
        plus = float(fn())
        param[idx] = orig - step
        minus = float(fn())
        param[idx] = orig
    return (plus - minus) / (2 * step)


def tiny_camera(size=16, distance=4.0):
    focal = (size / 2) / 0.45
    return CameraModel.centered(size, size, focal, look_at([distance * 0.8, -distance * 0.6, 1.0]))
