import json

import numpy as np
import pytest
import torch

from waterf.codec import Decoder, decode
from waterf.field import ExplicitField, ImplicitField, SamplingConfig, render_image_nograd, render_patch_grad
from waterf.finetune import (
    FinetuneConfig,
    StaleCacheError,
    accumulate_deferred_grads,
    cache_full_grads,
    deferred_step,
    extract_message,
    finetune,
    patch_grid,
)
from waterf.losses import LossWeights, full_loss
from waterf.scene import SyntheticSceneSpec, generate_synthetic_scene
from waterf.wavelet import TransformSpec, decoder_view, dwt2, select_subband

from .helpers import tiny_camera

MESSAGE = [1, 0, 1, 1]
SAMPLING = SamplingConfig(2.0, 6.0, 16)
NO_PATCH = LossWeights(lambda_i=0.3, lambda_m=0.7, lambda_mae=0, lambda_tv=0, lambda_ssim=0)


def tiny_field(kind, seed=0):
    torch.manual_seed(seed)
    if kind == "explicit":
        f = ExplicitField(resolution=8, density_rank=2, appearance_rank=2, appearance_dim=4, hidden=8,
                          density_shift=0.0, generator=torch.Generator().manual_seed(seed))
    else:
        f = ImplicitField(depth=2, width=16, position_encoding_levels=2, direction_encoding_levels=1)
    return f.double()


def tiny_decoder(seed=0):
    torch.manual_seed(seed)
    dec = Decoder(len(MESSAGE), channels=8, blocks=2).double().eval()
    for p in dec.parameters():
        p.requires_grad_(False)
    return dec


def _config(patch_size=32, weights=NO_PATCH):
    return FinetuneConfig(message=MESSAGE, weights=weights, epochs=5, patch_size=patch_size)


def _grads(field):
    return [p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p) for p in field.parameters()]


def _deferred(field, cam, x0, cfg, dec):
    field.zero_grad(set_to_none=False)
    _, cache, _ = cache_full_grads(field, cam, x0, MESSAGE, dec, cfg, SAMPLING)
    accumulate_deferred_grads(field, cam, cache, x0, cfg, SAMPLING)
    return _grads(field)


def _direct(field, cam, x0, cfg, dec):
    field.zero_grad(set_to_none=False)
    x = render_patch_grad(field, cam, SAMPLING, (0, 0, cam.height, cam.width))
    loss = full_loss(cfg.weights, x0, x, extract_message(x, dec, cfg.transform), MESSAGE)
    loss.backward()
    return _grads(field)


def _rel(a, b):
    num = sum(float((x - y).pow(2).sum()) for x, y in zip(a, b)) ** 0.5
    den = sum(float(y.pow(2).sum()) for y in b) ** 0.5
    return num / den


def _setup(kind):
    f = tiny_field(kind)
    cam = tiny_camera(32)
    x0 = (render_image_nograd(f, cam, SAMPLING) * 0.9 + 0.05).detach()
    return f, cam, x0


@pytest.mark.parametrize("kind", ["explicit", "implicit"])
def test_deferred_equals_direct_backprop(kind):
    f, cam, x0 = _setup(kind)
    dec = tiny_decoder()
    cfg = _config(patch_size=16)
    deferred = _deferred(f, cam, x0, cfg, dec)
    direct = _direct(f, cam, x0, cfg, dec)
    assert sum(float(g.abs().sum()) for g in direct) > 0
    assert _rel(deferred, direct) <= 1e-5


@pytest.mark.parametrize("kind", ["explicit", "implicit"])
def test_patch_grid_invariance(kind):
    f, cam, x0 = _setup(kind)
    dec = tiny_decoder()
    whole = _deferred(f, cam, x0, _config(32), dec)
    quads = _deferred(f, cam, x0, _config(16), dec)
    fine = _deferred(f, cam, x0, _config(8), dec)
    for a, b, c in zip(whole, quads, fine):
        assert torch.allclose(a, b, atol=1e-6, rtol=0)
        assert torch.allclose(a, c, atol=1e-6, rtol=0)


def test_zero_weights_give_zero_cache():
    f, cam, x0 = _setup("explicit")
    cfg = _config(weights=LossWeights(0, 0, 0, 0, 0))
    x, cache, _ = cache_full_grads(f, cam, x0, MESSAGE, tiny_decoder(), cfg, SAMPLING)
    assert cache.grads.shape == x.shape == (32, 32, 3)
    assert torch.all(cache.grads == 0)


def test_zero_cache_and_matching_gt_gives_no_update():
    f, cam, _ = _setup("explicit")
    weights = LossWeights(0, 0, lambda_mae=1.0, lambda_tv=0.0, lambda_ssim=1.0)
    cfg = _config(patch_size=16, weights=weights)
    x = render_image_nograd(f, cam, SAMPLING)
    _, cache, _ = cache_full_grads(f, cam, x, MESSAGE, tiny_decoder(), cfg, SAMPLING)
    before = [p.detach().clone() for p in f.parameters()]
    opt = torch.optim.SGD(f.parameters(), lr=1.0)
    # MAE has a kink at zero; SSIM is stationary at a perfect match
    weights = LossWeights(0, 0, lambda_mae=0.0, lambda_tv=0.0, lambda_ssim=1.0)
    deferred_step(f, opt, cam, cache, x, cfg, SAMPLING, weights)
    for a, b in zip(before, f.parameters()):
        assert torch.allclose(a, b, atol=1e-9)


def test_stale_cache_rejected():
    f, cam, x0 = _setup("explicit")
    cfg = _config()
    _, cache, _ = cache_full_grads(f, cam, x0, MESSAGE, tiny_decoder(), cfg, SAMPLING)
    with torch.no_grad():
        f.density_planes.add_(0.01)
    with pytest.raises(StaleCacheError):
        accumulate_deferred_grads(f, cam, cache, x0, cfg, SAMPLING)
    other = tiny_field("explicit")
    with pytest.raises(StaleCacheError):
        accumulate_deferred_grads(other, cam, cache, x0, cfg, SAMPLING)


def test_cached_gradient_matches_pixel_finite_differences():
    f, cam, x0 = _setup("explicit")
    dec = tiny_decoder(3)
    cfg = _config()
    x, cache, _ = cache_full_grads(f, cam, x0, MESSAGE, dec, cfg, SAMPLING)

    def loss_at(img):
        return float(full_loss(cfg.weights, x0, img, extract_message(img, dec, cfg.transform), MESSAGE))

    rng = np.random.default_rng(0)
    g = cache.grads
    # largest-gradient pixels plus a few random ones
    flat = torch.topk(g.abs().flatten(), 4).indices.tolist()
    flat += [int(i) for i in rng.integers(0, g.numel(), 4)]
    h = 1e-6
    for k in flat:
        idx = np.unravel_index(k, g.shape)
        plus, minus = x.clone(), x.clone()
        plus[idx] += h
        minus[idx] -= h
        fd = (loss_at(plus) - loss_at(minus)) / (2 * h)
        assert abs(float(g[idx]) - fd) <= 1e-3 * max(abs(fd), 1e-6)


def _peak_saved_bytes(field, cam, x0, cfg, dec):
    """Largest total size of tensors held by one autograd graph during the deferred pass."""
    current = [0]
    peak = [0]

    def pack(t):
        current[0] += t.numel() * t.element_size()
        peak[0] = max(peak[0], current[0])
        return t

    def reset(_rect):
        current[0] = 0

    _, cache, _ = cache_full_grads(field, cam, x0, MESSAGE, dec, cfg, SAMPLING)
    with torch.autograd.graph.saved_tensors_hooks(pack, lambda t: t):
        accumulate_deferred_grads(field, cam, cache, x0, cfg, SAMPLING, on_patch=reset)
    return peak[0]


def test_memory_bounded_by_one_patch():
    f = tiny_field("explicit")
    dec = tiny_decoder()
    cfg = _config(patch_size=16)
    peaks = []
    for size in (32, 64):
        cam = tiny_camera(size)
        x0 = render_image_nograd(f, cam, SAMPLING)
        peaks.append(_peak_saved_bytes(f, cam, x0, cfg, dec))
    # 4 patches vs 16 patches of the same size
    assert abs(peaks[1] - peaks[0]) <= 0.2 * peaks[0]
    whole = _peak_saved_bytes(f, tiny_camera(64), render_image_nograd(f, tiny_camera(64), SAMPLING),
                              _config(patch_size=64), dec)
    assert whole > 3 * peaks[1]


def test_extract_message_is_the_manual_pipeline():
    dec = tiny_decoder()
    img = torch.rand(32, 32, 3, dtype=torch.float64)
    t = TransformSpec()
    manual = decode(dec, select_subband(dwt2(img, t), "LL"))
    assert torch.equal(extract_message(img, dec, t), manual)
    assert torch.equal(decoder_view(img, t), select_subband(dwt2(img, t), "LL"))
    assert extract_message(img, dec, t).shape == (len(MESSAGE),)


def test_patch_grid_tiles():
    assert patch_grid(64, 64, 64) == [(0, 0, 64, 64)]
    assert len(patch_grid(64, 64, 16)) == 16
    with pytest.raises(ValueError):
        patch_grid(64, 64, 24)


def test_config_validation_and_json():
    with pytest.raises(ValueError):
        FinetuneConfig(message=MESSAGE, epochs=3)
    with pytest.raises(ValueError):
        FinetuneConfig(message=[2, 1])
    with pytest.raises(ValueError):
        FinetuneConfig(message=MESSAGE, gt_source="coco")
    cfg = FinetuneConfig(message=MESSAGE, lr=3e-3, transform=TransformSpec(level=1))
    again = FinetuneConfig.from_json(json.loads(json.dumps(cfg.to_json())))
    assert again == cfg
    with pytest.raises(ValueError):
        FinetuneConfig.from_json({"message": MESSAGE, "batch": 2})
    assert FinetuneConfig(message=MESSAGE).learning_rate(tiny_field("implicit")) == 5e-4
    assert FinetuneConfig(message=MESSAGE).learning_rate(tiny_field("explicit")) == 1e-3


def _mini_scene():
    spec = SyntheticSceneSpec(grid_resolution=8, num_views=3, width=32, height=32, samples_per_ray=16)
    _, views = generate_synthetic_scene(spec)
    return views[:2], views[2:], spec.sampling()


def test_finetune_run_directory_and_determinism(tmp_path):
    train, held, sampling = _mini_scene()
    cfg = FinetuneConfig(message=MESSAGE, epochs=5, patch_size=16, seed=1)
    results = []
    for run in ("a", "b"):
        f = tiny_field("explicit")
        _, hist = finetune(f, train, tiny_decoder(), cfg, sampling, heldout=held, run_dir=tmp_path / run)
        results.append((f, hist))
    (fa, ha), (fb, hb) = results
    assert ha == hb and len(ha) == 5
    assert all(torch.equal(a, b) for a, b in zip(fa.state_dict().values(), fb.state_dict().values()))
    run = tmp_path / "a"
    assert json.loads((run / "config.json").read_text())["message"] == MESSAGE
    lines = (run / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == 5 and "heldout_bit_accuracy" in json.loads(lines[0])
    assert sorted(p.name for p in (run / "checkpoints").iterdir()) == [f"epoch_{k}.npz" for k in range(5)]
    a_bytes = (tmp_path / "a" / "checkpoints" / "epoch_4.npz").read_bytes()
    assert a_bytes == (tmp_path / "b" / "checkpoints" / "epoch_4.npz").read_bytes()


def test_finetune_rejects_length_mismatch():
    train, _, sampling = _mini_scene()
    with pytest.raises(ValueError):
        finetune(tiny_field("explicit"), train, tiny_decoder(), FinetuneConfig(message=[1, 0]), sampling)


def test_divergence_guard_records_events():
    train, _, sampling = _mini_scene()
    # an unreachable floor fires the guard on every view
    cfg = FinetuneConfig(message=MESSAGE, epochs=5, patch_size=16, psnr_floor=200.0, lr=1e-2)
    _, hist = finetune(tiny_field("explicit"), train, tiny_decoder(), cfg, sampling)
    events = hist[0]["divergence_events"]
    assert len(events) == len(train)
    assert events[1]["lambda_m"] == pytest.approx(cfg.weights.lambda_m / 4)
    # the weight resets each epoch
    assert hist[1]["divergence_events"][0]["lambda_m"] == pytest.approx(cfg.weights.lambda_m / 2)
