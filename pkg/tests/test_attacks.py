import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from waterf.attacks import (
    AttackSpec,
    apply_attack,
    extraction_size,
    prepare_for_extraction,
    robustness_sweep,
    standard_suite,
)
from waterf.codec import Decoder, bit_accuracy
from waterf.field import render_image_nograd
from waterf.finetune import extract_message
from waterf.scene import SyntheticSceneSpec, generate_synthetic_scene
from waterf.wavelet import TransformSpec


def _img(seed=0, shape=(32, 32, 3)):
    return np.random.default_rng(seed).random(shape)


def test_brightness_scales_and_clamps():
    out = apply_attack(np.array([[[0.3, 0.6, 0.1]]]), AttackSpec("brightness", {"factor": 2.0}))
    np.testing.assert_allclose(out[0, 0], [0.6, 1.0, 0.2])


def test_zero_variance_noise_is_identity():
    x = _img()
    assert np.array_equal(apply_attack(x, AttackSpec("gaussian_noise", {"variance": 0.0})), x)


def test_noise_variance_matches():
    x = np.full((128, 128, 3), 0.5)
    out = apply_attack(x, AttackSpec("gaussian_noise", {"variance": 0.01}, seed=3))
    assert np.var(out - x) == pytest.approx(0.01, rel=0.05)


def test_crop_area_convention():
    out = apply_attack(np.zeros((100, 100, 3)), AttackSpec("crop", {"keep_area": 0.4}))
    assert out.shape == (63, 63, 3)


def test_crop_is_central():
    x = _img(1, (10, 10, 3))
    out = apply_attack(x, AttackSpec("crop", {"keep_area": 0.36}))
    np.testing.assert_array_equal(out, x[2:8, 2:8])


def test_scaling_shapes():
    x = _img(shape=(64, 64, 3))
    assert apply_attack(x, AttackSpec("scaling", {"factor": 0.25})).shape == (16, 16, 3)
    assert apply_attack(x, AttackSpec("scaling", {"factor": 0.25, "upscale_back": True})).shape == (64, 64, 3)


def test_constant_image_survives_scaling_and_blur():
    x = np.full((16, 16, 3), 0.4)
    for spec in (AttackSpec("scaling", {"factor": 0.5}), AttackSpec("gaussian_blur", {"sigma": 2.0})):
        np.testing.assert_allclose(apply_attack(x, spec), 0.4, atol=1e-12)


def test_rotation_zero_angle_identity_and_black_corners():
    x = _img()
    np.testing.assert_allclose(apply_attack(x, AttackSpec("rotation", {"max_angle": 0.0})), x, atol=1e-12)
    white = np.ones((32, 32, 3))
    out = apply_attack(white, AttackSpec("rotation", {"max_angle": math.pi / 4}, seed=1))
    assert out[0, 0].max() < 0.1 and out[16, 16].min() > 0.99


def test_jpeg_changes_image_but_keeps_shape():
    x = _img()
    out = apply_attack(x, AttackSpec("jpeg", {"quality": 10}))
    assert out.shape == x.shape and not np.allclose(out, x)


@pytest.mark.parametrize(
    "kind, params",
    [("gaussian_noise", {"variance": -1}), ("crop", {"keep_area": 0}), ("crop", {"keep_area": 1.5}),
     ("jpeg", {"quality": 0}), ("jpeg", {"quality": 101}), ("scaling", {"factor": 0})],
)
def test_invalid_parameters(kind, params):
    with pytest.raises(ValueError):
        AttackSpec(kind, params)


def test_unknown_kind_and_param():
    with pytest.raises(ValueError):
        AttackSpec("smudge")
    with pytest.raises(ValueError):
        AttackSpec("jpeg", {"q": 10})


def test_rejects_out_of_range_image():
    with pytest.raises(ValueError):
        apply_attack(np.full((4, 4, 3), 1.5), AttackSpec("identity"))


def test_json_round_trip():
    for spec in standard_suite():
        again = AttackSpec.from_json(json.loads(json.dumps(spec.to_json())))
        assert again.to_json() == spec.to_json()


def test_determinism():
    x = _img()
    for spec in (AttackSpec("gaussian_noise", seed=4), AttackSpec("rotation", seed=4)):
        assert np.array_equal(apply_attack(x, spec), apply_attack(x, spec))


def test_combined_composition():
    x = _img(2, (40, 40, 3))
    a, b, c = AttackSpec("crop", {"keep_area": 0.5}), AttackSpec("brightness", {"factor": 1.5}), AttackSpec("jpeg")
    whole = apply_attack(x, AttackSpec("combined", {"steps": [a, b, c]}))
    staged = apply_attack(apply_attack(x, AttackSpec("combined", {"steps": [a]})),
                          AttackSpec("combined", {"steps": [b, c]}))
    np.testing.assert_allclose(whole, staged, atol=1e-12)


def test_torch_input_round_trips_type():
    x = torch.rand(8, 8, 3, dtype=torch.float64)
    out = apply_attack(x, AttackSpec("brightness", {"factor": 0.5}))
    assert isinstance(out, torch.Tensor) and torch.allclose(out, x * 0.5)


@given(st.sampled_from(standard_suite()), st.integers(0, 1000))
@settings(max_examples=30, deadline=None)
def test_outputs_are_valid_images(spec, seed):
    out = apply_attack(_img(seed), AttackSpec(spec.kind, spec.params, seed))
    assert out.ndim == 3 and out.shape[-1] == 3
    assert out.min() >= 0 and out.max() <= 1


def test_extraction_size():
    t = TransformSpec(level=2)
    assert extraction_size(64, 64, t) == (64, 64)
    assert extraction_size(40, 40, t) == (40, 40)
    assert extraction_size(16, 16, t) == (32, 32)
    assert extraction_size(63, 63, t) == (64, 64)
    assert extraction_size(16, 16, TransformSpec(domain="none")) == (16, 16)
    assert prepare_for_extraction(torch.zeros(63, 63, 3), t).shape == (64, 64, 3)


def test_sweep_identity_row_equals_plain_extraction():
    spec = SyntheticSceneSpec(grid_resolution=16, num_views=2, width=32, height=32)
    gt, views = generate_synthetic_scene(spec)
    torch.manual_seed(0)
    dec = Decoder(8, channels=8, blocks=2).double().eval()
    msg = np.array([1, 0, 1, 1, 0, 0, 1, 0])
    t = TransformSpec()
    rows = robustness_sweep(gt, views, dec, t, [AttackSpec("identity"), AttackSpec("jpeg")], msg, spec.sampling())
    plain = [bit_accuracy(extract_message(render_image_nograd(gt, v.camera, spec.sampling()), dec, t), msg)
             for v in views]
    assert rows[0]["bit_accuracy"] == np.mean(plain)
    assert len(rows) == 2 and all(0 <= r["bit_accuracy"] <= 1 for r in rows)
