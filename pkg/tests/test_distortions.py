"""Distortion operators: shape preservation, parameter validation, and the
analytic behavior of each kind."""

import numpy as np
import pytest
from scipy import ndimage

from addmark import distortions
from addmark.distortions import DistortionSpec, apply, default_pool, linear_gain, sample_channel
from addmark.tensor import ImageTensor, SeededRng


def _image(seed=0, shape=(3, 16, 16)):
    g = SeededRng(seed).generator
    arr = np.clip(0.5 + 0.15 * g.standard_normal(shape), 0, 1)
    return ImageTensor.from_array(arr, value_range="unit")


def test_all_kinds_preserve_shape():
    img = _image()
    rng = SeededRng(1)
    for kind in distortions.KINDS:
        out = apply(DistortionSpec(kind), img, rng)
        assert out.shape == img.shape, kind


def test_identity_is_noop():
    img = _image()
    out = apply(DistortionSpec("identity"), img)
    assert out is img


def test_unknown_kind_and_params_rejected():
    with pytest.raises(ValueError):
        DistortionSpec("warp")
    with pytest.raises(ValueError):
        DistortionSpec("gaussian_blur", {"kernel": 3})
    with pytest.raises(ValueError):
        DistortionSpec("jpeg_like", {"quality": 0})
    with pytest.raises(ValueError):
        DistortionSpec("center_crop", {"fraction": 0.0})
    with pytest.raises(ValueError):
        DistortionSpec("brightness", {"scale": -1.0})
    with pytest.raises(ValueError):
        DistortionSpec("identity", weight=-0.5)


def test_brightness_and_contrast_closed_form():
    img = _image()
    bright = apply(DistortionSpec("brightness", {"scale": 1.3}), img)
    np.testing.assert_allclose(bright.data, 1.3 * img.data, atol=1e-12)
    contrast = apply(DistortionSpec("contrast", {"scale": 1.3}), img)
    np.testing.assert_allclose(contrast.data, 0.5 + 1.3 * (img.data - 0.5), atol=1e-12)


def test_linear_gain():
    assert linear_gain(DistortionSpec("brightness", {"scale": 1.3})) == 1.3
    assert linear_gain(DistortionSpec("contrast", {"scale": 0.7})) == 0.7
    assert linear_gain(DistortionSpec("gaussian_blur")) == 1.0
    assert linear_gain(DistortionSpec("identity")) == 1.0


def test_blur_preserves_mean_and_reduces_variance():
    img = _image()
    out = apply(DistortionSpec("gaussian_blur", {"sigma": 1.0}), img)
    assert out.data.mean() == pytest.approx(img.data.mean(), abs=1e-3)
    assert out.data.var() < img.data.var()
    # sigma = 0 is a no-op
    out0 = apply(DistortionSpec("gaussian_blur", {"sigma": 0.0}), img)
    np.testing.assert_array_equal(out0.data, img.data)


def test_gaussian_noise_statistics():
    img = _image()
    rng = SeededRng(2)
    out = apply(DistortionSpec("gaussian_noise", {"sigma": 0.1}), img, rng)
    diff = out.data - img.data
    assert diff.std() == pytest.approx(0.1, rel=0.1)
    assert diff.mean() == pytest.approx(0.0, abs=0.02)
    with pytest.raises(ValueError):
        apply(DistortionSpec("gaussian_noise"), img)  # rng required


def test_noise_scales_with_value_range():
    g = SeededRng(3).generator
    arr = np.clip(128 + 30 * g.standard_normal((1, 32, 32)), 0, 255)
    img = ImageTensor.from_array(arr, value_range="byte")
    out = apply(DistortionSpec("gaussian_noise", {"sigma": 0.05}), img, SeededRng(4))
    assert (out.data - img.data).std() == pytest.approx(0.05 * 255, rel=0.1)


def test_rotation_matches_scipy_reference():
    img = _image(shape=(1, 12, 12))
    out = apply(DistortionSpec("rotation", {"angle": 9.0}), img)
    ref = ndimage.rotate(
        img.as_array()[0], 9.0, reshape=False, order=1, mode="reflect"
    )
    np.testing.assert_allclose(out.as_array()[0], ref, atol=1e-12)


def test_center_crop_full_fraction_is_noop():
    img = _image()
    out = apply(DistortionSpec("center_crop", {"fraction": 1.0}), img)
    np.testing.assert_array_equal(out.data, img.data)


def test_center_crop_resizes_back():
    img = _image(shape=(3, 20, 20))
    out = apply(DistortionSpec("center_crop", {"fraction": 0.7}), img)
    assert out.shape == img.shape
    # the crop keeps the central region, so central values stay close
    c_in = img.as_array()[:, 8:12, 8:12].mean()
    c_out = out.as_array()[:, 8:12, 8:12].mean()
    assert abs(c_in - c_out) < 0.1


def test_random_erase_zeroes_expected_area():
    g = SeededRng(0).generator
    img = ImageTensor.from_array(
        0.2 + 0.6 * g.random((2, 40, 40)), value_range="unit"
    )  # strictly positive, so zeros only come from erasure
    out = apply(DistortionSpec("random_erase", {"fraction": 0.1, "count": 1}),
                img, SeededRng(5))
    zeroed = np.sum(out.data == 0.0) / out.data.size
    assert zeroed == pytest.approx(0.1, abs=0.03)
    # erased region is rectangular and equal across channels
    mask = (out.as_array() == 0.0)
    assert np.array_equal(mask[0], mask[1])


def test_jpeg_quality_ordering():
    img = _image(shape=(3, 32, 32))
    errs = []
    for q in (10, 50, 90):
        out = apply(DistortionSpec("jpeg_like", {"quality": q}), img)
        errs.append(np.mean((out.data - img.data) ** 2))
    assert errs[0] > errs[1] > errs[2]


def test_jpeg_non_multiple_of_8_shapes():
    img = _image(shape=(1, 13, 19))
    out = apply(DistortionSpec("jpeg_like", {"quality": 50}), img)
    assert out.shape == (1, 13, 19)


def test_default_pool_and_sampling():
    pool = default_pool()
    assert [s.kind for s in pool] == list(distortions.KINDS)
    assert sum(s.weight for s in pool) == pytest.approx(1.0)
    rng = SeededRng(6)
    draws = [sample_channel(pool, rng).kind for _ in range(900)]
    # every kind appears under equal weights
    assert set(draws) == set(distortions.KINDS)
    with pytest.raises(ValueError):
        sample_channel([], rng)
    with pytest.raises(ValueError):
        sample_channel([DistortionSpec("identity", weight=0.0)], rng)


def test_spec_roundtrip():
    spec = DistortionSpec("gaussian_noise", {"sigma": 0.07}, weight=0.25)
    back = DistortionSpec.from_dict(spec.to_dict())
    assert back.kind == spec.kind
    assert back.params == spec.params
    assert back.weight == spec.weight
