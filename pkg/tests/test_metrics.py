import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from quantholo.metrics import PSNR_CAP, psnr, ssim


def _img(seed, shape=(32, 32)):
    return np.random.default_rng(seed).random(shape)


def test_psnr_constant_offset_is_20db():
    a = 0.8 * _img(0)
    assert psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-9)


def test_psnr_by_hand():
    a = np.zeros((4, 4))
    b = a.copy()
    b[0, 0] = 1.0  # MSE 1/16
    assert psnr(a, b) == pytest.approx(10 * np.log10(16), rel=1e-12)
    assert psnr(a, b, peak=2.0) == pytest.approx(10 * np.log10(64), rel=1e-12)


def test_identical_images_cap():
    a = _img(1)
    assert psnr(a, a) == PSNR_CAP == 100.0
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)
    # tiny differences still cap at 100 dB
    assert psnr(a, a + 1e-8) == 100.0


def test_ssim_range_and_order():
    a = _img(2)
    noisy = [np.clip(a + s * np.random.default_rng(3).standard_normal(a.shape), 0, 1) for s in (0.01, 0.1, 0.3)]
    vals = [ssim(a, n) for n in noisy]
    assert all(0 <= v <= 1 for v in vals)
    assert vals[0] > vals[1] > vals[2]


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_ssim_symmetric(seed):
    a, b = _img(seed, (16, 20)), _img(seed + 1, (16, 20))
    assert abs(ssim(a, b) - ssim(b, a)) <= 1e-12


def test_ssim_stack_is_mean_of_slices():
    a, b = _img(4, (3, 16, 16)), _img(5, (3, 16, 16))
    assert ssim(a, b) == pytest.approx(np.mean([ssim(x, y) for x, y in zip(a, b)]), rel=1e-12)


def test_shape_mismatch():
    with pytest.raises(ValueError):
        psnr(np.zeros((4, 4)), np.zeros((4, 5)))
    with pytest.raises(ValueError):
        ssim(np.zeros((16, 16)), np.zeros((16, 15)))


def test_ssim_small_images():
    a, b = _img(6, (8, 8)), _img(7, (8, 8))
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)
    assert 0 <= ssim(a, b) < 1 and ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)
    with pytest.raises(ValueError):
        ssim(np.zeros((2, 8)), np.zeros((2, 8)))
