import math

import numpy as np
import pytest

from himosa.errors import ContractError
from himosa.metrics import IDENTICAL, psnr, ssim, to_luma
from himosa.oracle import psnr_oracle, ssim_oracle


def test_luma_weights():
    px = np.array([[[255, 255, 255], [0, 0, 0]]], dtype=np.uint8)
    np.testing.assert_allclose(to_luma(px), [[235.0, 16.0]], atol=1e-12)


def test_identical_images():
    a = np.random.default_rng(0).integers(0, 256, (16, 16, 3), dtype=np.uint8)
    assert psnr(a, a) is IDENTICAL and math.isinf(psnr(a, a))
    assert ssim(a, a) == 1.0


def test_constant_offset_closed_form():
    a = np.full((12, 12), 100.0)
    assert abs(psnr(a, a + 1) - 20 * math.log10(255)) < 1e-12
    assert abs(psnr(a, a + 1) - 48.13) <= 0.01


def test_ssim_inverted_image_is_negative():
    a = np.random.default_rng(1).integers(0, 256, (20, 20)).astype(float)
    assert ssim(a, 255 - a) < 0


@pytest.mark.parametrize("seed", range(3))
@pytest.mark.parametrize("border", [0, 2])
def test_metrics_match_loop_oracles(seed, border):
    rng = np.random.default_rng(seed)
    a = rng.integers(0, 256, (17, 15, 3), dtype=np.uint8)
    b = np.clip(a.astype(int) + rng.integers(-30, 31, a.shape), 0, 255).astype(np.uint8)
    assert abs(psnr(a, b, border) - psnr_oracle(a, b, border)) <= 1e-9
    assert abs(ssim(a, b, border) - ssim_oracle(a, b, border)) <= 1e-9


def test_errors():
    with pytest.raises(ContractError):
        psnr(np.zeros((4, 4)), np.zeros((4, 5)))
    with pytest.raises(ContractError):
        ssim(np.zeros((8, 8)), np.zeros((8, 8)))
    with pytest.raises(ContractError):
        psnr(np.zeros((4, 4)), np.zeros((4, 4)), border=2)
