import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st
from skimage.metrics import structural_similarity

from gsmvps.metrics import normal_mae, psnr, ssim, ssim_map


def test_psnr_identical_is_capped(rng):
    a = rng.uniform(size=(8, 8, 3))
    assert psnr(a, a) == 99.0


@pytest.mark.parametrize("mse,db", [(0.01, 20.0), (1e-4, 40.0)])
def test_psnr_formula(mse, db):
    a = np.zeros((4, 4, 3))
    assert psnr(a, a + np.sqrt(mse)) == pytest.approx(db, abs=1e-9)


@given(st.integers(0, 2**31 - 1))
def test_psnr_symmetric(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(size=(5, 6, 3)), rng.uniform(size=(5, 6, 3))
    assert psnr(a, b) == psnr(b, a) >= 0


def test_shape_mismatch():
    with pytest.raises(ValueError):
        psnr(np.zeros((2, 2)), np.zeros((2, 3)))
    with pytest.raises(ValueError):
        ssim(np.zeros((2, 2)), np.zeros((2, 3)))


def test_ssim_identical(rng):
    a = rng.uniform(size=(20, 20, 3))
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)


def test_ssim_constant_images():
    a = np.full((16, 16, 3), 0.5)
    assert ssim(a, a.copy()) == pytest.approx(1.0, abs=1e-12)


def test_ssim_negative_is_anticorrelated():
    x = np.linspace(0, 1, 32)
    a = np.stack([np.add.outer(np.sin(6 * x), np.cos(5 * x)) * 0.25 + 0.5] * 3, -1)
    assert ssim(a, 1 - a) < 0


@given(st.integers(0, 2**31 - 1))
def test_ssim_range(seed):
    rng = np.random.default_rng(seed)
    v = ssim(rng.uniform(size=(12, 12, 3)), rng.uniform(size=(12, 12, 3)))
    assert -1 <= v <= 1


def test_ssim_interior_matches_reference(rng):
    # independent implementation; borders differ only by padding convention
    a = rng.uniform(size=(40, 36))
    b = np.clip(a + rng.normal(scale=0.1, size=a.shape), 0, 1)
    ours = ssim_map(torch.as_tensor(a), torch.as_tensor(b))[..., 0].numpy()
    _, ref = structural_similarity(a, b, gaussian_weights=True, sigma=1.5, use_sample_covariance=False,
                                   data_range=1.0, full=True)
    np.testing.assert_allclose(ours[5:-5, 5:-5], ref[5:-5, 5:-5], atol=1e-10)


def unit_field(rng, shape):
    n = rng.normal(size=shape + (3,))
    return n / np.linalg.norm(n, axis=-1, keepdims=True)


def perpendicular(n):
    p = np.cross(n, [0.3, 0.5, 0.8])
    return p / np.linalg.norm(p, axis=-1, keepdims=True)


def test_normal_mae_cases(rng):
    n = unit_field(rng, (6, 6))
    mask = np.ones((6, 6), dtype=bool)
    assert normal_mae(n, n, mask) == pytest.approx(0.0, abs=1e-6)
    assert normal_mae(n, perpendicular(n), mask) == pytest.approx(90.0, abs=1e-9)
    assert normal_mae(n, -n, mask) == pytest.approx(180.0, abs=1e-6)


def test_normal_mae_uses_mask(rng):
    n = unit_field(rng, (4, 4))
    other = n.copy()
    other[0, 0] = -n[0, 0]
    mask = np.ones((4, 4), dtype=bool)
    mask[0, 0] = False
    assert normal_mae(n, other, mask) == pytest.approx(0.0, abs=1e-6)


def test_normal_mae_empty_mask(rng):
    n = unit_field(rng, (3, 3))
    with pytest.raises(ValueError):
        normal_mae(n, n, np.zeros((3, 3), dtype=bool))


@given(st.integers(0, 2**31 - 1))
def test_normal_mae_range(seed):
    rng = np.random.default_rng(seed)
    v = normal_mae(unit_field(rng, (5, 5)), unit_field(rng, (5, 5)), np.ones((5, 5), dtype=bool))
    assert 0 <= v <= 180
