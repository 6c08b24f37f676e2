import math

import numpy as np
import pytest

from fedprior.exceptions import ConfigError, ShapeError
from fedprior.imaging import (
    ImagingOperator,
    adjoint_op,
    data_consistency,
    data_consistency_error,
    dft2,
    forward_op,
    from_channels,
    gen_coils,
    gen_vd_mask,
    idft2,
    psnr,
    ssim,
    to_channels,
)


def _rand_complex(rng, shape):
    return rng.normal(size=shape) + 1j * rng.normal(size=shape)


def test_dft_of_constant_is_centered_spike():
    k = dft2(np.full((8, 8), 0.7))
    expected = np.zeros((8, 8), complex)
    expected[4, 4] = 0.7 * 8
    np.testing.assert_allclose(k, expected, atol=1e-12)


def test_dft_of_centered_delta_is_flat():
    img = np.zeros((8, 4))
    img[4, 2] = 1.0
    np.testing.assert_allclose(np.abs(dft2(img)), np.full((8, 4), 1 / math.sqrt(32)), atol=1e-12)


def test_dft_roundtrip_and_energy():
    x = _rand_complex(np.random.default_rng(0), (16, 16))
    k = dft2(x)
    assert abs(np.linalg.norm(k) - np.linalg.norm(x)) < 1e-10
    np.testing.assert_allclose(idft2(k), x, atol=1e-10)


def test_dft_rejects_tiny_images():
    with pytest.raises(ShapeError):
        dft2(np.zeros((1, 4)))


def test_mask_example_8x8_r4():
    m = gen_vd_mask(8, 8, 4, a=1, seed=3)
    assert m.sum() == 16
    assert np.all(m[3:5, 3:5] == 1)


def test_mask_r1_is_full():
    assert np.all(gen_vd_mask(16, 16, 1, seed=0) == 1)


def test_mask_deterministic_by_seed():
    assert np.array_equal(gen_vd_mask(32, 32, 4, seed=5), gen_vd_mask(32, 32, 4, seed=5))
    assert not np.array_equal(gen_vd_mask(32, 32, 4, seed=5), gen_vd_mask(32, 32, 4, seed=6))


def test_mask_budget_below_acs_is_config_error():
    with pytest.raises(ConfigError):
        gen_vd_mask(8, 8, 16, a=2)


def test_mask_prefers_center():
    masks = np.stack([gen_vd_mask(32, 32, 8, seed=s) for s in range(50)])
    density = masks.mean(axis=0)
    assert density[12:20, 12:20].mean() > density[:4, :4].mean()


def test_single_coil_is_unit():
    np.testing.assert_array_equal(gen_coils(8, 8, 1), np.ones((1, 8, 8)))


@pytest.mark.parametrize("nc", [2, 4, 8])
def test_coils_unit_sum_of_squares(nc):
    c = gen_coils(16, 16, nc, seed=2)
    np.testing.assert_allclose((np.abs(c) ** 2).sum(axis=0), 1.0, atol=1e-10)
    assert np.array_equal(c, gen_coils(16, 16, nc, seed=2))


def test_forward_full_mask_single_coil_is_dft():
    x = _rand_complex(np.random.default_rng(1), (8, 8))
    A = ImagingOperator(np.ones((8, 8)), gen_coils(8, 8, 1))
    np.testing.assert_allclose(forward_op(x, A)[0], dft2(x), atol=1e-12)
    np.testing.assert_allclose(adjoint_op(forward_op(x, A), A), x, atol=1e-12)


def test_forward_of_zero_is_zero():
    A = ImagingOperator(gen_vd_mask(8, 8, 2, a=1), gen_coils(8, 8, 3))
    assert not np.any(forward_op(np.zeros((8, 8)), A))


def test_adjoint_full_mask_multicoil_inverts():
    x = _rand_complex(np.random.default_rng(2), (16, 16))
    A = ImagingOperator(np.ones((16, 16)), gen_coils(16, 16, 4, seed=1))
    np.testing.assert_allclose(adjoint_op(forward_op(x, A), A), x, atol=1e-10)


def test_unsampled_kspace_is_exactly_zero():
    A = ImagingOperator(gen_vd_mask(16, 16, 4, seed=0), gen_coils(16, 16, 2))
    y = forward_op(_rand_complex(np.random.default_rng(3), (16, 16)), A)
    assert np.all(y[:, A.mask == 0] == 0)


def test_operator_shape_checks():
    with pytest.raises(ShapeError):
        ImagingOperator(np.ones((8, 8)), np.ones((1, 4, 4)))
    A = ImagingOperator(np.ones((8, 8)), gen_coils(8, 8, 1))
    with pytest.raises(ShapeError):
        forward_op(np.zeros((4, 4)), A)
    with pytest.raises(ShapeError):
        adjoint_op(np.zeros((2, 8, 8)), A)


def _dc_setup(nc=1, seed=0):
    rng = np.random.default_rng(seed)
    masks = np.stack([gen_vd_mask(16, 16, 4, seed=seed + i) for i in range(2)])
    coils = gen_coils(16, 16, nc, seed=seed)
    ref = _rand_complex(rng, (2, 16, 16))
    y = masks[:, None] * dft2(coils * ref[:, None])
    x = _rand_complex(rng, (2, 16, 16))
    return x, y, masks, coils, ref


def test_dc_zero_mu_is_identity():
    x, y, masks, coils, _ = _dc_setup()
    out = data_consistency(to_channels(x), np.array(-np.inf), y, masks, coils).data
    np.testing.assert_allclose(from_channels(out), x, atol=1e-12)


def test_dc_hard_substitutes_measurements():
    x, y, masks, coils, _ = _dc_setup()
    out = from_channels(data_consistency(to_channels(x), None, y, masks, coils).data)
    for b in range(2):
        A = ImagingOperator(masks[b], coils)
        assert data_consistency_error(out[b], y[b], A) < 1e-12
        # unsampled frequencies untouched
        unsampled = masks[b] == 0
        np.testing.assert_allclose(dft2(out[b])[unsampled], dft2(x[b])[unsampled], atol=1e-12)


def test_dc_soft_matches_weighted_kspace_average():
    x, y, masks, coils, _ = _dc_setup()
    mu = 0.3
    out = from_channels(data_consistency(to_channels(x), np.array(np.log(mu)), y, masks, coils).data)
    k, kx = dft2(out), dft2(x)
    s = masks == 1
    np.testing.assert_allclose(k[s], (kx[s] + mu * y[:, 0][s]) / (1 + mu), atol=1e-12)


@pytest.mark.parametrize("log_mu", [None, -3.0, 0.0, 2.0])
def test_dc_fixed_point_for_consistent_input(log_mu):
    _, y, masks, coils, ref = _dc_setup(nc=1)
    lm = None if log_mu is None else np.array(log_mu)
    out = from_channels(data_consistency(to_channels(ref), lm, y, masks, coils).data)
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_psnr_examples():
    x = np.random.default_rng(0).uniform(size=(8, 8))
    assert psnr(x, x) == math.inf
    assert psnr(np.zeros((4, 4)), np.full((4, 4), 0.1)) == pytest.approx(20.0, abs=1e-9)
    assert psnr(np.zeros((4, 4)), np.full((4, 4), 0.5)) == pytest.approx(20 * math.log10(2), abs=1e-9)


def test_psnr_monotone_in_noise_scale():
    rng = np.random.default_rng(1)
    x, e = rng.uniform(size=(16, 16)), rng.normal(size=(16, 16))
    vals = [psnr(x, x + s * e) for s in (0.01, 0.02, 0.05, 0.1)]
    assert all(a > b for a, b in zip(vals, vals[1:]))


def test_ssim_examples():
    rng = np.random.default_rng(2)
    x = rng.uniform(size=(16, 16))
    assert ssim(x, x) == pytest.approx(1.0, abs=1e-12)
    checker = (np.indices((16, 16)).sum(axis=0) % 2).astype(float)
    assert ssim(checker, 1 - checker) < 0
    a, b = 0.2, 0.7
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    closed = ((2 * a * b + c1) * c2) / ((a * a + b * b + c1) * c2)
    assert ssim(np.full((8, 8), a), np.full((8, 8), b)) == pytest.approx(closed, abs=1e-9)


def test_ssim_too_small_image():
    with pytest.raises(ConfigError):
        ssim(np.zeros((6, 6)), np.zeros((6, 6)))


def test_psnr_roundoff_counts_as_exact():
    x = _rand_complex(np.random.default_rng(4), (16, 16)) * 0.3
    roundtrip = idft2(dft2(x))
    assert not np.array_equal(roundtrip, x)
    assert psnr(x, roundtrip) == math.inf
    assert math.isfinite(psnr(x, x + 1e-12))
