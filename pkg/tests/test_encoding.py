"""Acquisition model tests: FFT conventions, operators, masks, noise."""

import numpy as np
import numpy.testing as npt
import pytest

from smartmap.encoding import (
    CoilSensitivities,
    ImageSeries,
    KSpaceData,
    SamplingMask,
    add_noise,
    adjoint,
    fft_centered,
    forward,
    ifft_centered,
    make_mask_1d,
    make_mask_poisson,
)
from smartmap.errors import ConfigError, DataError

TSL = (1.0, 20.0, 40.0, 60.0, 80.0)


def _series(rng, grid=(16, 16), n_tsl=5):
    data = rng.standard_normal((*grid, n_tsl)) + 1j * rng.standard_normal((*grid, n_tsl))
    return ImageSeries(data=data, tsl_ms=TSL[:n_tsl])


def _full_mask(grid, n_tsl):
    return SamplingMask(data=np.ones((*grid, n_tsl), dtype=bool), r_requested=1.0)


def test_image_series_validation():
    with pytest.raises(DataError):
        ImageSeries(data=np.zeros((8, 5)), tsl_ms=TSL)
    with pytest.raises(DataError):
        ImageSeries(data=np.zeros((8, 8, 4)), tsl_ms=TSL)
    with pytest.raises(DataError):
        ImageSeries(data=np.zeros((8, 8, 2)), tsl_ms=(2.0, 1.0))
    with pytest.raises(DataError):
        ImageSeries(data=np.zeros((8, 8, 1)), tsl_ms=(1.0,))
    x = ImageSeries(data=np.zeros((8, 9, 5)), tsl_ms=TSL)
    assert x.grid == (8, 9) and x.n_tsl == 5


def test_fft_round_trip_and_parseval():
    rng = np.random.default_rng(3)
    for grid in ((16, 16), (8, 12, 10)):
        arr = rng.standard_normal(grid) + 1j * rng.standard_normal(grid)
        axes = tuple(range(len(grid)))
        k = fft_centered(arr, axes)
        npt.assert_allclose(ifft_centered(k, axes), arr, atol=1e-12)
        npt.assert_allclose(np.linalg.norm(k), np.linalg.norm(arr), rtol=1e-12)


def test_fft_dc_location():
    """A constant image concentrates all energy at index n // 2."""
    n = 12
    arr = np.ones((n, n), dtype=complex)
    k = fft_centered(arr, (0, 1))
    peak = np.unravel_index(np.argmax(np.abs(k)), k.shape)
    assert peak == (n // 2, n // 2)
    off = np.abs(k).copy()
    off[peak] = 0.0
    npt.assert_allclose(off, 0.0, atol=1e-12)


def test_forward_full_mask_inverts():
    """With a full mask and identity coils, adjoint(forward(x)) == x."""
    rng = np.random.default_rng(5)
    x = _series(rng)
    y = forward(x, None, _full_mask(x.grid, x.n_tsl))
    npt.assert_allclose(adjoint(y).data, x.data, atol=1e-12)


def test_forward_zeroes_unsampled():
    rng = np.random.default_rng(7)
    x = _series(rng)
    mask = make_mask_1d(x.grid, 2, seed=0, n_tsl=x.n_tsl)
    y = forward(x, None, mask)
    assert y.data.shape == (*x.grid, 1, x.n_tsl)
    unsampled = ~np.broadcast_to(mask.data[..., None, :], y.data.shape)
    npt.assert_array_equal(y.data[unsampled], 0.0)


def test_forward_adjoint_dot_product():
    """<E x, y> == <x, E^H y> with random multi-coil data."""
    rng = np.random.default_rng(11)
    for _ in range(10):
        grid = (int(rng.integers(8, 17)), int(rng.integers(8, 17)))
        n_tsl, n_coils = 3, int(rng.integers(1, 4))
        x = _series(rng, grid, n_tsl)
        maps = rng.standard_normal((n_coils, *grid)) + 1j * rng.standard_normal((n_coils, *grid))
        s = CoilSensitivities(maps)
        mask = SamplingMask(data=rng.random((*grid, n_tsl)) < 0.4, r_requested=2.5)
        y = KSpaceData(
            data=(rng.standard_normal((*grid, n_coils, n_tsl)) + 1j * rng.standard_normal((*grid, n_coils, n_tsl)))
            * mask.data[..., None, :],
            mask=mask,
            tsl_ms=TSL[:n_tsl],
        )
        lhs = np.vdot(y.data, forward(x, s, mask).data)
        rhs = np.vdot(adjoint(y, s).data, x.data)
        scale = np.linalg.norm(x.data) * np.linalg.norm(y.data)
        assert abs(lhs - rhs) <= 1e-10 * scale


def test_forward_grid_mismatch():
    rng = np.random.default_rng(13)
    x = _series(rng, (16, 16))
    with pytest.raises(DataError):
        forward(x, None, _full_mask((8, 8), x.n_tsl))
    s = CoilSensitivities(np.ones((1, 8, 8), dtype=complex))
    with pytest.raises(DataError):
        forward(x, s, _full_mask(x.grid, x.n_tsl))


def test_kspace_validation():
    mask = _full_mask((8, 8), 2)
    with pytest.raises(DataError):
        KSpaceData(data=np.zeros((8, 8, 2)), mask=mask, tsl_ms=(1.0, 2.0))
    with pytest.raises(DataError):
        KSpaceData(data=np.zeros((8, 9, 1, 2)), mask=mask, tsl_ms=(1.0, 2.0))


def test_mask_1d_geometry():
    """Line budget, fully kept center block, and lines along axis 0."""
    grid, n_tsl = (384, 384), 3
    mask = make_mask_1d(grid, 4, center_lines=24, seed=7, n_tsl=n_tsl)
    assert mask.data.shape == (*grid, n_tsl) and mask.data.dtype == bool
    c0 = grid[0] // 2 - 12
    for t in range(n_tsl):
        lines = mask.data[:, 0, t]
        npt.assert_array_equal(mask.data[..., t], lines[:, None] * np.ones(grid[1], dtype=bool))
        assert lines.sum() == 96
        assert lines[c0 : c0 + 24].all()
    assert mask.r_requested == 4.0
    assert mask.r_achieved == pytest.approx(4.0)
    assert mask.meta == {"kind": "1d", "center_lines": 24}


def test_mask_1d_default_center_and_per_tsl_patterns():
    mask = make_mask_1d((192, 192), 4, seed=5, n_tsl=4)
    assert mask.meta["center_lines"] == 192 // 16
    patterns = [mask.data[:, 0, t] for t in range(4)]
    assert any(not np.array_equal(patterns[0], p) for p in patterns[1:])


def test_mask_1d_reproducible():
    a = make_mask_1d((64, 64), 3, seed=9, n_tsl=2)
    b = make_mask_1d((64, 64), 3, seed=9, n_tsl=2)
    c = make_mask_1d((64, 64), 3, seed=10, n_tsl=2)
    npt.assert_array_equal(a.data, b.data)
    assert not np.array_equal(a.data, c.data)


def test_mask_1d_invalid():
    with pytest.raises(ConfigError):
        make_mask_1d((64, 64), 0.5, seed=0)
    with pytest.raises(ConfigError):
        make_mask_1d((64, 64), 16, center_lines=32, seed=0)
    with pytest.raises(ConfigError):
        make_mask_1d((64, 64), 4, center_lines=-1, seed=0)


def test_mask_poisson_geometry():
    grid = (64, 64)
    mask = make_mask_poisson(grid, 4, seed=3, n_tsl=2)
    assert mask.data.shape == (*grid, 2)
    assert mask.r_achieved == pytest.approx(4.0)
    radius = mask.meta["center_radius"]
    ii, jj = np.mgrid[0 : grid[0], 0 : grid[1]]
    dist = np.hypot(ii - grid[0] // 2, jj - grid[1] // 2)
    for t in range(2):
        assert mask.data[..., t][dist <= radius].all()
        assert int(mask.data[..., t].sum()) == grid[0] * grid[1] // 4


def test_mask_poisson_min_distance_floor():
    """Sampled points outside the center keep the calibrated spacing."""
    grid = (64, 64)
    mask = make_mask_poisson(grid, 6, seed=13, n_tsl=1)
    r0 = mask.meta["r0"][0]
    assert r0 > 0
    radius = mask.meta["center_radius"]
    center = (grid[0] // 2, grid[1] // 2)
    pts = np.argwhere(mask.data[..., 0])
    outside = pts[np.hypot(pts[:, 0] - center[0], pts[:, 1] - center[1]) > radius]
    diff = outside[:, None, :] - outside[None, :, :]
    d2 = (diff**2).sum(axis=-1).astype(float)
    np.fill_diagonal(d2, np.inf)
    assert np.sqrt(d2.min()) >= r0 - 1e-9


def test_mask_poisson_full_and_invalid():
    full = make_mask_poisson((32, 32), 1, seed=0)
    assert full.data.all()
    with pytest.raises(ConfigError):
        make_mask_poisson((32, 32, 32), 4, seed=0)
    with pytest.raises(ConfigError):
        make_mask_poisson((32, 32), 40, center_radius=12, seed=0)


def test_add_noise_image_series():
    rng = np.random.default_rng(17)
    x = ImageSeries(data=np.ones((48, 48, 3), dtype=complex), tsl_ms=TSL[:3])
    noisy = add_noise(x, 20.0, seed=21)
    delta = noisy.data - x.data
    sigma = np.mean(np.abs(x.data)) / 20.0
    assert abs(np.sqrt(np.mean(np.abs(delta) ** 2)) - sigma) < 0.05 * sigma
    npt.assert_array_equal(add_noise(x, 20.0, seed=21).data, noisy.data)
    assert not np.array_equal(add_noise(x, 20.0, seed=22).data, noisy.data)
    del rng


def test_add_noise_kspace_respects_mask():
    rng = np.random.default_rng(19)
    x = _series(rng, (32, 32), 3)
    mask = make_mask_1d(x.grid, 3, seed=2, n_tsl=3)
    y = forward(x, None, mask)
    noisy = add_noise(y, 10.0, seed=4)
    unsampled = ~np.broadcast_to(mask.data[..., None, :], y.data.shape)
    npt.assert_array_equal(noisy.data[unsampled], 0.0)
    assert not np.array_equal(noisy.data[~unsampled], y.data[~unsampled])


def test_add_noise_invalid():
    x = ImageSeries(data=np.ones((8, 8, 2), dtype=complex), tsl_ms=(1.0, 2.0))
    with pytest.raises(ConfigError):
        add_noise(x, 0.0, seed=0)
    with pytest.raises(DataError):
        add_noise(np.ones((8, 8, 2)), 10.0, seed=0)


def test_fft_of_point_source_is_flat():
    """One bright voxel spreads to constant magnitude 1/sqrt(N)."""
    img = np.zeros((16, 16), dtype=complex)
    img[5, 9] = 1.0
    k = fft_centered(img, (0, 1))
    npt.assert_allclose(np.abs(k), 1.0 / 16.0, atol=1e-12)


def test_mask_poisson_fractional_acceleration():
    """A fractional target on an uneven grid lands within 5 percent."""
    grid = (216, 86)
    m = make_mask_poisson(grid, 6.76, seed=3)
    n_points = int(m.data[..., 0].sum())
    achieved = grid[0] * grid[1] / n_points
    assert 6.42 <= achieved <= 7.10, achieved


def test_add_noise_std_tracks_snr():
    """Complex noise std is mean magnitude over snr, here 1/50."""
    x = ImageSeries(np.ones((60, 60, 3), dtype=complex), (1.0, 2.0, 3.0))
    noisy = add_noise(x, 50.0, seed=0)
    delta = noisy.data - x.data
    assert delta.size >= 10_000
    std = np.std(delta)
    assert abs(std - 0.02) <= 0.05 * 0.02, std
