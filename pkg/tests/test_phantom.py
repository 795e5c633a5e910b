"""Phantom generation and Hankel rank experiment tests."""

import numpy as np
import numpy.testing as npt
import pytest

from smartmap.errors import ConfigError, DataError
from smartmap.fitting import bi_model, mono_model
from smartmap.phantom import (
    PhantomSpec,
    RankExperimentConfig,
    estimate_rank,
    generate_phantom,
    hankel_ranks,
    rank_experiment,
    tube_masks,
    undersample_experiment,
)
from smartmap.solver import PatchConfig, ReconConfig, reconstruct, zero_filled

SMALL = dict(
    grid=(64, 64),
    centers=((16.0, 16.0), (16.0, 48.0), (48.0, 32.0)),
    radii=(8.0, 8.0, 8.0),
    t1rho=(40.0, 60.0, 80.0),
    t_short=(10.0, 12.0, 14.0),
)


def test_phantom_spec_defaults():
    spec = PhantomSpec()
    assert spec.n_tubes == 5
    assert len(spec.centers) == 5 and len(spec.radii) == 5
    for (cy, cx), r in zip(spec.centers, spec.radii):
        assert r <= cy <= spec.grid[0] - 1 - r
        assert r <= cx <= spec.grid[1] - 1 - r


def test_phantom_spec_validation():
    with pytest.raises(ConfigError):
        PhantomSpec(grid=(4, 4))
    with pytest.raises(ConfigError):
        PhantomSpec(model="tri")
    with pytest.raises(ConfigError):
        PhantomSpec(**{**SMALL, "centers": ((16.0, 16.0), (16.0, 20.0), (48.0, 32.0))})
    with pytest.raises(ConfigError):
        PhantomSpec(**{**SMALL, "centers": ((4.0, 16.0), (16.0, 48.0), (48.0, 32.0))})
    with pytest.raises(ConfigError):
        PhantomSpec(**{**SMALL, "radii": (8.0, 8.0)})


def test_generate_phantom_mono_values():
    spec = PhantomSpec(**SMALL)
    x, maps = generate_phantom(spec)
    assert x.data.shape == (64, 64, 5)
    masks = tube_masks(spec)
    outside = ~np.any(masks, axis=0)
    npt.assert_array_equal(x.data[outside], 0.0)
    assert (maps["labels"][outside] == -1).all()
    for i, m in enumerate(masks):
        want = mono_model(spec.tube_params(i), spec.tsl_ms)
        npt.assert_allclose(x.data[m], np.broadcast_to(want, (int(m.sum()), 5)))
        assert (maps["labels"][m] == i).all()
        npt.assert_allclose(maps["t1rho"][m], spec.t1rho[i])
        npt.assert_allclose(maps["m0"][m], spec.m0)


def test_generate_phantom_bi_values():
    spec = PhantomSpec(**SMALL, model="bi")
    x, maps = generate_phantom(spec)
    assert "t1rho_short" in maps and "alpha" in maps
    m = tube_masks(spec)[1]
    want = bi_model(spec.tube_params(1), spec.tsl_ms)
    npt.assert_allclose(x.data[m], np.broadcast_to(want, (int(m.sum()), 5)))
    npt.assert_allclose(maps["alpha"][m], spec.alpha)


def test_tube_masks_disjoint():
    masks = tube_masks(PhantomSpec())
    stacked = np.asarray(masks).astype(int).sum(axis=0)
    assert stacked.max() <= 1
    assert all(m.any() for m in masks)


def test_estimate_rank():
    assert estimate_rank(np.zeros((4, 4)), 0.01) == 0
    assert estimate_rank(np.eye(3), 0.5) == 3
    assert estimate_rank(np.diag([1.0, 0.1, 0.001]), 0.05) == 2
    with pytest.raises(ConfigError):
        estimate_rank(np.eye(2), 0.0)
    with pytest.raises(ConfigError):
        estimate_rank(np.eye(2), 1.0)


def test_hankel_ranks_noiseless_models():
    """Noiseless mono tubes are block rank 1 at the 1% ratio.

    The two-component model splits into rank 2 only when the short
    component is visible: with the first tube's parameters on a
    uniform 20 ms time grid its second singular value sits just above
    the 1% ratio, while the production non-uniform grid stays below.
    """
    mono, _ = generate_phantom(PhantomSpec(**SMALL))
    for roi in tube_masks(PhantomSpec(**SMALL)):
        pixel, block = hankel_ranks(mono, roi, 0.01)
        assert block == 1
        assert (pixel == 1).all()
    uniform = PhantomSpec(model="bi", tsl_ms=(1.0, 21.0, 41.0, 61.0, 81.0))
    bi, _ = generate_phantom(uniform)
    _, block = hankel_ranks(bi, tube_masks(uniform)[0], 0.01)
    assert block == 2
    default = PhantomSpec(model="bi")
    bi, _ = generate_phantom(default)
    _, block = hankel_ranks(bi, tube_masks(default)[0], 0.01)
    assert block == 1


def test_hankel_ranks_validation():
    x, _ = generate_phantom(PhantomSpec(**SMALL))
    with pytest.raises(DataError):
        hankel_ranks(x, np.zeros((64, 64), dtype=bool), 0.01)
    with pytest.raises(DataError):
        hankel_ranks(x, np.ones((32, 32), dtype=bool), 0.01)


def test_rank_experiment_config_validation():
    with pytest.raises(ConfigError):
        RankExperimentConfig(seed=None)
    with pytest.raises(ConfigError):
        RankExperimentConfig(seed=1, runs=0)
    with pytest.raises(ConfigError):
        RankExperimentConfig(seed=1, ratio=1.5)
    with pytest.raises(ConfigError):
        RankExperimentConfig(seed=1, snrs=(30.0, -1.0))
    assert RankExperimentConfig(seed=1, runs=1000).runs == 1000


def test_rank_experiment_rows_and_determinism():
    spec = PhantomSpec(**SMALL)
    cfg = RankExperimentConfig(seed=17, snrs=(35.0, 50.0), runs=3)
    rows = rank_experiment(spec, cfg)
    assert len(rows) == spec.n_tubes * 2
    for row in rows:
        assert set(row) == {"tube_id", "snr", "mean_pixel_rank", "block_rank", "stderr_pixel_rank", "runs", "seed"}
        assert 1 <= row["tube_id"] <= spec.n_tubes
        assert row["runs"] == 3 and row["seed"] == 17
        assert row["mean_pixel_rank"] >= 1.0 and row["block_rank"] >= 1.0
    assert rows == rank_experiment(spec, cfg)


def test_undersample_experiment_outputs():
    spec = PhantomSpec(**SMALL)
    y, truth, maps = undersample_experiment(spec, 4, seed=21)
    assert y.grid == spec.grid and y.n_coils == 1
    unsampled = ~np.broadcast_to(y.mask.data[..., None, :], y.data.shape)
    npt.assert_array_equal(y.data[unsampled], 0.0)
    assert truth.data.shape == (64, 64, 5)
    assert set(maps) == {"labels", "m0", "t1rho"}
    noisy, _, _ = undersample_experiment(spec, 4, seed=21, snr=30.0)
    npt.assert_array_equal(noisy.data[unsampled], 0.0)
    assert not np.array_equal(noisy.data, y.data)


def test_undersampled_recon_beats_zero_filling_and_ablations():
    """At heavy 1D aliasing the coupled prior reduces the image error.

    Three runs off the same seed: the coupled mode must beat plain
    zero-filling and stay at or below either single-prior ablation.
    """
    spec = PhantomSpec(**SMALL)
    y, truth, _ = undersample_experiment(spec, 4, seed=21)
    errs = {}
    for mode in ("smart", "spatial_only", "parametric_only"):
        cfg = ReconConfig(
            admm_iters=6, n_groups=12, mode=mode, patch=PatchConfig(b=6, stride=3, r=8, n_p_max=12)
        )
        res = reconstruct(y, None, cfg, verbose=False)
        errs[mode] = np.linalg.norm(np.abs(res.x.data) - np.abs(truth.data))
    err_zf = np.linalg.norm(np.abs(zero_filled(y).data) - np.abs(truth.data))
    assert errs["smart"] < err_zf, f"smart {errs['smart']:.4f} vs zero-filled {err_zf:.4f}"
    assert errs["smart"] <= errs["spatial_only"], errs
    assert errs["smart"] <= errs["parametric_only"], errs
