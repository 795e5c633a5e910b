"""Tissue partition and Hankel operator tests."""

import numpy as np
import numpy.testing as npt
import pytest

from smartmap.encoding import ImageSeries
from smartmap.errors import ConfigError, DataError
from smartmap.parametric import (
    HankelSpec,
    anti_diagonal_multiplicity,
    build_hankel,
    cluster_tissues,
    extract_parametric_tensors,
    hankel_adjoint,
    hankel_scatter_sum,
    multiplicity_counts,
    support_mask,
)

TSL = (1.0, 20.0, 40.0, 60.0, 80.0)


def _series(rng, grid=(8, 8), n_tsl=5):
    data = rng.standard_normal((*grid, n_tsl)) + 1j * rng.standard_normal((*grid, n_tsl))
    return ImageSeries(data=data, tsl_ms=TSL[:n_tsl])


def _partition(rng, grid, n_groups=3):
    t1rho = rng.uniform(20.0, 120.0, size=grid)
    support = rng.random(grid) < 0.7
    support.flat[0] = True
    return cluster_tissues(t1rho, support, n_groups)


def test_hankel_spec_layout():
    assert HankelSpec.default(5).k == 3
    assert HankelSpec.default(4).k == 2
    spec = HankelSpec(k=3)
    assert spec.rows(5) == 3
    npt.assert_array_equal(spec.index_matrix(5), [[0, 1, 2], [1, 2, 3], [2, 3, 4]])
    with pytest.raises(ConfigError):
        HankelSpec(k=0)
    with pytest.raises(ConfigError):
        spec.rows(2)


def test_build_hankel_values():
    sig = np.array([10.0, 20.0, 30.0, 40.0, 50.0])
    h = build_hankel(sig, HankelSpec(k=3))
    npt.assert_array_equal(h, [[10, 20, 30], [20, 30, 40], [30, 40, 50]])
    with pytest.raises(DataError):
        build_hankel(np.ones((2, 3)), HankelSpec(k=2))


def test_exponential_hankel_ranks():
    """On an even time grid one rate gives rank 1, two rates rank 2.

    Geometric sequences factor the Hankel matrix into an outer
    product, so the exact ranks are algebraic facts here; uneven
    spin-lock spacing only perturbs them below a ratio threshold.
    """
    t = np.arange(5) * 20.0 + 20.0
    mono = np.exp(-t / 50.0)
    h1 = build_hankel(mono, HankelSpec(k=3))
    s = np.linalg.svd(h1, compute_uv=False)
    assert s[1] < 1e-12 * s[0]
    bi = 0.6 * np.exp(-t / 50.0) + 0.4 * np.exp(-t / 10.0)
    h2 = build_hankel(bi, HankelSpec(k=3))
    s = np.linalg.svd(h2, compute_uv=False)
    assert s[1] > 1e-6 * s[0] and s[2] < 1e-10 * s[0]
    uneven = np.exp(-np.asarray(TSL) / 50.0)
    s = np.linalg.svd(build_hankel(uneven, HankelSpec(k=3)), compute_uv=False)
    assert s[1] < 0.01 * s[0]


def test_anti_diagonal_multiplicity_counts():
    npt.assert_array_equal(anti_diagonal_multiplicity(HankelSpec(k=3), 5), [1, 2, 3, 2, 1])
    npt.assert_array_equal(anti_diagonal_multiplicity(HankelSpec(k=2), 4), [1, 2, 2, 1])
    spec = HankelSpec(k=4)
    counts = anti_diagonal_multiplicity(spec, 6)
    assert counts.sum() == spec.rows(6) * spec.k


def test_support_mask_threshold():
    data = np.zeros((4, 4, 2), dtype=complex)
    data[0, 0, 0] = 10.0
    data[1, 1, 0] = 0.6
    data[2, 2, 0] = 0.4
    x = ImageSeries(data=data, tsl_ms=(1.0, 2.0))
    sup = support_mask(x, threshold_frac=0.05)
    assert sup[0, 0] and sup[1, 1] and not sup[2, 2]
    zero = ImageSeries(data=np.zeros((4, 4, 2), dtype=complex), tsl_ms=(1.0, 2.0))
    assert not support_mask(zero).any()


def test_cluster_tissues_bins():
    grid = (6, 6)
    t1rho = np.zeros(grid)
    support = np.zeros(grid, dtype=bool)
    values = np.linspace(20.0, 80.0, 18)
    support.reshape(-1)[: values.size] = True
    t1rho.reshape(-1)[: values.size] = values
    part = cluster_tissues(t1rho, support, 4)
    assert part.n_groups == 4
    assert part.labels.shape == grid
    assert (part.labels[~support] == -1).all()
    labs = part.labels[support]
    assert labs.min() >= 0 and labs.max() <= 3
    order = np.argsort(values)
    assert (np.diff(labs[order]) >= 0).all()
    assert len(part.edges) == 5
    assert part.populated_labels == sorted(set(labs.tolist()))


def test_cluster_tissues_constant_map():
    grid = (5, 5)
    support = np.ones(grid, dtype=bool)
    part = cluster_tissues(np.full(grid, 42.0), support, 6)
    assert part.populated_labels == [0]
    assert (part.labels == 0).all()


def test_cluster_tissues_outliers_clamped():
    grid = (20, 20)
    rng = np.random.default_rng(3)
    t1rho = rng.uniform(40.0, 60.0, size=grid)
    t1rho[0, 0] = 1e6
    t1rho[0, 1] = -1e6
    part = cluster_tissues(t1rho, np.ones(grid, dtype=bool), 5)
    assert part.labels[0, 0] == 4
    assert part.labels[0, 1] == 0


def test_cluster_tissues_validation():
    grid = (4, 4)
    with pytest.raises(DataError):
        cluster_tissues(np.ones(grid), np.zeros(grid, dtype=bool), 3)
    with pytest.raises(DataError):
        cluster_tissues(np.ones(grid), np.ones((5, 4), dtype=bool), 3)
    with pytest.raises(ConfigError):
        cluster_tissues(np.ones(grid), np.ones(grid, dtype=bool), 0)


def test_extract_parametric_tensors_layout():
    """Mode-1 slice v is voxel v's Hankel matrix, groups ordered by label."""
    rng = np.random.default_rng(7)
    x = _series(rng)
    part = _partition(rng, x.grid)
    spec = HankelSpec(k=3)
    tensors = extract_parametric_tensors(x, part, spec)
    assert len(tensors) == len(part.populated_labels)
    flat = x.data.reshape(-1, x.n_tsl)
    for lab, t in zip(part.populated_labels, tensors):
        vox = part.group_voxels(lab)
        assert t.shape == (vox.size, 3, 3)
        for v, voxel in enumerate(vox):
            npt.assert_array_equal(t[v], build_hankel(flat[voxel], spec))


def test_hankel_scatter_sum_is_adjoint():
    """<H(x), T> == <x, H^T(T)> for random image/tensor pairs."""
    rng = np.random.default_rng(11)
    for _ in range(10):
        x = _series(rng)
        part = _partition(rng, x.grid)
        spec = HankelSpec(k=3)
        hx = extract_parametric_tensors(x, part, spec)
        tensors = [rng.standard_normal(t.shape) + 1j * rng.standard_normal(t.shape) for t in hx]
        lhs = sum(np.vdot(t, h) for t, h in zip(tensors, hx))
        rhs = np.vdot(hankel_scatter_sum(tensors, part, spec, x.grid, x.n_tsl), x.data)
        assert abs(lhs - rhs) <= 1e-10 * max(abs(lhs), 1.0)


def test_hankel_adjoint_averages_back():
    """Anti-diagonal averaging of unmodified Hankels restores the image."""
    rng = np.random.default_rng(13)
    x = _series(rng)
    part = _partition(rng, x.grid)
    spec = HankelSpec(k=3)
    tensors = extract_parametric_tensors(x, part, spec)
    out = hankel_adjoint(tensors, part, spec, x.grid, x.tsl_ms)
    fg = part.labels >= 0
    npt.assert_allclose(out.data[fg], x.data[fg], atol=1e-12)
    npt.assert_array_equal(out.data[~fg], 0.0)


def test_multiplicity_counts_broadcast():
    rng = np.random.default_rng(17)
    part = _partition(rng, (8, 8))
    spec = HankelSpec(k=3)
    counts = multiplicity_counts(spec, part, 5)
    fg = part.labels >= 0
    npt.assert_array_equal(counts[~fg], 0)
    npt.assert_array_equal(counts[fg], np.tile([1, 2, 3, 2, 1], (int(fg.sum()), 1)))


def test_hankel_scatter_sum_validation():
    rng = np.random.default_rng(19)
    x = _series(rng)
    part = _partition(rng, x.grid)
    spec = HankelSpec(k=3)
    tensors = extract_parametric_tensors(x, part, spec)
    with pytest.raises(DataError):
        hankel_scatter_sum(tensors[:-1], part, spec, x.grid, x.n_tsl)
    bad = [t[:, :, :2] for t in tensors]
    with pytest.raises(DataError):
        hankel_scatter_sum(bad, part, spec, x.grid, x.n_tsl)
    with pytest.raises(DataError):
        extract_parametric_tensors(_series(rng, (9, 9)), part, spec)


def test_cluster_tissues_separates_distinct_values():
    """Well-spread map values land in distinct bins.

    Five relaxation plateaus with sixty bins stay separated, and a
    two-valued map with two bins recovers the exact partition.
    """
    vals = np.repeat([77.0, 78.0, 79.0, 82.0, 89.0], 40)
    t1rho = np.zeros((10, 20))
    t1rho.flat[:200] = vals
    part = cluster_tissues(t1rho, t1rho > 0, 60)
    labels = []
    for v in (77.0, 78.0, 79.0, 82.0, 89.0):
        got = set(part.labels[t1rho == v].tolist())
        assert len(got) == 1, got
        labels.append(got.pop())
    assert len(set(labels)) == 5

    two = np.where(np.arange(200).reshape(10, 20) < 100, 30.0, 70.0)
    part2 = cluster_tissues(two, np.ones_like(two, dtype=bool), 2)
    assert set(part2.labels[two == 30.0].tolist()) == {0}
    assert set(part2.labels[two == 70.0].tolist()) == {1}


def test_identical_voxel_group_is_multilinear_rank_one():
    """Voxels sharing one uniform-grid decay give rank (1, 1, 1)."""
    from smartmap.fitting import MonoExpParams, mono_model
    from smartmap.tensor import unfold

    t = (20.0, 40.0, 60.0, 80.0, 100.0)
    h = build_hankel(mono_model(MonoExpParams(1.0, 80.0), t), HankelSpec(k=3))
    group = np.broadcast_to(h, (7, *h.shape)).copy()
    for mode in (1, 2, 3):
        s = np.linalg.svd(unfold(group, mode), compute_uv=False)
        assert s[1] <= 1e-12 * s[0]


def test_group_denoise_improves_noisy_exponentials():
    """Hard thresholding moves a noisy Hankel group toward the clean one."""
    from smartmap.fitting import MonoExpParams, mono_model
    from smartmap.tensor import hosvd_denoise

    t = (20.0, 40.0, 60.0, 80.0, 100.0)
    h = build_hankel(mono_model(MonoExpParams(1.0, 80.0), t), HankelSpec(k=3))
    clean = np.broadcast_to(h, (7, *h.shape)).copy()
    noisy = clean + 0.03 * np.random.default_rng(8).standard_normal(clean.shape)
    denoised = hosvd_denoise(noisy, (0.5, 0.5, 0.5))
    before = np.linalg.norm(noisy - clean)
    after = np.linalg.norm(denoised - clean)
    assert after < 0.7 * before, (before, after)
