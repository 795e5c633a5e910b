"""Tissue grouping by parameter histogram and per-group Hankel tensors.

Voxels with similar T1rho share exponential decay structure, so their
temporal Hankel matrices stack into a tensor that is low rank along
every mode. ``hankel_scatter_sum`` is the exact adjoint of
``extract_parametric_tensors``; ``hankel_adjoint`` additionally
averages each anti-diagonal (the minimum-norm inverse).
"""

from dataclasses import dataclass, field

import numpy as np

from smartmap.errors import ConfigError, DataError

__all__ = [
    "HankelSpec",
    "TissuePartition",
    "build_hankel",
    "cluster_tissues",
    "extract_parametric_tensors",
    "hankel_adjoint",
    "hankel_scatter_sum",
    "multiplicity_counts",
    "support_mask",
]


@dataclass
class HankelSpec:
    """Hankel layout: ``k`` columns, ``n_tsl - k + 1`` rows."""

    k: int

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError(f"Hankel column count must be >= 1, got {self.k}")

    @classmethod
    def default(cls, n_tsl):
        """k = ceil(n_tsl / 2)."""
        return cls(k=(n_tsl + 1) // 2)

    def rows(self, n_tsl):
        if self.k > n_tsl:
            raise ConfigError(f"Hankel k={self.k} exceeds the number of TSLs {n_tsl}")
        return n_tsl - self.k + 1

    def index_matrix(self, n_tsl):
        """Entry (p, q) holds time index p + q."""
        return np.arange(self.rows(n_tsl))[:, None] + np.arange(self.k)[None, :]


@dataclass
class TissuePartition:
    """Per-voxel group labels from histogram clustering.

    ``labels`` is an integer image; background voxels carry -1.
    ``edges`` are the bin edges in ms (length n_groups + 1, clamped
    outliers land in the end bins).
    """

    labels: np.ndarray
    n_groups: int
    edges: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def grid(self):
        return self.labels.shape

    @property
    def populated_labels(self):
        """Sorted labels that actually contain voxels."""
        present = np.unique(self.labels)
        return [int(v) for v in present if v >= 0]

    def group_voxels(self, label):
        """Flat voxel indices of one group, ascending."""
        return np.flatnonzero(self.labels.reshape(-1) == label)


def support_mask(x, threshold_frac=0.05):
    """Foreground support: first-echo magnitude at or above a fraction of its max."""
    first = np.abs(x.data[..., 0])
    peak = first.max()
    return first >= threshold_frac * peak if peak > 0 else np.zeros(first.shape, dtype=bool)


def cluster_tissues(t1rho_map, support, n_groups):
    """Partition foreground voxels into equal-width parameter bins.

    Bin edges span the 1st to 99th percentile of the foreground
    values; outliers are clamped into the end bins. Empty bins are
    retained (they simply contain no voxels). A constant map collapses
    to a single populated group.

    Parameters
    ----------
    t1rho_map : ndarray
        Real parameter image.
    support : ndarray of bool
        Foreground mask, same shape.
    n_groups : int
    """
    t1rho_map = np.asarray(t1rho_map, dtype=float)
    support = np.asarray(support, dtype=bool)
    if t1rho_map.shape != support.shape:
        raise DataError(f"map shape {t1rho_map.shape} != support shape {support.shape}")
    if n_groups < 1:
        raise ConfigError(f"n_groups must be >= 1, got {n_groups}")
    vals = t1rho_map[support]
    if vals.size == 0:
        raise DataError("support mask is empty")
    lo, hi = np.percentile(vals, [1.0, 99.0])
    labels = np.full(t1rho_map.shape, -1, dtype=np.int32)
    if hi <= lo:
        labels[support] = 0
        edges = np.full(n_groups + 1, lo)
    else:
        width = (hi - lo) / n_groups
        binned = np.clip(np.floor((vals - lo) / width).astype(np.int32), 0, n_groups - 1)
        labels[support] = binned
        edges = lo + width * np.arange(n_groups + 1)
    return TissuePartition(labels=labels, n_groups=int(n_groups), edges=edges)


def build_hankel(signal, spec):
    """Hankel matrix of one temporal signal: entry (p, q) = signal[p + q]."""
    signal = np.asarray(signal)
    if signal.ndim != 1:
        raise DataError(f"signal must be 1D, got shape {signal.shape}")
    return signal[spec.index_matrix(signal.shape[0])]


def extract_parametric_tensors(x, part, spec):
    """Stack each populated group's voxel Hankel matrices into a tensor.

    Returns one array of shape (N_tissue, n_tsl - k + 1, k) per
    populated label, ordered by label. Mode-1 slice v is the Hankel
    matrix of voxel v's temporal signal.
    """
    if part.grid != x.grid:
        raise DataError(f"partition grid {part.grid} does not match image grid {x.grid}")
    flat = x.data.reshape(-1, x.n_tsl)
    idx = spec.index_matrix(x.n_tsl)
    return [flat[part.group_voxels(lab)][:, idx] for lab in part.populated_labels]


def _antidiag_basis(spec, n_tsl):
    """(rows * k, n_tsl) binary matrix mapping entries to time indices."""
    idx = spec.index_matrix(n_tsl).reshape(-1)
    basis = np.zeros((idx.size, n_tsl))
    basis[np.arange(idx.size), idx] = 1.0
    return basis


def anti_diagonal_multiplicity(spec, n_tsl):
    """Number of Hankel entries mapping to each time index."""
    return np.bincount(spec.index_matrix(n_tsl).reshape(-1), minlength=n_tsl)


def hankel_scatter_sum(tensors, part, spec, grid, n_tsl):
    """Exact adjoint of :func:`extract_parametric_tensors`.

    Each voxel's time sample m accumulates the sum of its Hankel
    entries (p, q) with p + q = m; background voxels stay zero.
    """
    labels = part.populated_labels
    if len(tensors) != len(labels):
        raise DataError(f"got {len(tensors)} tensors for {len(labels)} populated groups")
    rows = spec.rows(n_tsl)
    basis = _antidiag_basis(spec, n_tsl)
    out = np.zeros((int(np.prod(grid)), n_tsl), dtype=complex)
    for lab, t in zip(labels, tensors):
        vox = part.group_voxels(lab)
        t = np.asarray(t)
        if t.shape != (vox.size, rows, spec.k):
            raise DataError(f"tensor shape {t.shape} does not conform to group {lab} ({vox.size} voxels)")
        out[vox] = t.reshape(vox.size, -1) @ basis
    return out.reshape(*grid, n_tsl)


def hankel_adjoint(tensors, part, spec, grid, tsl_ms):
    """Anti-diagonal averaging: scatter-sum divided by multiplicities."""
    from smartmap.encoding import ImageSeries

    n_tsl = len(tsl_ms)
    sums = hankel_scatter_sum(tensors, part, spec, grid, n_tsl)
    mult = anti_diagonal_multiplicity(spec, n_tsl)
    data = sums / mult
    return ImageSeries(data=data, tsl_ms=tsl_ms)


def multiplicity_counts(spec, part, n_tsl):
    """Per-voxel-per-TSL anti-diagonal multiplicities (diagonal of H^T H).

    Foreground voxels broadcast the multiplicity vector; background
    voxels are all zero.
    """
    mult = anti_diagonal_multiplicity(spec, n_tsl)
    fg = (part.labels >= 0).astype(np.int64)
    return fg[..., None] * mult
