"""Block matching and the patch-group tensor operator with its adjoint.

A patch group stacks similar b x b (or b x b x b) patches from a
similarity image into a third-order tensor: vectorized patch entries
by group members by spin-lock times. ``scatter_sum`` is the exact
adjoint of ``extract_tensors``; ``aggregate`` divides the scatter by
the per-voxel coverage counts (simple averaging).
"""

import itertools
import json
from dataclasses import dataclass, field

import numpy as np

from smartmap.errors import ConfigError, DataError

__all__ = [
    "PatchConfig",
    "PatchGroupIndex",
    "aggregate",
    "block_match",
    "coverage_counts",
    "extract_tensors",
    "scatter_sum",
]


@dataclass
class PatchConfig:
    """Patch-grouping parameters.

    Attributes
    ----------
    b : int
        Patch side length (square in 2D, cubic in 3D).
    stride : int
        Offset between reference corners.
    r : int
        Search radius around each reference corner (square window).
    lambda_m : float
        Normalized distance threshold for group membership.
    n_p_max : int
        Maximum group size including the reference.
    """

    b: int = 9
    stride: int = 3
    r: int = 16
    lambda_m: float = 0.3
    n_p_max: int = 30

    def __post_init__(self):
        if self.b < 1 or self.stride < 1 or self.r < 0 or self.n_p_max < 1 or self.lambda_m < 0:
            raise ConfigError(f"invalid patch configuration: {self}")


@dataclass
class PatchGroupIndex:
    """Block-matching result: member corners per reference location.

    ``corners[i]`` is an (N_p_i, ndim) int array of patch corner
    coordinates, reference first; ``distances[i]`` holds the matching
    normalized distances (entry 0 is 0 for the reference).
    """

    corners: list
    distances: list
    b: int
    grid: tuple
    meta: dict = field(default_factory=dict)

    @property
    def n_groups(self):
        return len(self.corners)

    def to_json(self):
        return json.dumps(
            {
                "b": self.b,
                "grid": list(self.grid),
                "groups": [
                    {"corners": c.tolist(), "distances": d.tolist()}
                    for c, d in zip(self.corners, self.distances)
                ],
            }
        )

    @classmethod
    def from_json(cls, text):
        doc = json.loads(text)
        return cls(
            corners=[np.asarray(g["corners"], dtype=int) for g in doc["groups"]],
            distances=[np.asarray(g["distances"], dtype=float) for g in doc["groups"]],
            b=int(doc["b"]),
            grid=tuple(doc["grid"]),
        )


def _ref_corners_1d(n, b, stride):
    last = n - b
    cs = list(range(0, last + 1, stride))
    if cs[-1] != last:
        cs.append(last)
    return np.asarray(cs, dtype=int)


def _integral(values):
    out = values
    for ax in range(values.ndim):
        out = out.cumsum(axis=ax)
    pad = np.zeros(tuple(s + 1 for s in values.shape), dtype=out.dtype)
    pad[(slice(1, None),) * values.ndim] = out
    return pad


def _box_sums(pad, corner_axes, b):
    """Box sums of width b at the meshgrid of per-axis corner vectors."""
    nd = len(corner_axes)
    total = 0.0
    for eps in itertools.product((0, 1), repeat=nd):
        sign = (-1) ** (nd - sum(eps))
        total = total + sign * pad[np.ix_(*[c + e * b for c, e in zip(corner_axes, eps)])]
    return total


def block_match(img, cfg):
    """Group similar patches by normalized squared distance.

    For every reference corner on the stride lattice (the trailing
    corner is clamped in-grid so coverage reaches the far edge), all
    stride-1 corners within a square window of radius ``cfg.r`` are
    scored with ``dist = ||B_ref - B_cand||^2 / ||B_cand||^2``;
    candidates at or below ``cfg.lambda_m`` join the group, closest
    first, ties broken by linear corner index. The reference itself is
    always member 0 with distance 0. Zero-norm candidates are skipped;
    an all-zero reference matches only other all-zero patches (their
    distance is defined as 0).

    Parameters
    ----------
    img : ndarray
        Real similarity image, 2D or 3D.
    cfg : PatchConfig

    Returns
    -------
    PatchGroupIndex
    """
    img = np.asarray(img)
    if img.ndim not in (2, 3):
        raise DataError(f"similarity image must be 2D or 3D, got shape {img.shape}")
    if np.iscomplexobj(img):
        raise DataError("similarity image must be real valued (take the magnitude first)")
    if img.size == 0:
        raise DataError("similarity image is empty")
    b, stride, r = cfg.b, cfg.stride, cfg.r
    if any(b > n for n in img.shape):
        raise ConfigError(f"patch size {b} exceeds grid {img.shape}")
    nd = img.ndim
    shape = img.shape
    img = img.astype(np.float64, copy=False)

    ref_axes = [_ref_corners_1d(n, b, stride) for n in shape]
    nref_shape = tuple(len(c) for c in ref_axes)
    n_ref = int(np.prod(nref_shape))
    pad2 = _integral(img * img)
    norm_all_tol = float((img * img).sum()) * 1e-12 + 1e-300

    # enumerate offsets by their linear-index contribution so that a
    # stable sort on distance breaks ties by candidate linear index
    lin_w = np.cumprod([1] + [shape[ax] - b + 1 for ax in range(nd - 1, 0, -1)])[::-1]
    offsets = sorted(itertools.product(range(-r, r + 1), repeat=nd), key=lambda o: int(np.dot(o, lin_w)))
    n_off = len(offsets)
    dists = np.full((n_off, n_ref), np.inf)
    ref_norm = _box_sums(pad2, ref_axes, b).reshape(-1)
    ref_zero = ref_norm <= norm_all_tol

    for oi, off in enumerate(offsets):
        cand_axes = []
        sel_axes = []
        ok = True
        for ax in range(nd):
            cand = ref_axes[ax] + off[ax]
            good = (cand >= 0) & (cand <= shape[ax] - b)
            if not good.any():
                ok = False
                break
            sel_axes.append(np.flatnonzero(good))
            cand_axes.append(cand[good])
        if not ok:
            continue
        # squared difference image on the overlap of img and its shifted copy
        src = tuple(slice(max(0, -d), shape[ax] - max(0, d)) for ax, d in enumerate(off))
        dst = tuple(slice(max(0, d), shape[ax] + min(0, d)) for ax, d in enumerate(off))
        diff = np.zeros(shape)
        diff[src] = img[src] - img[dst]
        np.square(diff, out=diff)
        ssd = _box_sums(_integral(diff), [ref_axes[ax][sel_axes[ax]] for ax in range(nd)], b)
        cand_norm = _box_sums(pad2, cand_axes, b)
        cand_zero = cand_norm <= norm_all_tol

        d = np.where(cand_zero, np.inf, ssd / np.where(cand_zero, 1.0, cand_norm))
        d = np.where(d <= cfg.lambda_m, d, np.inf)
        # all-zero reference: only all-zero candidates, at distance 0
        rz = ref_zero.reshape(nref_shape)[np.ix_(*sel_axes)]
        d = np.where(rz, np.where(cand_zero, 0.0, np.inf), d)

        flat = np.full(nref_shape, np.inf)
        flat[np.ix_(*sel_axes)] = d
        dists[oi] = flat.reshape(-1)

    # stable argsort over offsets = (distance, linear candidate index) order,
    # because lexicographic offset enumeration orders candidates by linear index
    order = np.argsort(dists, axis=0, kind="stable")
    n_valid = np.isfinite(dists).sum(axis=0)
    zero_oi = offsets.index((0,) * nd)
    shortlist = min(n_off, cfg.n_p_max + 8)

    sw = np.lib.stride_tricks.sliding_window_view(img, (b,) * nd)
    off_arr = np.asarray(offsets, dtype=int)
    ref_mesh = np.stack(np.meshgrid(*ref_axes, indexing="ij"), axis=-1).reshape(-1, nd)

    corners_out, dists_out = [], []
    for ri in range(n_ref):
        rc = ref_mesh[ri]
        take = order[: min(shortlist, max(int(n_valid[ri]), 1)), ri]
        take = take[np.isfinite(dists[take, ri])]
        take = take[take != zero_oi]
        if take.size == 0:
            corners_out.append(rc[None, :].copy())
            dists_out.append(np.zeros(1))
            continue
        cand = rc[None, :] + off_arr[take]
        if ref_zero[ri]:
            d_exact = np.zeros(len(take))
        else:
            ref_patch = sw[tuple(rc)]
            cand_patches = sw[tuple(cand.T)]
            diff = cand_patches - ref_patch
            ssd = (diff * diff).reshape(len(take), -1).sum(axis=1)
            nrm = (cand_patches * cand_patches).reshape(len(take), -1).sum(axis=1)
            d_exact = ssd / nrm
            keep = d_exact <= cfg.lambda_m
            cand, d_exact = cand[keep], d_exact[keep]
        lin = cand @ lin_w
        sortidx = np.lexsort((lin, d_exact))[: cfg.n_p_max - 1]
        corners_out.append(np.vstack([rc[None, :], cand[sortidx]]))
        dists_out.append(np.concatenate([[0.0], d_exact[sortidx]]))

    return PatchGroupIndex(corners=corners_out, distances=dists_out, b=b, grid=shape)


def _check_idx(idx, grid):
    if tuple(grid) != tuple(idx.grid):
        raise DataError(f"patch index grid {idx.grid} does not match {tuple(grid)}")


def extract_tensors(x, idx):
    """Extract each group's patch tensor P_i(X) from an image series.

    Returns a list of complex arrays of shape (b^nd, N_p_i, N_TSL):
    vectorized patch entries (C raster order within the patch) by
    members by spin-lock times.
    """
    data = x.data
    _check_idx(idx, data.shape[:-1])
    b = idx.b
    nd = len(idx.grid)
    sw = np.lib.stride_tricks.sliding_window_view(data, (b,) * nd, axis=tuple(range(nd)))
    out = []
    for corners in idx.corners:
        if (corners < 0).any() or (corners > np.asarray(idx.grid) - b).any():
            raise DataError("patch corner out of bounds")
        patches = sw[tuple(corners.T)]  # (N_p, N_TSL, b, ..., b)
        n_p, n_tsl = patches.shape[0], patches.shape[1]
        out.append(np.moveaxis(patches.reshape(n_p, n_tsl, -1), 2, 0))
    return out


def _entry_indices(idx):
    """Flat voxel index of every tensor entry, per group: (N_p, b^nd)."""
    b = idx.b
    nd = len(idx.grid)
    grid = idx.grid
    cell = np.stack(np.meshgrid(*[np.arange(b)] * nd, indexing="ij"), axis=-1).reshape(-1, nd)
    strides = np.cumprod([1] + list(grid[:0:-1]))[::-1]
    for corners in idx.corners:
        vox = (corners[:, None, :] + cell[None, :, :]) @ strides
        yield vox


def scatter_sum(tensors, idx, grid, n_tsl):
    """Adjoint of :func:`extract_tensors`: scatter-add entries to voxels."""
    _check_idx(idx, grid)
    if len(tensors) != idx.n_groups:
        raise DataError(f"got {len(tensors)} tensors for {idx.n_groups} groups")
    flats, vals = [], []
    for t, vox in zip(tensors, _entry_indices(idx)):
        n_p = vox.shape[0]
        t = np.asarray(t)
        if t.shape[:2] != (vox.shape[1], n_p) or t.shape[2] != n_tsl:
            raise DataError(f"tensor shape {t.shape} does not conform to its group")
        flats.append(vox.reshape(-1))
        vals.append(np.moveaxis(t, 0, 1).reshape(-1, n_tsl))
    nvox = int(np.prod(grid))
    acc = np.zeros((nvox, n_tsl), dtype=complex)
    if flats:
        flat = np.concatenate(flats)
        v = np.concatenate(vals)
        for m in range(n_tsl):
            acc[:, m] = np.bincount(flat, weights=v[:, m].real, minlength=nvox)
            acc[:, m] += 1j * np.bincount(flat, weights=v[:, m].imag, minlength=nvox)
    return acc.reshape(*grid, n_tsl)


def coverage_counts(idx, grid):
    """Number of patch entries covering each voxel (diagonal of P^T P)."""
    _check_idx(idx, grid)
    nvox = int(np.prod(grid))
    flat = [vox.reshape(-1) for vox in _entry_indices(idx)]
    if not flat:
        return np.zeros(grid, dtype=np.int64)
    counts = np.bincount(np.concatenate(flat), minlength=nvox)
    return counts.reshape(grid).astype(np.int64)


def aggregate(tensors, idx, grid, tsl_ms):
    """Average overlapping patch entries back into an image series.

    Voxels with zero coverage come back as zero.
    """
    from smartmap.encoding import ImageSeries

    n_tsl = len(tsl_ms)
    sums = scatter_sum(tensors, idx, grid, n_tsl)
    counts = coverage_counts(idx, grid)
    scale = np.where(counts > 0, 1.0 / np.maximum(counts, 1), 0.0)
    return ImageSeries(data=sums * scale[..., None], tsl_ms=tsl_ms)
