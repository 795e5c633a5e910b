"""Acquisition model: E = A F S, sampling masks, and noise injection.

Images live on a 2D or 3D spatial grid with the spin-lock (TSL) axis
last. K-space is stored centered (DC at index ``n // 2`` on every
spatial axis) and the Fourier transform is unitary, so the forward
operator has norm at most one with identity coils and conjugate
gradients stay well conditioned.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import fft as spfft

from smartmap.errors import ConfigError, DataError

__all__ = [
    "CoilSensitivities",
    "ImageSeries",
    "KSpaceData",
    "SamplingMask",
    "add_noise",
    "adjoint",
    "fft_centered",
    "forward",
    "ifft_centered",
    "make_mask_1d",
    "make_mask_poisson",
]


@dataclass
class ImageSeries:
    """Complex image stack over spin-lock times.

    Attributes
    ----------
    data : ndarray
        Complex array of shape ``(*grid, n_tsl)``; the grid has 2 or 3
        spatial axes.
    tsl_ms : tuple of float
        Spin-lock times in milliseconds, strictly increasing.
    """

    data: np.ndarray
    tsl_ms: tuple

    def __post_init__(self):
        self.data = np.asarray(self.data)
        self.tsl_ms = tuple(float(t) for t in self.tsl_ms)
        if self.data.ndim not in (3, 4):
            raise DataError(f"image data must be (grid..., n_tsl) with a 2D or 3D grid, got shape {self.data.shape}")
        if len(self.tsl_ms) < 2:
            raise DataError("need at least two spin-lock times")
        if self.data.shape[-1] != len(self.tsl_ms):
            raise DataError(f"last axis {self.data.shape[-1]} != number of TSLs {len(self.tsl_ms)}")
        if any(b <= a for a, b in zip(self.tsl_ms, self.tsl_ms[1:])):
            raise DataError(f"tsl_ms must be strictly increasing, got {self.tsl_ms}")

    @property
    def grid(self):
        return self.data.shape[:-1]

    @property
    def n_tsl(self):
        return self.data.shape[-1]


@dataclass
class CoilSensitivities:
    """Per-coil complex sensitivity maps, shape ``(n_coils, *grid)``."""

    maps: np.ndarray

    def __post_init__(self):
        self.maps = np.asarray(self.maps, dtype=complex)
        if self.maps.ndim not in (3, 4):
            raise DataError(f"coil maps must be (n_coils, grid...), got shape {self.maps.shape}")

    @classmethod
    def identity(cls, grid):
        """Single uniform coil (simulation default)."""
        return cls(np.ones((1, *grid), dtype=complex))

    @property
    def n_coils(self):
        return self.maps.shape[0]

    @property
    def grid(self):
        return self.maps.shape[1:]


@dataclass
class SamplingMask:
    """Per-TSL binary k-space masks plus the requested acceleration.

    ``data`` has shape ``(*grid, n_tsl)`` and dtype bool. ``r_achieved``
    is total points over sampled points across all TSLs.
    """

    data: np.ndarray
    r_requested: float
    seed: int | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.data = np.asarray(self.data).astype(bool)
        if self.data.ndim not in (3, 4):
            raise DataError(f"mask must be (grid..., n_tsl), got shape {self.data.shape}")

    @property
    def grid(self):
        return self.data.shape[:-1]

    @property
    def n_tsl(self):
        return self.data.shape[-1]

    @property
    def r_achieved(self):
        sampled = int(self.data.sum())
        if sampled == 0:
            raise DataError("mask samples no points")
        return self.data.size / sampled


@dataclass
class KSpaceData:
    """Measured k-space: shape ``(*grid, n_coils, n_tsl)`` plus its mask.

    Entries at unsampled locations are exactly zero; the constructors
    (:func:`forward`, :func:`add_noise`) maintain that invariant.
    """

    data: np.ndarray
    mask: SamplingMask
    tsl_ms: tuple

    def __post_init__(self):
        self.data = np.asarray(self.data)
        self.tsl_ms = tuple(float(t) for t in self.tsl_ms)
        if self.data.ndim not in (4, 5):
            raise DataError(f"k-space data must be (grid..., n_coils, n_tsl), got shape {self.data.shape}")
        if self.data.shape[:-2] != self.mask.grid or self.data.shape[-1] != self.mask.n_tsl:
            raise DataError(f"k-space shape {self.data.shape} does not match mask {self.mask.data.shape}")

    @property
    def grid(self):
        return self.data.shape[:-2]

    @property
    def n_coils(self):
        return self.data.shape[-2]

    @property
    def n_tsl(self):
        return self.data.shape[-1]


def _spatial_axes(grid):
    return tuple(range(len(grid)))


def fft_centered(arr, axes):
    """Unitary FFT with the DC sample at ``n // 2`` on each axis."""
    return spfft.fftshift(spfft.fftn(spfft.ifftshift(arr, axes=axes), axes=axes, norm="ortho"), axes=axes)


def ifft_centered(arr, axes):
    """Inverse of :func:`fft_centered`."""
    return spfft.fftshift(spfft.ifftn(spfft.ifftshift(arr, axes=axes), axes=axes, norm="ortho"), axes=axes)


def forward(x, s, m):
    """Apply the acquisition operator E = A F S.

    Per coil and TSL: weight the image by the coil map, Fourier
    transform, and zero the unsampled k-space locations.

    Parameters
    ----------
    x : ImageSeries
    s : CoilSensitivities or None
        ``None`` means a single identity coil.
    m : SamplingMask

    Returns
    -------
    KSpaceData
    """
    if s is None:
        s = CoilSensitivities.identity(x.grid)
    if s.grid != x.grid or m.grid != x.grid or m.n_tsl != x.n_tsl:
        raise DataError(f"grids disagree: image {x.grid}x{x.n_tsl}, coils {s.grid}, mask {m.grid}x{m.n_tsl}")
    axes = _spatial_axes(x.grid)
    # (grid..., n_coils, n_tsl) = coil maps (grid..., n_coils, 1) * image (grid..., 1, n_tsl)
    weighted = np.moveaxis(s.maps, 0, -1)[..., :, None] * x.data[..., None, :]
    y = fft_centered(weighted, axes)
    y *= m.data[..., None, :]
    return KSpaceData(data=y, mask=m, tsl_ms=x.tsl_ms)


def adjoint(y, s=None):
    """Exact adjoint of :func:`forward`: sum_c conj(s_c) F^H A y.

    With a full mask and identity coils this inverts ``forward``; in
    general it is the zero-filled reconstruction.
    """
    if s is None:
        s = CoilSensitivities.identity(y.grid)
    if s.grid != y.grid or s.n_coils != y.n_coils:
        raise DataError(f"coil maps {s.maps.shape} do not match k-space {y.data.shape}")
    axes = _spatial_axes(y.grid)
    imgs = ifft_centered(y.data, axes)
    x = np.sum(np.moveaxis(s.maps.conj(), 0, -1)[..., :, None] * imgs, axis=-2)
    return ImageSeries(data=x, tsl_ms=y.tsl_ms)


def _center_block(n, width):
    start = n // 2 - width // 2
    return start, start + width


def make_mask_1d(grid, r, center_lines=None, seed=None, n_tsl=1):
    """Pseudo-random variable-density line mask (Cartesian 1D).

    Lines run along the first spatial axis (phase encode); each TSL
    draws its own pattern from a child seed. Sampling probability
    outside the fully kept center block falls off as
    ``(1 - |ky|/ky_max)^4``.

    Parameters
    ----------
    grid : tuple of int
        Spatial grid shape (2D or 3D; only axis 0 is undersampled).
    r : float
        Requested acceleration; the sampled line count is
        ``round(n_lines / r)``.
    center_lines : int, optional
        Fully sampled center lines; defaults to ``n_lines // 16``.
    seed : int
        Seed for the per-TSL child generators.
    n_tsl : int
        Number of TSL patterns to draw.
    """
    if r < 1:
        raise ConfigError(f"acceleration must be >= 1, got {r}")
    n = grid[0]
    if center_lines is None:
        center_lines = n // 16
    if center_lines < 0:
        raise ConfigError(f"center_lines must be >= 0, got {center_lines}")
    budget = int(round(n / r))
    if center_lines > budget:
        raise ConfigError(f"infeasible acceleration: {center_lines} center lines exceed the budget of {budget} lines (R={r})")
    c0, c1 = _center_block(n, center_lines)
    ky = np.arange(n) - n // 2
    weights = (1.0 - np.abs(ky) / max(np.abs(ky).max(), 1)) ** 4 + 1e-12
    weights[c0:c1] = 0.0
    outside = np.flatnonzero(weights > 0)
    p = weights[outside] / weights[outside].sum()

    data = np.zeros((*grid, n_tsl), dtype=bool)
    children = np.random.SeedSequence(seed).spawn(n_tsl)
    for t, child in enumerate(children):
        rng = np.random.default_rng(child)
        lines = np.zeros(n, dtype=bool)
        lines[c0:c1] = True
        extra = budget - center_lines
        if extra > 0:
            take = rng.choice(outside, size=min(extra, outside.size), replace=False, p=p)
            lines[take] = True
        data[..., t] = lines.reshape((n,) + (1,) * (len(grid) - 1))
    return SamplingMask(data=data, r_requested=float(r), seed=seed, meta={"kind": "1d", "center_lines": int(center_lines)})


def _bridson(shape, r0, center, d_max, rng, k_attempts=30):
    """Variable-density Poisson disk points on an integer lattice.

    The local minimum distance at point p is ``r0 * (1 + 2 d(p)/d_max)``
    with d the distance from the k-space center. A candidate is
    accepted when every existing point is at least its own local
    radius away, so the returned points satisfy the floor r0 exactly
    (distances are checked on the lattice coordinates themselves).
    Returns an (n, 2) int array.
    """
    n0, n1 = shape

    def local_r(a, b):
        return r0 * (1.0 + 2.0 * np.hypot(a - center[0], b - center[1]) / d_max)

    occ = np.zeros(shape, dtype=bool)
    points = []
    active = []

    def try_insert(a, b, rad):
        w = int(np.ceil(rad))
        i0, i1 = max(0, a - w), min(n0, a + w + 1)
        j0, j1 = max(0, b - w), min(n1, b + w + 1)
        win = occ[i0:i1, j0:j1]
        if win.any():
            qs = np.argwhere(win)
            d2 = (qs[:, 0] + i0 - a) ** 2 + (qs[:, 1] + j0 - b) ** 2
            if (d2 < rad * rad).any():
                return False
        occ[a, b] = True
        points.append((a, b))
        active.append((a, b))
        return True

    try_insert(int(center[0]), int(center[1]), 0.0)
    while active:
        idx = int(rng.integers(len(active)))
        base = active[idx]
        rb = local_r(*base)
        placed = False
        for _ in range(k_attempts):
            rad = rb * (1.0 + rng.random())
            ang = 2.0 * np.pi * rng.random()
            a = int(round(base[0] + rad * np.cos(ang)))
            b = int(round(base[1] + rad * np.sin(ang)))
            if not (0 <= a < n0 and 0 <= b < n1) or occ[a, b]:
                continue
            if try_insert(a, b, local_r(a, b)):
                placed = True
                break
        if not placed:
            active.pop(idx)
    return np.array(points, dtype=int)


def make_mask_poisson(grid, r, center_radius=None, seed=None, n_tsl=1):
    """Variable-density Poisson-disk mask on a 2D phase-encode grid.

    The center disk is fully sampled; outside it, points keep a local
    minimum distance that grows linearly with distance from the
    center. The base radius is calibrated by rerunning the sampler and
    the point set is then randomly thinned to hit the requested
    acceleration exactly, which keeps the minimum-distance floor
    intact.
    """
    if len(grid) != 2:
        raise ConfigError(f"Poisson masks need a 2D phase-encode grid, got {grid}")
    if r < 1:
        raise ConfigError(f"acceleration must be >= 1, got {r}")
    n0, n1 = grid
    if center_radius is None:
        center_radius = max(2, min(n0, n1) // 16)
    total = n0 * n1
    target = int(round(total / r))
    center = (n0 // 2, n1 // 2)
    ii, jj = np.mgrid[0:n0, 0:n1]
    dist = np.hypot(ii - center[0], jj - center[1])
    center_disk = dist <= center_radius
    n_center = int(center_disk.sum())
    if n_center > target:
        raise ConfigError(f"infeasible acceleration: center disk holds {n_center} points but the budget is {target} (R={r})")
    d_max = dist.max()

    data = np.zeros((*grid, n_tsl), dtype=bool)
    children = np.random.SeedSequence(seed).spawn(n_tsl)
    meta_r0 = []
    for t, child in enumerate(children):
        rng = np.random.default_rng(child)
        if r == 1:
            data[..., t] = True
            meta_r0.append(0.0)
            continue
        # average point spacing for the target density, shrunk for the density ramp
        r0 = 0.55 * np.sqrt(total / target)
        n_outside_target = target - n_center
        best = None
        best_r0 = r0
        for _ in range(10):
            pts = _bridson(grid, r0, center, d_max, rng)
            outside = pts[dist[pts[:, 0], pts[:, 1]] > center_radius]
            if len(outside) >= n_outside_target and (best is None or len(outside) < len(best)):
                best, best_r0 = outside, r0
            if n_outside_target <= len(outside) <= int(1.15 * n_outside_target) + 1:
                break
            fac = np.sqrt(len(outside) / max(n_outside_target, 1)) if len(outside) else 0.5
            if len(outside) < n_outside_target:
                # integer-grid counts plateau under tiny radius changes,
                # so undershoots must shrink by a real margin
                fac = min(fac, 0.97)
            r0 = max(r0 * fac, 0.05)
        if best is None:
            raise ConfigError(f"could not reach R={r} on grid {grid}; calibration stalled below {n_outside_target} points")
        keep = rng.choice(len(best), size=n_outside_target, replace=False)
        sel = best[keep]
        r0 = best_r0
        m = center_disk.copy()
        m[sel[:, 0], sel[:, 1]] = True
        data[..., t] = m
        meta_r0.append(float(r0))
    return SamplingMask(
        data=data,
        r_requested=float(r),
        seed=seed,
        meta={"kind": "poisson", "center_radius": int(center_radius), "r0": meta_r0},
    )


def add_noise(y, snr, seed=None):
    """Add i.i.d. complex Gaussian noise at a given SNR.

    The total complex standard deviation is ``mean(|signal|) / snr``
    (per real component divided by sqrt(2)). For k-space inputs the
    mean runs over sampled entries only and noise is injected only
    there, preserving the exact zeros at unsampled locations.

    Parameters
    ----------
    y : ImageSeries or KSpaceData
    snr : float
        Positive signal-to-noise ratio.
    seed : int
        Generator seed; the same seed reproduces the realization.
    """
    if snr <= 0:
        raise ConfigError(f"snr must be positive, got {snr}")
    rng = np.random.default_rng(seed)
    if isinstance(y, ImageSeries):
        sigma = np.mean(np.abs(y.data)) / snr
        noise = (sigma / np.sqrt(2.0)) * (rng.standard_normal(y.data.shape) + 1j * rng.standard_normal(y.data.shape))
        return ImageSeries(data=y.data + noise, tsl_ms=y.tsl_ms)
    if isinstance(y, KSpaceData):
        sampled = np.broadcast_to(y.mask.data[..., None, :], y.data.shape)
        vals = y.data[sampled]
        sigma = np.mean(np.abs(vals)) / snr
        noise = (sigma / np.sqrt(2.0)) * (rng.standard_normal(vals.shape) + 1j * rng.standard_normal(vals.shape))
        out = y.data.copy()
        out[sampled] = vals + noise
        return KSpaceData(data=out, mask=y.mask, tsl_ms=y.tsl_ms)
    raise DataError(f"add_noise expects ImageSeries or KSpaceData, got {type(y).__name__}")
