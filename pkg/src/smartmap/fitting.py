"""Per-voxel exponential parameter estimation.

Mono-exponential decay is fitted to magnitude data with a vectorized
Levenberg-Marquardt loop (analytic Jacobian, Marquardt diagonal
scaling). The bi-exponential model is a simulation forward model
only; inverting two exponentials from five echoes is ill posed and
deliberately out of scope.
"""

from dataclasses import dataclass

import numpy as np

from smartmap.errors import DataError

__all__ = [
    "BiExpParams",
    "MonoExpParams",
    "MonoFitResult",
    "T1RHO_MAX_MS",
    "T1RHO_MIN_MS",
    "bi_model",
    "fit_map",
    "fit_mono",
    "mono_jacobian",
    "mono_model",
]

T1RHO_MIN_MS = 1.0
T1RHO_MAX_MS = 1000.0

_MAX_ITERS = 200
_REL_TOL = 1e-10


@dataclass(frozen=True)
class MonoExpParams:
    """Mono-exponential decay parameters: amplitude and T1rho in ms."""

    m0: float
    t1rho: float

    def __post_init__(self):
        if self.t1rho <= 0:
            raise DataError(f"t1rho must be positive, got {self.t1rho}")


@dataclass(frozen=True)
class BiExpParams:
    """Bi-exponential parameters; ``alpha`` is the long-component fraction."""

    m0: float
    t1rho_long: float
    t1rho_short: float
    alpha: float

    def __post_init__(self):
        if not (self.t1rho_long > self.t1rho_short > 0):
            raise DataError(f"need t1rho_long > t1rho_short > 0, got {self.t1rho_long}, {self.t1rho_short}")
        if not 0.0 <= self.alpha <= 1.0:
            raise DataError(f"alpha must lie in [0, 1], got {self.alpha}")


@dataclass(frozen=True)
class MonoFitResult:
    params: MonoExpParams
    converged: bool
    degenerate: bool
    clamped: bool


def _tsl_array(tsl_ms):
    t = np.asarray(tsl_ms, dtype=float)
    if t.ndim != 1 or t.size < 2:
        raise DataError(f"need at least two spin-lock times, got {tsl_ms!r}")
    if (t <= 0).any():
        raise DataError(f"spin-lock times must be positive, got {tsl_ms!r}")
    return t


def mono_model(p, tsl_ms):
    """M0 * exp(-t / T1rho) per echo."""
    t = _tsl_array(tsl_ms)
    return p.m0 * np.exp(-t / p.t1rho)


def bi_model(p, tsl_ms):
    """M0 * ((1 - alpha) exp(-t/T_short) + alpha exp(-t/T_long))."""
    t = _tsl_array(tsl_ms)
    return p.m0 * ((1.0 - p.alpha) * np.exp(-t / p.t1rho_short) + p.alpha * np.exp(-t / p.t1rho_long))


def mono_jacobian(p, tsl_ms):
    """Analytic Jacobian of :func:`mono_model`, shape (n_tsl, 2).

    Columns are the partials with respect to M0 and T1rho.
    """
    t = _tsl_array(tsl_ms)
    e = np.exp(-t / p.t1rho)
    return np.stack([e, p.m0 * e * t / p.t1rho**2], axis=1)


def _fit_mono_batch(signals, t):
    """Vectorized LM over rows of ``signals`` (magnitudes, shape (n, k)).

    Returns (m0, t1rho, converged, degenerate, clamped) arrays.
    """
    sig = np.abs(np.asarray(signals, dtype=complex)).astype(float)
    n, k = sig.shape
    degenerate = (sig == 0).all(axis=1)

    s_first, s_last = sig[:, 0], sig[:, -1]
    m0 = np.where(s_first > 0, s_first, sig.max(axis=1))
    span = t[-1] - t[0]
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = s_first / s_last
        t0 = span / np.log(ratio)
    t0 = np.where((s_last > 0) & (ratio > 1.0), t0, np.nan)
    t0 = np.where(np.isnan(t0), np.where(s_first <= s_last, T1RHO_MAX_MS, max(T1RHO_MIN_MS, span / 30.0)), t0)
    t1 = np.clip(t0, T1RHO_MIN_MS, T1RHO_MAX_MS)

    def cost_of(m0v, t1v, rows):
        r = m0v[:, None] * np.exp(-t[None, :] / t1v[:, None]) - sig[rows]
        return (r * r).sum(axis=1)

    cost = cost_of(m0, t1, slice(None))
    lam = np.full(n, 1e-3)
    active = ~degenerate
    converged = np.zeros(n, dtype=bool)

    for _ in range(_MAX_ITERS):
        if not active.any():
            break
        ia = np.flatnonzero(active)
        m0a, t1a, lama = m0[ia], t1[ia], lam[ia]
        e = np.exp(-t[None, :] / t1a[:, None])
        model = m0a[:, None] * e
        r = model - sig[ia]
        j0 = e
        j1 = model * t[None, :] / (t1a**2)[:, None]
        a00 = (j0 * j0).sum(axis=1)
        a01 = (j0 * j1).sum(axis=1)
        a11 = (j1 * j1).sum(axis=1)
        g0 = (j0 * r).sum(axis=1)
        g1 = (j1 * r).sum(axis=1)
        d00 = a00 * (1.0 + lama)
        d11 = a11 * (1.0 + lama)
        det = d00 * d11 - a01 * a01
        ok = det > 1e-300
        det = np.where(ok, det, 1.0)
        step0 = -(d11 * g0 - a01 * g1) / det
        step1 = -(-a01 * g0 + d00 * g1) / det
        m0_new = np.maximum(m0a + np.where(ok, step0, 0.0), 0.0)
        t1_new = np.clip(t1a + np.where(ok, step1, 0.0), T1RHO_MIN_MS, T1RHO_MAX_MS)
        cost_new = cost_of(m0_new, t1_new, ia)
        accept = ok & (cost_new < cost[ia])
        done = accept & (np.abs(cost[ia] - cost_new) <= _REL_TOL * np.maximum(cost[ia], 1e-300))
        m0[ia] = np.where(accept, m0_new, m0a)
        t1[ia] = np.where(accept, t1_new, t1a)
        cost[ia] = np.where(accept, cost_new, cost[ia])
        lam[ia] = np.where(accept, np.maximum(lama * 0.1, 1e-12), np.minimum(lama * 10.0, 1e12))
        # a rejected step at huge damping means a (local) minimum: tiny steps no longer improve
        done |= (~accept) & (lam[ia] >= 1e12)
        converged[ia] |= done
        active[ia] = ~done

    m0 = np.where(degenerate, 0.0, m0)
    t1 = np.where(degenerate, T1RHO_MIN_MS, t1)
    clamped = ~degenerate & ((t1 <= T1RHO_MIN_MS) | (t1 >= T1RHO_MAX_MS))
    converged = converged & ~degenerate
    return m0, t1, converged, degenerate, clamped


def fit_mono(signal, tsl_ms):
    """Fit (M0, T1rho) to one magnitude signal.

    Complex input is reduced to magnitudes. All-zero signals return
    (0, lower clamp) flagged degenerate; hitting the iteration budget
    returns the best iterate flagged non-converged.

    Returns
    -------
    MonoFitResult
    """
    t = _tsl_array(tsl_ms)
    signal = np.atleast_1d(np.asarray(signal))
    if signal.shape != t.shape:
        raise DataError(f"signal length {signal.shape} != number of TSLs {t.shape}")
    m0, t1, conv, degen, clamp = _fit_mono_batch(signal[None, :], t)
    return MonoFitResult(
        params=MonoExpParams(m0=float(m0[0]), t1rho=float(t1[0])),
        converged=bool(conv[0]),
        degenerate=bool(degen[0]),
        clamped=bool(clamp[0]),
    )


def fit_map(x, support=None):
    """Fit every foreground voxel of an image series.

    Parameters
    ----------
    x : ImageSeries
    support : ndarray of bool, optional
        Foreground mask; defaults to all voxels.

    Returns
    -------
    (t1rho_map, m0_map, qc) : two float images (background 0) and a
        dict counting fitted/non-converged/degenerate/clamped voxels.
    """
    t = _tsl_array(x.tsl_ms)
    grid = x.grid
    if support is None:
        support = np.ones(grid, dtype=bool)
    support = np.asarray(support, dtype=bool)
    if support.shape != grid:
        raise DataError(f"support shape {support.shape} != grid {grid}")
    flat = x.data.reshape(-1, x.n_tsl)
    vox = np.flatnonzero(support.reshape(-1))
    t1_map = np.zeros(grid, dtype=float)
    m0_map = np.zeros(grid, dtype=float)
    qc = {"n_fit": int(vox.size), "non_converged": 0, "degenerate": 0, "clamped": 0}
    if vox.size:
        m0, t1, conv, degen, clamp = _fit_mono_batch(flat[vox], t)
        t1_map.reshape(-1)[vox] = t1
        m0_map.reshape(-1)[vox] = m0
        qc["non_converged"] = int((~conv & ~degen).sum())
        qc["degenerate"] = int(degen.sum())
        qc["clamped"] = int(clamp.sum())
    return t1_map, m0_map, qc
