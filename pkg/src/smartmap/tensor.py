"""Dense third-order tensor algebra: unfolding, mode products, HOSVD.

Tensors are plain complex ``numpy`` arrays with ``ndim == 3``. The
mode-i matricization stacks mode-i fibers as columns; the remaining
indices enumerate columns with the lowest-numbered index varying
fastest (the usual Kolda-Bader convention). ``fold`` inverts it and
``mode_product`` is defined through it, so the three stay consistent
by construction.
"""

from dataclasses import dataclass

import numpy as np

from smartmap.errors import DataError, NumericalError

__all__ = [
    "HosvdFactors",
    "fold",
    "hosvd",
    "hosvd_denoise",
    "mode_product",
    "unfold",
]


def _check_mode(mode):
    if mode not in (1, 2, 3):
        raise DataError(f"mode must be 1, 2 or 3, got {mode!r}")


def unfold(t, mode):
    """Matricize a third-order tensor along one mode.

    Parameters
    ----------
    t : ndarray, shape (N1, N2, N3)
        Input tensor.
    mode : int
        Mode to unfold along, 1-based (1, 2 or 3).

    Returns
    -------
    ndarray, shape (N_mode, prod of the other dims)
        Columns enumerate the remaining indices with the
        lowest-numbered one varying fastest.
    """
    t = np.asarray(t)
    if t.ndim != 3:
        raise DataError(f"expected a 3rd-order tensor, got ndim={t.ndim}")
    _check_mode(mode)
    ax = mode - 1
    return np.moveaxis(t, ax, 0).reshape(t.shape[ax], -1, order="F")


def fold(m, mode, dims):
    """Inverse of :func:`unfold` for the same mode and dims.

    Parameters
    ----------
    m : ndarray
        Matrix of shape ``(dims[mode-1], prod of the other dims)``.
    mode : int
        Mode the matrix was unfolded along (1-based).
    dims : tuple of int
        Target tensor shape ``(N1, N2, N3)``.
    """
    m = np.asarray(m)
    _check_mode(mode)
    if len(dims) != 3:
        raise DataError(f"dims must have length 3, got {dims!r}")
    ax = mode - 1
    rest = [dims[i] for i in range(3) if i != ax]
    expect = (dims[ax], rest[0] * rest[1])
    if m.shape != expect:
        raise DataError(f"matrix shape {m.shape} does not match dims {tuple(dims)} for mode {mode} (want {expect})")
    return np.moveaxis(m.reshape((dims[ax], *rest), order="F"), 0, ax)


def mode_product(t, u, mode):
    """i-mode product: multiply ``u`` onto the mode-``mode`` unfolding.

    Satisfies ``unfold(mode_product(t, u, i), i) == u @ unfold(t, i)``.
    The result replaces ``N_mode`` with the row count of ``u``.
    """
    t = np.asarray(t)
    u = np.asarray(u)
    if t.ndim != 3:
        raise DataError(f"expected a 3rd-order tensor, got ndim={t.ndim}")
    _check_mode(mode)
    ax = mode - 1
    if u.ndim != 2 or u.shape[1] != t.shape[ax]:
        raise DataError(f"matrix shape {u.shape} does not conform to tensor dim N{mode}={t.shape[ax]}")
    dims = list(t.shape)
    dims[ax] = u.shape[0]
    return fold(u @ unfold(t, mode), mode, tuple(dims))


@dataclass(frozen=True)
class HosvdFactors:
    """HOSVD of a third-order tensor.

    Attributes
    ----------
    core : ndarray
        Core tensor, shape ``(r1, r2, r3)`` with ``r_i = min(N_i, prod
        of the other dims)`` (economy factorization; the missing basis
        columns would only multiply zero core blocks).
    bases : tuple of ndarray
        Per-mode left singular vectors, shape ``(N_i, r_i)``, with
        orthonormal columns.
    svals : tuple of ndarray
        Singular values of each unfolding, descending.
    """

    core: np.ndarray
    bases: tuple
    svals: tuple

    @property
    def dims(self):
        return tuple(u.shape[0] for u in self.bases)

    def reconstruct(self):
        """Multiply the bases back onto the core."""
        t = self.core
        for mode, u in enumerate(self.bases, start=1):
            t = mode_product(t, u, mode)
        return t


def hosvd(t):
    """Higher-order SVD of a third-order tensor.

    The mode-n basis holds the left singular vectors of the mode-n
    unfolding; the core is ``t`` multiplied by the conjugate-transposed
    bases along every mode. Reconstruction is exact (no truncation).
    """
    t = np.asarray(t)
    if t.ndim != 3:
        raise DataError(f"expected a 3rd-order tensor, got ndim={t.ndim}")
    bases = []
    svals = []
    for mode in (1, 2, 3):
        try:
            u, s, _ = np.linalg.svd(unfold(t, mode), full_matrices=False)
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f"SVD of mode-{mode} unfolding did not converge") from exc
        bases.append(u)
        svals.append(s)
    core = t
    for mode, u in enumerate(bases, start=1):
        core = mode_product(core, u.conj().T, mode)
    return HosvdFactors(core=core, bases=tuple(bases), svals=tuple(svals))


def hosvd_denoise(t, lambdas):
    """Hard-threshold the HOSVD core and reconstruct.

    The absolute threshold for mode n is ``lambdas[n-1]`` times the
    largest singular value of the mode-n unfolding; a core entry
    survives only if its magnitude reaches every mode's threshold.
    With ``lambdas == (0, 0, 0)`` the input is reproduced exactly (up
    to floating point).

    Parameters
    ----------
    t : ndarray, shape (N1, N2, N3)
    lambdas : sequence of 3 floats
        Nonnegative threshold ratios, one per mode.

    Returns
    -------
    ndarray
        Denoised tensor, same shape as ``t``.
    """
    lambdas = tuple(float(v) for v in lambdas)
    if len(lambdas) != 3 or any(v < 0 for v in lambdas):
        raise DataError(f"lambdas must be 3 nonnegative ratios, got {lambdas!r}")
    fac = hosvd(t)
    thresh = max(lam * (s[0] if s.size else 0.0) for lam, s in zip(lambdas, fac.svals))
    core = np.where(np.abs(fac.core) >= thresh, fac.core, 0.0)
    out = core
    for mode, u in enumerate(fac.bases, start=1):
        out = mode_product(out, u, mode)
    return out
