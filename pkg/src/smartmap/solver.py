"""ADMM reconstruction coupling patch and Hankel tensor denoising.

Each iteration alternates three subproblems: P2 hard-thresholds the
HOSVD cores of block-matched patch groups, P3 does the same for
per-tissue stacks of temporal Hankel matrices, and P1 restores data
consistency by conjugate gradients on the normal equations

    (E^H E + mu1 P^T P + mu2 H^T H) X
        = E^H Y + mu1 P^T(T - a1/mu1) + mu2 H^T(Z - a2/mu2),

where P^T P and H^T H are diagonal (patch coverage counts and
anti-diagonal multiplicities). Scaled dual variables close the loop
with plain ascent steps.

The production loop in :func:`reconstruct` stores the duals as image
fields rather than per-group tensor lists: re-extracting the field
per group reproduces the per-group updates aggregated by coverage,
at a fraction of the memory. The per-group forms remain available as
:func:`solve_p1` / :func:`solve_p2` / :func:`solve_p3` /
:func:`update_multipliers` operating on an explicit
:class:`SolverState`.
"""

import sys
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from smartmap.encoding import CoilSensitivities, ImageSeries, KSpaceData, adjoint, forward
from smartmap.errors import ConfigError, DataError, NumericalError
from smartmap.fitting import fit_map
from smartmap.parametric import (
    HankelSpec,
    cluster_tissues,
    extract_parametric_tensors,
    hankel_scatter_sum,
    multiplicity_counts,
    support_mask,
)
from smartmap.patching import (
    PatchConfig,
    PatchGroupIndex,
    aggregate,
    block_match,
    coverage_counts,
    extract_tensors,
    scatter_sum,
)
from smartmap.tensor import hosvd_denoise

__all__ = [
    "MODES",
    "ReconConfig",
    "ReconResult",
    "SolverState",
    "lagrangian",
    "reconstruct",
    "solve_p1",
    "solve_p2",
    "solve_p3",
    "update_multipliers",
    "zero_filled",
]

MODES = ("smart", "spatial_only", "parametric_only")

_CHUNK_GROUPS = 256


@dataclass
class ReconConfig:
    """Solver parameters.

    ``lambda1 = None`` resolves at run time to (0.2, 0.1, 0.1) for 2D
    grids and (0.15, 0.1, 0.1) for 3D; ``hankel_k = None`` resolves to
    ceil(n_tsl / 2). The threshold vectors are ratios of each mode's
    largest singular value, applied per tensor.
    """

    admm_iters: int = 15
    cg_iters: int = 15
    cg_tol: float = 1e-7
    lambda1: tuple = None
    lambda2: tuple = (0.05, 0.01, 0.01)
    mu1: float = 0.01
    mu2: float = 0.01
    patch: PatchConfig = None
    n_groups: int = 60
    hankel_k: int = None
    mode: str = "smart"
    refit_period: int = 3

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.admm_iters < 1 or self.cg_iters < 1:
            raise ConfigError(f"iteration counts must be >= 1: {self.admm_iters}, {self.cg_iters}")
        if self.cg_tol <= 0:
            raise ConfigError(f"cg_tol must be positive, got {self.cg_tol}")
        if self.mu1 < 0 or self.mu2 < 0:
            raise ConfigError(f"penalty parameters must be nonnegative: {self.mu1}, {self.mu2}")
        if self.refit_period < 1:
            raise ConfigError(f"refit_period must be >= 1, got {self.refit_period}")
        if self.n_groups < 1:
            raise ConfigError(f"n_groups must be >= 1, got {self.n_groups}")
        if self.patch is None:
            self.patch = PatchConfig()
        if self.lambda1 is not None:
            self.lambda1 = tuple(float(v) for v in self.lambda1)
        self.lambda2 = tuple(float(v) for v in self.lambda2)

    def resolve_lambda1(self, grid):
        if self.lambda1 is not None:
            return self.lambda1
        return (0.2, 0.1, 0.1) if len(grid) == 2 else (0.15, 0.1, 0.1)

    def resolve_hankel(self, n_tsl):
        return HankelSpec(k=self.hankel_k) if self.hankel_k is not None else HankelSpec.default(n_tsl)


@dataclass
class SolverState:
    """Explicit ADMM state with per-group tensors and multipliers.

    ``a1_list`` conforms elementwise to ``t_list`` and ``a2_list`` to
    ``z_list``; empty lists mean the corresponding term is inactive
    (or its multipliers are zero, for the dual lists).
    """

    x: ImageSeries
    t_list: list = field(default_factory=list)
    z_list: list = field(default_factory=list)
    a1_list: list = field(default_factory=list)
    a2_list: list = field(default_factory=list)
    groups: PatchGroupIndex = None
    partition: object = None
    hankel: HankelSpec = None
    t1rho_map: np.ndarray = None
    history: list = field(default_factory=list)


@dataclass
class ReconResult:
    """Reconstruction output: image series, parameter maps, diagnostics."""

    x: ImageSeries
    t1rho_map: np.ndarray
    m0_map: np.ndarray
    history: list
    qc: dict
    mode: str


def zero_filled(y, s=None):
    """Adjoint reconstruction E^H(Y) (zero-filled inverse FFT)."""
    return adjoint(y, s)


def _rdot(a, b):
    return float(np.real(np.vdot(a, b)))


def _cg(apply_a, b, x0, tol, iters):
    """Conjugate gradients on a Hermitian PSD operator.

    Returns (solution, residual norms per iteration, breakdown flag);
    a non-positive curvature direction stops early with the flag set
    and the current iterate returned.
    """
    x = x0.astype(complex, copy=True)
    r = b - apply_a(x)
    p = r.copy()
    rs = _rdot(r, r)
    b_norm = np.sqrt(_rdot(b, b))
    resids = [np.sqrt(rs)]
    breakdown = False
    if b_norm == 0.0:
        return np.zeros_like(x), resids, breakdown
    for _ in range(iters):
        if np.sqrt(rs) <= tol * b_norm:
            break
        ap = apply_a(p)
        pap = _rdot(p, ap)
        if not np.isfinite(pap) or pap <= 0.0:
            breakdown = True
            break
        alpha = rs / pap
        x += alpha * p
        r -= alpha * ap
        rs_new = _rdot(r, r)
        p = r + (rs_new / rs) * p
        rs = rs_new
        resids.append(np.sqrt(rs))
    return x, resids, breakdown


def _normal_apply(s, mask, tsl_ms, weights):
    """Closure computing (E^H E + diag(weights)) v for image arrays."""

    def apply_a(v):
        series = ImageSeries(data=v, tsl_ms=tsl_ms)
        ehe = adjoint(forward(series, s, mask), s).data
        return ehe + weights * v

    return apply_a


def _denoise_list(tensors, lambdas):
    """Threshold-denoise a list of order-3 tensors, batched by shape.

    All-zero thresholds return the inputs unchanged (exact identity).
    """
    if max(lambdas) == 0.0:
        return list(tensors)
    out = [None] * len(tensors)
    buckets = defaultdict(list)
    for i, t in enumerate(tensors):
        buckets[t.shape].append(i)
    for shape, idxs in buckets.items():
        if len(idxs) == 1:
            i = idxs[0]
            out[i] = hosvd_denoise(tensors[i], lambdas)
            continue
        stack = np.stack([tensors[i] for i in idxs])
        den = _hosvd_denoise_stack(stack, lambdas)
        for j, i in enumerate(idxs):
            out[i] = den[j]
    return out


def _bmode(stack, mats, axis):
    """Batched mode product along ``axis`` (1-based over tensor modes)."""
    x = np.moveaxis(stack, axis, 1)
    lead = x.shape[:2]
    rest = x.shape[2:]
    y = mats @ x.reshape(lead[0], lead[1], -1)
    return np.moveaxis(y.reshape((lead[0], mats.shape[1]) + rest), 1, axis)


def _mode_basis(m):
    """Left singular vectors and values of a batched matrix, via the Gram
    eigendecomposition (the right factors are never needed here)."""
    try:
        w, v = np.linalg.eigh(m @ np.conj(np.swapaxes(m, 1, 2)))
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"eigendecomposition failed on a patch-group stack: {exc}") from None
    s = np.sqrt(np.maximum(w[:, ::-1], 0.0))
    return v[:, :, ::-1], s


def _hosvd_denoise_stack(stack, lambdas):
    """Vectorized HOSVD hard-threshold denoising of a (G, d1, d2, d3) stack.

    Matches :func:`smartmap.tensor.hosvd_denoise` group by group.
    Singular values and left bases are invariant to the column order
    of the unfoldings, so C-order matricizations are used. Core slices
    along mode n have Frobenius norm equal to the n-th mode singular
    values, so every basis column whose singular value falls below the
    threshold yields a fully zeroed core slice; those columns are
    dropped before the core is formed, which is what makes the batch
    path fast.
    """
    g, d1, d2, d3 = stack.shape
    m1 = stack.reshape(g, d1, d2 * d3)
    m2 = np.swapaxes(stack, 1, 2).reshape(g, d2, d1 * d3)
    m3 = np.moveaxis(stack, 3, 1).reshape(g, d3, d1 * d2)
    u1, s1 = _mode_basis(m1)
    u2, s2 = _mode_basis(m2)
    u3, s3 = _mode_basis(m3)
    thresh = np.maximum.reduce([lam * sv[:, 0] for lam, sv in zip(lambdas, (s1, s2, s3))])
    t_col = thresh[:, None]
    keep = [max(int((sv >= t_col).sum(axis=1).max()), 1) for sv in (s1, s2, s3)]
    u1, u2, u3 = u1[:, :, : keep[0]], u2[:, :, : keep[1]], u3[:, :, : keep[2]]
    core = _bmode(stack, np.conj(np.swapaxes(u1, 1, 2)), 1)
    core = _bmode(core, np.conj(np.swapaxes(u2, 1, 2)), 2)
    core = _bmode(core, np.conj(np.swapaxes(u3, 1, 2)), 3)
    core *= np.abs(core) >= thresh[:, None, None, None]
    out = _bmode(core, u1, 1)
    out = _bmode(out, u2, 2)
    return _bmode(out, u3, 3)


def _slice_index(idx, lo, hi):
    return PatchGroupIndex(
        corners=idx.corners[lo:hi], distances=idx.distances[lo:hi], b=idx.b, grid=idx.grid
    )


def _p2_sums(comb, idx, lambdas):
    """Denoise every patch group of ``comb`` and scatter-sum the results.

    Processes the groups in chunks so at most a few hundred tensors
    are materialized at once, and denoises in single precision: the
    thresholds are relative to each tensor's own singular values, so
    the extra rounding is far below the threshold scale. Accumulation
    and everything downstream stay in double. Returns the summed
    image P^T(T).
    """
    grid, n_tsl = comb.grid, comb.n_tsl
    low = ImageSeries(data=comb.data.astype(np.complex64), tsl_ms=comb.tsl_ms)
    sums = np.zeros(grid + (n_tsl,), dtype=complex)
    for lo in range(0, idx.n_groups, _CHUNK_GROUPS):
        sub = _slice_index(idx, lo, lo + _CHUNK_GROUPS)
        denoised = _denoise_list(extract_tensors(low, sub), lambdas)
        sums += scatter_sum(denoised, sub, grid, n_tsl)
    return sums


def _conform(duals, tensors, what):
    if not duals:
        return [np.zeros_like(t) for t in tensors]
    if len(duals) != len(tensors) or any(a.shape != t.shape for a, t in zip(duals, tensors)):
        raise DataError(f"{what} multipliers do not conform to their tensors")
    return duals


def solve_p2(state, cfg):
    """Patch subproblem: denoise P_i(X) + a1_i/mu1 per group.

    Returns the new tensor list and the coverage-averaged image
    estimate. ``state.groups`` must be current for ``state.x``.
    """
    if state.groups is None:
        raise DataError("solve_p2 requires block-matching results in state.groups")
    lambdas = cfg.resolve_lambda1(state.x.grid)
    tensors = extract_tensors(state.x, state.groups)
    a1 = _conform(state.a1_list, tensors, "patch")
    if cfg.mu1 > 0:
        tensors = [t + a / cfg.mu1 for t, a in zip(tensors, a1)]
    new = _denoise_list(tensors, lambdas)
    est = aggregate(new, state.groups, state.x.grid, state.x.tsl_ms)
    return new, est


def solve_p3(state, cfg):
    """Hankel subproblem: denoise H_j(X) + a2_j/mu2 per tissue group.

    Returns the new tensor list and the anti-diagonal-averaged image
    estimate (zero off the partition's foreground).
    """
    if state.partition is None or state.hankel is None:
        raise DataError("solve_p3 requires a tissue partition and Hankel spec in state")
    tensors = extract_parametric_tensors(state.x, state.partition, state.hankel)
    a2 = _conform(state.a2_list, tensors, "Hankel")
    if cfg.mu2 > 0:
        tensors = [t + a / cfg.mu2 for t, a in zip(tensors, a2)]
    new = _denoise_list(tensors, cfg.lambda2)
    grid, n_tsl = state.x.grid, state.x.n_tsl
    sums = hankel_scatter_sum(new, state.partition, state.hankel, grid, n_tsl)
    counts = multiplicity_counts(state.hankel, state.partition, n_tsl)
    est = np.where(counts > 0, sums / np.maximum(counts, 1), 0.0)
    return new, ImageSeries(data=est, tsl_ms=state.x.tsl_ms)


def solve_p1(state, y, s, cfg):
    """Data-consistency subproblem by conjugate gradients.

    Solves (E^H E + mu1 P^T P + mu2 H^T H) X = E^H Y
    + mu1 P^T(T) - P^T(a1) + mu2 H^T(Z) - H^T(a2), warm-started at
    ``state.x``. Terms with empty tensor lists are dropped.

    Returns
    -------
    (ImageSeries, dict)
        The solution and {"residuals": [float], "breakdown": bool}.
    """
    grid, n_tsl = state.x.grid, state.x.n_tsl
    b = adjoint(y, s).data
    weights = np.zeros(grid + (n_tsl,))
    if state.t_list:
        if state.groups is None:
            raise DataError("solve_p1 needs state.groups to place patch tensors")
        b += cfg.mu1 * scatter_sum(state.t_list, state.groups, grid, n_tsl)
        if state.a1_list:
            _conform(state.a1_list, state.t_list, "patch")
            b -= scatter_sum(state.a1_list, state.groups, grid, n_tsl)
        weights += cfg.mu1 * coverage_counts(state.groups, grid)[..., None]
    if state.z_list:
        if state.partition is None or state.hankel is None:
            raise DataError("solve_p1 needs a partition and Hankel spec to place tensors")
        b += cfg.mu2 * hankel_scatter_sum(state.z_list, state.partition, state.hankel, grid, n_tsl)
        if state.a2_list:
            _conform(state.a2_list, state.z_list, "Hankel")
            b -= hankel_scatter_sum(state.a2_list, state.partition, state.hankel, grid, n_tsl)
        weights += cfg.mu2 * multiplicity_counts(state.hankel, state.partition, n_tsl)
    apply_a = _normal_apply(s, y.mask, state.x.tsl_ms, weights)
    sol, resids, breakdown = _cg(apply_a, b, state.x.data, cfg.cg_tol, cfg.cg_iters)
    return ImageSeries(data=sol, tsl_ms=state.x.tsl_ms), {"residuals": resids, "breakdown": breakdown}


def update_multipliers(state, cfg):
    """Dual ascent: a1_i += mu1 (P_i(X) - T_i), a2_j += mu2 (H_j(X) - Z_j).

    Mutates and returns ``state``. Missing dual lists start at zero.
    With exact consensus or zero penalties the duals are unchanged.
    """
    if state.t_list:
        cur = extract_tensors(state.x, state.groups)
        if len(cur) != len(state.t_list) or any(c.shape != t.shape for c, t in zip(cur, state.t_list)):
            raise DataError("patch tensors do not conform to the current groups")
        a1 = _conform(state.a1_list, state.t_list, "patch")
        state.a1_list = [a + cfg.mu1 * (p - t) for a, p, t in zip(a1, cur, state.t_list)]
    if state.z_list:
        cur = extract_parametric_tensors(state.x, state.partition, state.hankel)
        if len(cur) != len(state.z_list) or any(c.shape != z.shape for c, z in zip(cur, state.z_list)):
            raise DataError("Hankel tensors do not conform to the current partition")
        a2 = _conform(state.a2_list, state.z_list, "Hankel")
        state.a2_list = [a + cfg.mu2 * (h - z) for a, h, z in zip(a2, cur, state.z_list)]
    return state


def lagrangian(state, y, s, cfg):
    """Smooth augmented-Lagrangian value at the current state.

    Data term plus, per active group, Re<a, P(X) - T> + mu/2 ||P(X) -
    T||^2 (and the Hankel analog). The tensor regularizer itself is
    constant in X, so this is the quantity the P1 step minimizes; it
    must not increase across a warm-started CG solve.
    """
    resid = forward(state.x, s, y.mask).data - y.data
    val = 0.5 * _rdot(resid, resid)
    if state.t_list:
        cur = extract_tensors(state.x, state.groups)
        a1 = _conform(state.a1_list, state.t_list, "patch")
        for p, t, a in zip(cur, state.t_list, a1):
            d = p - t
            val += _rdot(a, d) + 0.5 * cfg.mu1 * _rdot(d, d)
    if state.z_list:
        cur = extract_parametric_tensors(state.x, state.partition, state.hankel)
        a2 = _conform(state.a2_list, state.z_list, "Hankel")
        for h, z, a in zip(cur, state.z_list, a2):
            d = h - z
            val += _rdot(a, d) + 0.5 * cfg.mu2 * _rdot(d, d)
    return val


def _refit_map(x, support):
    t1rho_map, m0_map, qc = fit_map(x, support)
    return t1rho_map, m0_map, qc


def reconstruct(y, s, cfg, verbose=True):
    """Run the full ADMM reconstruction.

    Initializes X = E^H(Y) with zero duals, then iterates: block-match
    the first-echo magnitude and denoise the patch groups (P2),
    refresh the tissue partition every ``refit_period`` iterations and
    denoise the Hankel groups (P3), restore data consistency by CG
    (P1), and take dual ascent steps. The relative solution change is
    recorded from iteration 2 onward; a final parameter fit produces
    the T1rho and M0 maps. Modes ``spatial_only`` and
    ``parametric_only`` drop the other tensor term entirely.

    Parameters
    ----------
    y : KSpaceData
    s : CoilSensitivities or None
    cfg : ReconConfig
    verbose : bool
        Log one line per iteration to standard error.

    Returns
    -------
    ReconResult
    """
    if not isinstance(y, KSpaceData):
        raise DataError(f"reconstruct expects KSpaceData, got {type(y).__name__}")
    if s is None:
        s = CoilSensitivities.identity(y.grid)
    grid, n_tsl, tsl_ms = y.grid, y.n_tsl, y.tsl_ms
    lam1 = cfg.resolve_lambda1(grid)
    hankel = cfg.resolve_hankel(n_tsl)
    use_p2 = cfg.mode in ("smart", "spatial_only")
    use_p3 = cfg.mode in ("smart", "parametric_only")
    if use_p2 and cfg.mu1 <= 0:
        raise ConfigError(f"mode {cfg.mode} requires mu1 > 0")
    if use_p3 and cfg.mu2 <= 0:
        raise ConfigError(f"mode {cfg.mode} requires mu2 > 0")

    x = adjoint(y, s)
    xd = x.data.copy()
    ehy = xd.copy()
    y_norm = np.linalg.norm(y.data)
    a1 = np.zeros_like(xd)
    a2 = np.zeros_like(xd)
    qc = {"cg_breakdowns": 0, "cg_iterations": []}
    history = []

    support = partition = None
    if use_p3:
        support = support_mask(x)
        t1rho_map, _, fit_qc = _refit_map(x, support)
        qc["initial_fit"] = fit_qc

    for it in range(1, cfg.admm_iters + 1):
        series = ImageSeries(data=xd, tsl_ms=tsl_ms)
        b = ehy.copy()
        weights = np.zeros(grid + (n_tsl,))
        tbar = zbar = None
        c1 = c2 = None
        if use_p2:
            groups = block_match(np.abs(xd[..., 0]), cfg.patch)
            comb = ImageSeries(data=xd + a1 / cfg.mu1, tsl_ms=tsl_ms)
            sums = _p2_sums(comb, groups, lam1)
            c1 = coverage_counts(groups, grid)[..., None]
            tbar = np.where(c1 > 0, sums / np.maximum(c1, 1), 0.0)
            b += cfg.mu1 * sums - c1 * a1
            weights = weights + cfg.mu1 * c1
        if use_p3:
            if it > 1 and (it - 1) % cfg.refit_period == 0:
                t1rho_map, _, _ = _refit_map(series, support)
            partition = cluster_tissues(t1rho_map, support, cfg.n_groups)
            comb = ImageSeries(data=xd + a2 / cfg.mu2, tsl_ms=tsl_ms)
            tensors = extract_parametric_tensors(comb, partition, hankel)
            denoised = _denoise_list(tensors, cfg.lambda2)
            sums = hankel_scatter_sum(denoised, partition, hankel, grid, n_tsl)
            c2 = multiplicity_counts(hankel, partition, n_tsl)
            zbar = np.where(c2 > 0, sums / np.maximum(c2, 1), 0.0)
            b += cfg.mu2 * sums - c2 * a2
            weights = weights + cfg.mu2 * c2

        apply_a = _normal_apply(s, y.mask, tsl_ms, weights)
        x_new, resids, breakdown = _cg(apply_a, b, xd, cfg.cg_tol, cfg.cg_iters)
        if breakdown:
            qc["cg_breakdowns"] += 1
        qc["cg_iterations"].append(len(resids) - 1)

        if use_p2:
            a1 = np.where(c1 > 0, a1 + cfg.mu1 * (x_new - tbar), a1)
        if use_p3:
            a2 = np.where(c2 > 0, a2 + cfg.mu2 * (x_new - zbar), a2)

        rel = None
        if it >= 2:
            denom = np.linalg.norm(xd)
            rel = float(np.linalg.norm(x_new - xd) / denom) if denom > 0 else 0.0
            history.append(rel)
        xd = x_new
        if verbose:
            series = ImageSeries(data=xd, tsl_ms=tsl_ms)
            dc = np.linalg.norm(forward(series, s, y.mask).data - y.data)
            dc = float(dc / y_norm) if y_norm > 0 else 0.0
            change = f"{rel:.3e}" if rel is not None else "--"
            print(
                f"[smartmap] iter {it:2d}/{cfg.admm_iters} mode={cfg.mode} rel_change={change} data_resid={dc:.3e}",
                file=sys.stderr,
            )

    final = ImageSeries(data=xd, tsl_ms=tsl_ms)
    t1rho_map, m0_map, fit_qc = _refit_map(final, support_mask(final))
    qc["final_fit"] = fit_qc
    return ReconResult(x=final, t1rho_map=t1rho_map, m0_map=m0_map, history=history, qc=qc, mode=cfg.mode)
