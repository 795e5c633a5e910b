"""Quantitative T1rho mapping from undersampled k-space data.

The reconstruction couples two low-rank priors inside one ADMM solver:
groups of similar image patches stacked into third-order tensors, and
per-tissue Hankel tensors built along the spin-lock dimension. Phantom
simulation, sampling-mask generation, exponential fitting, and image
quality metrics round out the pipeline so every claim is testable at
desk scale.

Submodule imports are deferred (PEP 562) so the command line can pin
BLAS thread-pool sizes through environment variables before the first
NumPy import.
"""

import importlib

__version__ = "0.1.0"

_EXPORTS = {
    "CoilSensitivities": "smartmap.encoding",
    "ImageSeries": "smartmap.encoding",
    "KSpaceData": "smartmap.encoding",
    "SamplingMask": "smartmap.encoding",
    "add_noise": "smartmap.encoding",
    "adjoint": "smartmap.encoding",
    "forward": "smartmap.encoding",
    "make_mask_1d": "smartmap.encoding",
    "make_mask_poisson": "smartmap.encoding",
    "MonoExpParams": "smartmap.fitting",
    "BiExpParams": "smartmap.fitting",
    "bi_model": "smartmap.fitting",
    "fit_map": "smartmap.fitting",
    "fit_mono": "smartmap.fitting",
    "mono_model": "smartmap.fitting",
    "PhantomSpec": "smartmap.phantom",
    "RankExperimentConfig": "smartmap.phantom",
    "generate_phantom": "smartmap.phantom",
    "rank_experiment": "smartmap.phantom",
    "ReconConfig": "smartmap.solver",
    "reconstruct": "smartmap.solver",
    "zero_filled": "smartmap.solver",
    "HosvdFactors": "smartmap.tensor",
    "fold": "smartmap.tensor",
    "hosvd": "smartmap.tensor",
    "hosvd_denoise": "smartmap.tensor",
    "mode_product": "smartmap.tensor",
    "unfold": "smartmap.tensor",
}

__all__ = sorted(_EXPORTS)


def __getattr__(name):
    """Resolve a public name by importing its home module on demand."""
    module = _EXPORTS.get(name)
    if module is None:
        raise AttributeError(f"module 'smartmap' has no attribute {name!r}")
    value = getattr(importlib.import_module(module), name)
    globals()[name] = value
    return value


def __dir__():
    return sorted(set(globals()) | set(_EXPORTS))
