"""Image-quality metrics on magnitude images.

All metrics compare magnitudes, so complex reconstructions can be
scored directly against complex or real references. SSIM uses an
11-point Gaussian window (sigma 1.5) evaluated on fully interior
windows only; HFEN uses a 15-point zero-sum Laplacian-of-Gaussian
kernel (sigma 1.5) with nearest-edge padding.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from smartmap.errors import DataError

__all__ = ["MetricReport", "hfen", "nrmse", "psnr", "report", "ssim"]

_PSNR_CAP_DB = 300.0
_SSIM_WIN = 11
_SSIM_SIGMA = 1.5
_HFEN_WIN = 15
_HFEN_SIGMA = 1.5


def _mag_pair(x, ref):
    x = np.abs(np.asarray(x))
    ref = np.abs(np.asarray(ref))
    if x.shape != ref.shape:
        raise DataError(f"shape mismatch {x.shape} vs {ref.shape}")
    return x.astype(float), ref.astype(float)


def nrmse(x, ref):
    """||x - ref|| / ||ref|| on magnitudes."""
    x, ref = _mag_pair(x, ref)
    denom = np.linalg.norm(ref)
    if denom == 0:
        raise DataError("nrmse undefined for an all-zero reference")
    return float(np.linalg.norm(x - ref) / denom)


def psnr(x, ref):
    """Peak SNR in dB against max(|ref|); identical inputs cap at 300 dB."""
    x, ref = _mag_pair(x, ref)
    peak = ref.max()
    if peak == 0:
        raise DataError("psnr undefined for an all-zero reference")
    rmse = np.sqrt(np.mean((x - ref) ** 2))
    if rmse == 0:
        return _PSNR_CAP_DB
    return float(min(20.0 * np.log10(peak / rmse), _PSNR_CAP_DB))


def _gaussian_window(size, sigma, ndim):
    u = np.arange(size, dtype=float) - (size - 1) / 2.0
    g1 = np.exp(-(u**2) / (2.0 * sigma**2))
    w = g1
    for _ in range(ndim - 1):
        w = np.multiply.outer(w, g1)
    return w / w.sum()


def _windowed_mean(img, w):
    half = (w.shape[0] - 1) // 2
    full = ndimage.correlate(img, w, mode="constant", cval=0.0)
    sl = tuple(slice(half, n - half) for n in img.shape)
    return full[sl]


def ssim(x, ref):
    """Mean structural similarity over interior windows.

    Constants follow the common convention K1=0.01, K2=0.03 with the
    dynamic range taken from the reference maximum.
    """
    x, ref = _mag_pair(x, ref)
    if any(n < _SSIM_WIN for n in x.shape):
        raise DataError(f"image smaller than the {_SSIM_WIN}-point SSIM window: {x.shape}")
    peak = ref.max()
    if peak == 0:
        raise DataError("ssim undefined for an all-zero reference")
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    w = _gaussian_window(_SSIM_WIN, _SSIM_SIGMA, x.ndim)
    mu_x = _windowed_mean(x, w)
    mu_r = _windowed_mean(ref, w)
    var_x = _windowed_mean(x * x, w) - mu_x**2
    var_r = _windowed_mean(ref * ref, w) - mu_r**2
    cov = _windowed_mean(x * ref, w) - mu_x * mu_r
    # clip tiny negative variances produced by floating-point cancellation
    var_x = np.maximum(var_x, 0.0)
    var_r = np.maximum(var_r, 0.0)
    num = (2.0 * mu_x * mu_r + c1) * (2.0 * cov + c2)
    den = (mu_x**2 + mu_r**2 + c1) * (var_x + var_r + c2)
    return float(np.mean(num / den))


def _log_kernel(size, sigma, ndim):
    axes = np.meshgrid(*[np.arange(size, dtype=float) - (size - 1) / 2.0] * ndim, indexing="ij")
    r2 = sum(a**2 for a in axes)
    g = np.exp(-r2 / (2.0 * sigma**2))
    h = (r2 - ndim * sigma**2) / sigma**4 * g
    h /= g.sum()
    return h - h.mean()


def hfen(x, ref):
    """High-frequency error norm relative to the filtered reference."""
    x, ref = _mag_pair(x, ref)
    h = _log_kernel(_HFEN_WIN, _HFEN_SIGMA, x.ndim)
    fx = ndimage.convolve(x, h, mode="nearest")
    fr = ndimage.convolve(ref, h, mode="nearest")
    denom = np.linalg.norm(fr)
    if denom == 0:
        raise DataError("hfen undefined: reference has no high-frequency content")
    return float(np.linalg.norm(fx - fr) / denom)


@dataclass
class MetricReport:
    """Per-echo and aggregate scores of a reconstruction against a reference."""

    reference: str
    per_tsl: dict = field(default_factory=dict)
    aggregate: dict = field(default_factory=dict)

    def to_dict(self):
        return {"reference": self.reference, "per_tsl": self.per_tsl, "aggregate": self.aggregate}


def report(x, ref, reference="reference"):
    """Score an image series against a reference series.

    Per-echo values are listed for each metric; the aggregate nRMSE and
    PSNR are computed over the full stack, SSIM and HFEN as the mean of
    the per-echo values.
    """
    if x.data.shape != ref.data.shape:
        raise DataError(f"series shapes differ: {x.data.shape} vs {ref.data.shape}")
    rep = MetricReport(reference=reference)
    per = {"nrmse": [], "psnr": [], "ssim": [], "hfen": []}
    for i in range(x.n_tsl):
        a, b = x.data[..., i], ref.data[..., i]
        per["nrmse"].append(nrmse(a, b))
        per["psnr"].append(psnr(a, b))
        per["ssim"].append(ssim(a, b))
        per["hfen"].append(hfen(a, b))
    rep.per_tsl = per
    rep.aggregate = {
        "nrmse": nrmse(x.data, ref.data),
        "psnr": psnr(x.data, ref.data),
        "ssim": float(np.mean(per["ssim"])),
        "hfen": float(np.mean(per["hfen"])),
    }
    return rep
