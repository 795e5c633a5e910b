"""Raw-array files with JSON sidecars, CSV tables, PNGs, and figures.

Arrays travel as flat little-endian binaries next to a JSON sidecar
recording dtype, dims, and domain metadata. Complex image and k-space
stacks are stored as interleaved float32 pairs (``c64le``), masks as
uint8, parameter maps as float32. The format is deliberately
dependency-light: any tool that can read the sidecar and
``np.fromfile`` can consume the artifacts, and rewriting the same data
yields identical bytes. PNG emission (via Pillow) and matplotlib
figures cover the visual outputs that accompany the delimited tables.
"""

import csv
import json
from pathlib import Path

import numpy as np

from smartmap.encoding import ImageSeries, KSpaceData, SamplingMask
from smartmap.errors import ConfigError, DataError

__all__ = [
    "emit_png",
    "read_array",
    "read_json",
    "read_kspace",
    "read_map",
    "read_mask",
    "read_series",
    "save_convergence_figure",
    "save_metric_figure",
    "save_rank_figure",
    "write_array",
    "write_csv",
    "write_json",
    "write_kspace",
    "write_map",
    "write_mask",
    "write_series",
]

_DTYPE_TOKENS = {
    "c64le": "<c8",
    "c128le": "<c16",
    "f32le": "<f4",
    "f64le": "<f8",
    "u1": "|u1",
    "i32le": "<i4",
    "u16le": "<u2",
}
_TOKEN_OF = {np.dtype(v): k for k, v in _DTYPE_TOKENS.items()}


def _sidecar(path):
    """Sidecar path for a binary: ``foo.bin`` pairs with ``foo.json``."""
    path = Path(path)
    if path.suffix == ".bin":
        return path.with_suffix(".json")
    return Path(str(path) + ".json")


def _jsonable(obj):
    """Recursively convert numpy scalars/arrays and paths for JSON."""
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, Path):
        return str(obj)
    return obj


def write_json(path, obj):
    """Write ``obj`` as sorted-key JSON (stable bytes across reruns)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    text = json.dumps(_jsonable(obj), indent=2, sort_keys=True)
    path.write_text(text + "\n", encoding="utf-8")
    return path


def read_json(path):
    """Read a JSON document, mapping I/O problems to :class:`DataError`."""
    path = Path(path)
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise DataError(f"{path}: file not found") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from exc


def write_array(path, arr, meta=None):
    """Write an array as little-endian raw bytes plus a JSON sidecar.

    Parameters
    ----------
    path : path-like
        Binary destination, conventionally ``*.bin``.
    arr : ndarray
        Array of a supported dtype (complex64/128, float32/64, uint8,
        uint16, int32). The dtype is preserved (byte order forced
        little-endian) so write-then-read round trips are bit-exact.
    meta : dict, optional
        Extra sidecar fields merged with dtype/dims/order.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.asarray(arr)
    little = arr.dtype.newbyteorder("<")
    token = _TOKEN_OF.get(np.dtype(little))
    if token is None:
        raise ConfigError(
            f"{path}: unsupported dtype {arr.dtype}; expected one of "
            f"{sorted(_DTYPE_TOKENS)}"
        )
    arr = np.ascontiguousarray(arr, dtype=little)
    arr.tofile(path)
    sidecar = {"dtype": token, "dims": list(arr.shape), "order": "C"}
    sidecar.update(_jsonable(meta or {}))
    write_json(_sidecar(path), sidecar)
    return path


def read_array(path):
    """Read a raw binary written by :func:`write_array`.

    Returns
    -------
    (ndarray, dict)
        The array (dims and dtype restored) and the full sidecar.
    """
    path = Path(path)
    meta = read_json(_sidecar(path))
    for key in ("dtype", "dims"):
        if key not in meta:
            raise DataError(f"{_sidecar(path)}: sidecar missing field '{key}'")
    token = meta["dtype"]
    if token not in _DTYPE_TOKENS:
        raise DataError(f"{_sidecar(path)}: unknown dtype token {token!r}")
    dtype = np.dtype(_DTYPE_TOKENS[token])
    dims = tuple(int(n) for n in meta["dims"])
    try:
        flat = np.fromfile(path, dtype=dtype)
    except FileNotFoundError as exc:
        raise DataError(f"{path}: file not found") from exc
    expected = int(np.prod(dims)) if dims else 1
    if flat.size != expected:
        raise DataError(
            f"{path}: expected {expected} items of {token} for dims "
            f"{dims}, found {flat.size}"
        )
    return flat.reshape(dims), meta


def write_series(path, series, kind="series", **extra):
    """Write an image series as ``c64le`` with its TSLs in the sidecar.

    On-disk precision is single (interleaved float32 pairs); pass data
    already in complex64 when bit-exact round trips matter.
    """
    meta = {"kind": kind, "tsl_ms": list(series.tsl_ms)}
    meta.update(extra)
    return write_array(path, np.asarray(series.data, dtype=np.complex64), meta)


def read_series(path):
    """Read an image series back into an :class:`ImageSeries`."""
    data, meta = read_array(path)
    if "tsl_ms" not in meta:
        raise DataError(f"{_sidecar(path)}: sidecar missing field 'tsl_ms'")
    return ImageSeries(np.ascontiguousarray(data), tuple(meta["tsl_ms"]))


def write_kspace(path, y, **extra):
    """Write k-space samples; the mask is stored separately."""
    return write_series(path, y, kind="kspace", **extra)


def read_kspace(path, mask):
    """Assemble a :class:`KSpaceData` from a k-space file and its mask.

    Unsampled locations are re-zeroed against the supplied mask so the
    KSpaceData invariant holds even for hand-edited files.
    """
    data, meta = read_array(path)
    if "tsl_ms" not in meta:
        raise DataError(f"{_sidecar(path)}: sidecar missing field 'tsl_ms'")
    data = np.ascontiguousarray(data)
    try:
        data = data * mask.data[..., None, :]
    except ValueError as exc:
        raise DataError(
            f"{path}: k-space shape {data.shape} does not match mask "
            f"shape {mask.data.shape}"
        ) from exc
    return KSpaceData(data, mask, tuple(meta["tsl_ms"]))


def write_mask(path, mask):
    """Write a sampling mask as uint8 with rate/seed metadata."""
    data = mask.data.astype(np.uint8)
    achieved = float(data.size / max(int(data.sum()), 1))
    meta = {
        "kind": "mask",
        "R_requested": float(mask.r_requested),
        "R_achieved": achieved,
        "seed": mask.seed,
        "generator": _jsonable(mask.meta),
    }
    return write_array(path, data, meta)


def read_mask(path):
    """Read a sampling mask back into a :class:`SamplingMask`."""
    data, meta = read_array(path)
    if meta.get("kind") != "mask":
        raise DataError(f"{path}: not a mask file (kind={meta.get('kind')!r})")
    return SamplingMask(
        data.astype(bool),
        r_requested=float(meta.get("R_requested", 0.0)),
        seed=meta.get("seed"),
        meta=dict(meta.get("generator", {})),
    )


def write_map(path, arr, name, **extra):
    """Write a real-valued parameter map (float32)."""
    meta = {"kind": "map", "name": name}
    meta.update(extra)
    return write_array(path, np.asarray(arr, dtype=np.float32), meta)


def read_map(path):
    """Read a parameter map, returning ``(array, name)``."""
    data, meta = read_array(path)
    return data, meta.get("name", "")


def write_csv(path, rows, fieldnames=None):
    """Write dict rows as CSV; field order follows the first row."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = [_jsonable(r) for r in rows]
    if fieldnames is None:
        if not rows:
            raise DataError(f"{path}: no rows and no fieldnames given")
        fieldnames = list(rows[0])
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.DictWriter(handle, fieldnames=fieldnames)
        writer.writeheader()
        writer.writerows(rows)
    return path


def emit_png(image, path, window=None, amplify=1.0):
    """Render a 2-D image magnitude as an 8-bit grayscale PNG.

    Parameters
    ----------
    image : ndarray
        2-D real or complex image; complex input is reduced to its
        magnitude.
    path : path-like
        Output PNG path.
    window : (float, float), optional
        Linear display window ``(low, high)`` applied after
        amplification; values at or below ``low`` map to 0 and values
        at or above ``high`` map to 255. Defaults to ``(0, max)``.
    amplify : float, optional
        Multiplier applied before windowing (error maps are typically
        amplified by 10 for display).
    """
    from PIL import Image

    image = np.abs(np.asarray(image)) * float(amplify)
    if image.ndim != 2:
        raise DataError(f"emit_png needs a 2-D image, got shape {image.shape}")
    if window is None:
        window = (0.0, float(image.max()) or 1.0)
    low, high = float(window[0]), float(window[1])
    if not high > low:
        raise ConfigError(f"window high must exceed low, got ({low}, {high})")
    scaled = np.clip((image - low) / (high - low), 0.0, 1.0)
    pixels = np.round(scaled * 255.0).astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(pixels, mode="L").save(path)
    return path


def _pyplot():
    """Import pyplot with the file-only backend selected."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def save_convergence_figure(history, path, title="ADMM convergence"):
    """Plot the per-iteration relative solution change on a log axis.

    ``history[k]`` holds the relative change measured at iteration
    ``k + 2`` (the first comparable pair of iterates).
    """
    plt = _pyplot()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    iters = np.arange(2, 2 + len(history))
    fig, ax = plt.subplots(figsize=(5.0, 3.5))
    ax.semilogy(iters, np.asarray(history, dtype=float), marker="o")
    ax.set_xlabel("iteration")
    ax.set_ylabel("relative change")
    ax.set_title(title)
    ax.grid(True, which="both", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_rank_figure(rows, path):
    """Plot mean per-pixel vs. block Hankel rank against SNR per tube.

    Parameters
    ----------
    rows : list of dict
        Rows from :func:`smartmap.phantom.rank_experiment` with keys
        ``tube_id``, ``snr``, ``mean_pixel_rank``, ``block_rank``.
    path : path-like
        Output figure path.
    """
    plt = _pyplot()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tubes = sorted({int(r["tube_id"]) for r in rows})
    fig, ax = plt.subplots(figsize=(5.5, 3.8))
    for tube in tubes:
        sub = sorted(
            (r for r in rows if int(r["tube_id"]) == tube),
            key=lambda r: float(r["snr"]),
        )
        snrs = [float(r["snr"]) for r in sub]
        ax.plot(snrs, [float(r["mean_pixel_rank"]) for r in sub],
                marker="o", label=f"tube {tube} pixel")
        ax.plot(snrs, [float(r["block_rank"]) for r in sub],
                linestyle="--", label=f"tube {tube} block")
    ax.set_xlabel("SNR (dB)")
    ax.set_ylabel("Hankel rank")
    ax.set_title("Per-pixel vs. block Hankel rank")
    ax.legend(fontsize=7, ncol=2)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_metric_figure(report, path):
    """Plot per-TSL nRMSE/HFEN (left axis) and SSIM (right axis)."""
    plt = _pyplot()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n = len(report.per_tsl["nrmse"])
    idx = np.arange(n)
    fig, ax = plt.subplots(figsize=(5.0, 3.5))
    ax.plot(idx, report.per_tsl["nrmse"], marker="o", label="nRMSE")
    ax.plot(idx, report.per_tsl["hfen"], marker="s", label="HFEN")
    ax.set_xlabel("TSL index")
    ax.set_ylabel("error")
    twin = ax.twinx()
    twin.plot(idx, report.per_tsl["ssim"], marker="^", color="tab:green",
              label="SSIM")
    twin.set_ylabel("SSIM")
    lines, labels = ax.get_legend_handles_labels()
    lines2, labels2 = twin.get_legend_handles_labels()
    ax.legend(lines + lines2, labels + labels2, fontsize=8)
    ax.set_title(f"Metrics vs. {report.reference}")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
