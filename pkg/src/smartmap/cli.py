"""Command-line surface for the reconstruction pipeline.

Subcommands cover phantom simulation, mask generation, reconstruction,
map fitting, the Hankel rank experiment, and image metrics. One JSON
config document carries all parameters; command-line flags win over
config values, and seeds are mandatory wherever randomness is drawn.

NumPy and the numeric modules are imported inside each command so that
``--threads`` (or the ``SMART_THREADS`` environment variable) can pin
BLAS thread-pool sizes before the first numeric import.

Exit codes: 0 success, 2 configuration error, 3 data error,
4 numerical failure.
"""

import argparse
import dataclasses
import json
import os
import sys
import time
from pathlib import Path

from smartmap.errors import ConfigError, DataError, NumericalError

_PATCH_KEYS = ("b", "stride", "r", "lambda_m", "n_p_max")

_SCHEMA = {
    "phantom": ("grid", "model", "tsl_ms", "centers", "radii", "t1rho",
                "t_short", "alpha", "m0"),
    "mask": ("kind", "r", "center_lines", "center_radius", "seed"),
    "noise": ("snr", "seed"),
    "recon": ("admm_iters", "cg_iters", "cg_tol", "lambda1", "lambda2",
              "mu1", "mu2", "n_groups", "hankel_k", "mode", "refit_period",
              "patch"),
    "rank_experiment": ("snrs", "runs", "ratio", "seed"),
    "paths": ("out", "truth", "mask", "series", "ref"),
}

_THREAD_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "VECLIB_MAXIMUM_THREADS",
    "NUMEXPR_NUM_THREADS",
)


def load_config(path):
    """Load and schema-check the JSON run config.

    Unknown sections or keys are rejected so typos fail loudly instead
    of silently falling back to defaults. ``path`` may be None, which
    yields an empty config (all defaults).
    """
    if path is None:
        return {}
    path = Path(path)
    try:
        cfg = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigError(f"{path}: config file not found") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: config root must be a JSON object")
    for section, value in cfg.items():
        if section == "seed":
            if not isinstance(value, int):
                raise ConfigError(f"{path}: 'seed' must be an integer")
            continue
        allowed = _SCHEMA.get(section)
        if allowed is None:
            raise ConfigError(f"{path}: unknown section '{section}'")
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: section '{section}' must be an object")
        for key in value:
            if key not in allowed:
                raise ConfigError(f"{path}: unknown key '{section}.{key}'")
        if section == "recon" and isinstance(value.get("patch"), dict):
            for key in value["patch"]:
                if key not in _PATCH_KEYS:
                    raise ConfigError(
                        f"{path}: unknown key 'recon.patch.{key}'"
                    )
    return cfg


def _tuple_or_none(value, depth=1):
    """Convert JSON lists (possibly nested one level) to tuples."""
    if value is None:
        return None
    if depth == 2:
        return tuple(tuple(v) for v in value)
    return tuple(value)


def _phantom_spec(cfg):
    """Build a PhantomSpec from the config's phantom section."""
    from smartmap.phantom import PhantomSpec

    sec = cfg.get("phantom", {})
    kwargs = {}
    for key in ("model", "alpha", "m0"):
        if key in sec:
            kwargs[key] = sec[key]
    for key in ("grid", "tsl_ms", "radii", "t1rho", "t_short"):
        if key in sec:
            kwargs[key] = _tuple_or_none(sec[key])
    if "centers" in sec:
        kwargs["centers"] = _tuple_or_none(sec["centers"], depth=2)
    try:
        return PhantomSpec(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"phantom section: {exc}") from exc


def _recon_config(cfg, mode=None):
    """Build a ReconConfig from the config's recon section."""
    from smartmap.patching import PatchConfig
    from smartmap.solver import ReconConfig

    sec = dict(cfg.get("recon", {}))
    patch = sec.pop("patch", None)
    kwargs = {}
    for key in ("admm_iters", "cg_iters", "cg_tol", "mu1", "mu2",
                "n_groups", "hankel_k", "refit_period", "mode"):
        if key in sec:
            kwargs[key] = sec[key]
    for key in ("lambda1", "lambda2"):
        if key in sec:
            kwargs[key] = _tuple_or_none(sec[key])
    if patch is not None:
        kwargs["patch"] = PatchConfig(**patch)
    if mode is not None:
        kwargs["mode"] = mode
    try:
        return ReconConfig(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"recon section: {exc}") from exc


def _resolve_seed(args, cfg, section):
    """Seed precedence: --seed flag, section seed, top-level seed."""
    if getattr(args, "seed", None) is not None:
        return int(args.seed)
    sec = cfg.get(section, {})
    if isinstance(sec, dict) and sec.get("seed") is not None:
        return int(sec["seed"])
    if cfg.get("seed") is not None:
        return int(cfg["seed"])
    raise ConfigError(
        f"a seed is required: pass --seed or set '{section}.seed' "
        "(or top-level 'seed') in the config"
    )


def _out_dir(args, cfg):
    """Output directory: --out flag, then paths.out, then cwd."""
    out = getattr(args, "out", None) or cfg.get("paths", {}).get("out") or "."
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _input_path(args, cfg, name):
    """Required input file: flag first, then the config paths section."""
    value = getattr(args, name, None) or cfg.get("paths", {}).get(name)
    if value is None:
        raise ConfigError(
            f"missing input: pass --{name} or set 'paths.{name}' in the config"
        )
    path = Path(value)
    if not path.exists():
        raise DataError(f"{path}: file not found")
    return path


def _configure_threads(threads):
    """Pin BLAS pool sizes before NumPy loads; flag beats SMART_THREADS."""
    if threads is None:
        env = os.environ.get("SMART_THREADS")
        if env is None:
            return
        try:
            threads = int(env)
        except ValueError as exc:
            raise ConfigError(
                f"SMART_THREADS must be an integer, got {env!r}"
            ) from exc
    if threads < 1:
        raise ConfigError(f"--threads must be >= 1, got {threads}")
    for var in _THREAD_VARS:
        os.environ[var] = str(threads)


def cmd_simulate(args):
    """Generate the phantom series plus ground-truth maps."""
    from smartmap import fileio
    from smartmap.phantom import generate_phantom

    cfg = load_config(args.config)
    spec = _phantom_spec(cfg)
    if args.model is not None:
        spec = dataclasses.replace(spec, model=args.model)
    out = _out_dir(args, cfg)
    truth, maps = generate_phantom(spec)
    fileio.write_series(out / "truth.bin", truth, model=spec.model)
    fileio.write_map(out / "t1rho_truth.bin", maps["t1rho"], "t1rho")
    fileio.write_map(out / "m0_truth.bin", maps["m0"], "m0")
    fileio.write_array(out / "labels.bin", maps["labels"], {"kind": "labels"})
    if spec.model == "bi":
        fileio.write_map(out / "t1rho_short_truth.bin", maps["t1rho_short"],
                         "t1rho_short")
        fileio.write_map(out / "alpha_truth.bin", maps["alpha"], "alpha")
    fileio.emit_png(truth.data[..., 0], out / "truth_tsl0.png")
    fileio.write_json(out / "simulate_qc.json", {
        "grid": list(spec.grid),
        "model": spec.model,
        "n_tsl": len(spec.tsl_ms),
        "tsl_ms": list(spec.tsl_ms),
        "tubes": int(maps["labels"].max()) + 1,
    })
    print(f"simulate: wrote phantom ({spec.model}, "
          f"{spec.grid[0]}x{spec.grid[1]}x{len(spec.tsl_ms)}) to {out}")
    return 0


def cmd_mask(args):
    """Generate per-TSL sampling masks."""
    from smartmap import fileio
    from smartmap.encoding import make_mask_1d, make_mask_poisson

    cfg = load_config(args.config)
    sec = cfg.get("mask", {})
    spec = _phantom_spec(cfg)
    seed = _resolve_seed(args, cfg, "mask")
    kind = sec.get("kind", "1d")
    r = sec.get("r", 4)
    n_tsl = len(spec.tsl_ms)
    if kind == "1d":
        mask = make_mask_1d(spec.grid, r, center_lines=sec.get("center_lines"),
                            seed=seed, n_tsl=n_tsl)
    elif kind == "poisson":
        mask = make_mask_poisson(spec.grid, r,
                                 center_radius=sec.get("center_radius"),
                                 seed=seed, n_tsl=n_tsl)
    else:
        raise ConfigError(f"mask.kind must be '1d' or 'poisson', got {kind!r}")
    out = _out_dir(args, cfg)
    fileio.write_mask(out / "mask.bin", mask)
    fileio.emit_png(mask.data[..., 0].astype(float), out / "mask_tsl0.png",
                    window=(0.0, 1.0))
    achieved = mask.data.size / max(int(mask.data.sum()), 1)
    print(f"mask: kind={kind} R_requested={r} R_achieved={achieved:.3f} "
          f"seed={seed} -> {out / 'mask.bin'}")
    return 0


def cmd_recon(args):
    """Undersample the truth series and reconstruct it."""
    import numpy as np

    from smartmap import fileio
    from smartmap.encoding import add_noise, forward
    from smartmap.fitting import fit_map
    from smartmap.metrics import nrmse
    from smartmap.parametric import support_mask
    from smartmap.solver import reconstruct, zero_filled

    cfg = load_config(args.config)
    out = _out_dir(args, cfg)
    truth = fileio.read_series(_input_path(args, cfg, "truth"))
    mask = fileio.read_mask(_input_path(args, cfg, "mask"))
    if mask.data.shape != truth.data.shape:
        raise DataError(
            f"mask shape {mask.data.shape} does not match series shape "
            f"{truth.data.shape}"
        )
    y = forward(truth, None, mask)
    noise = cfg.get("noise", {})
    if noise.get("snr") is not None:
        y = add_noise(y, float(noise["snr"]), seed=_resolve_seed(args, cfg, "noise"))

    mode = (args.mode or cfg.get("recon", {}).get("mode", "smart"))
    mode = mode.replace("-", "_")
    start = time.time()
    if mode == "zero_filled":
        x = zero_filled(y)
        support = support_mask(x)
        t1rho_map, m0_map, fit_qc = fit_map(x, support)
        history = []
        qc = {"mode": mode, "final_fit": fit_qc}
    else:
        result = reconstruct(y, None, _recon_config(cfg, mode=mode))
        x, history = result.x, result.history
        t1rho_map, m0_map = result.t1rho_map, result.m0_map
        qc = dict(result.qc)
        qc["mode"] = mode
    qc["runtime_s"] = round(time.time() - start, 3)
    qc["nrmse_vs_truth"] = nrmse(x.data, truth.data)

    fileio.write_series(out / "recon.bin", x, mode=mode)
    fileio.write_map(out / "t1rho_map.bin", t1rho_map, "t1rho")
    fileio.write_map(out / "m0_map.bin", m0_map, "m0")
    fileio.emit_png(x.data[..., 0], out / "recon_tsl0.png")
    error = np.abs(x.data[..., 0]) - np.abs(truth.data[..., 0])
    fileio.emit_png(error, out / "error_tsl0.png",
                    window=(0.0, float(np.abs(truth.data).max())),
                    amplify=args.amplify_error)
    if history:
        fileio.write_csv(out / "history.csv", [
            {"iteration": i + 2, "relative_change": h}
            for i, h in enumerate(history)
        ])
        fileio.save_convergence_figure(history, out / "convergence.png")
    if args.dump_patches:
        _dump_patches(x, cfg, out)
    if args.dump_tissues:
        _dump_tissues(x, t1rho_map, cfg, out)
    fileio.write_json(out / "qc.json", qc)
    print(f"recon: mode={mode} nRMSE={qc['nrmse_vs_truth']:.5f} "
          f"runtime={qc['runtime_s']}s -> {out / 'recon.bin'}")
    return 0


def _dump_patches(x, cfg, out):
    """Serialize the block-matching index of the final image to JSON."""
    import numpy as np

    from smartmap import fileio
    from smartmap.patching import block_match

    rcfg = _recon_config(cfg)
    idx = block_match(np.abs(x.data[..., 0]), rcfg.patch)
    groups = []
    for corners, dist in zip(idx.corners, idx.distances):
        groups.append({
            "corners": np.asarray(corners).tolist(),
            "distances": np.asarray(dist).tolist(),
        })
    fileio.write_json(out / "patches.json", {
        "b": idx.b,
        "grid": list(idx.grid),
        "n_groups": len(groups),
        "groups": groups,
    })


def _dump_tissues(x, t1rho_map, cfg, out):
    """Write the tissue partition as a uint16 label image + JSON edges.

    Stored labels are shifted by one so 0 marks background voxels.
    """
    import numpy as np

    from smartmap import fileio
    from smartmap.parametric import cluster_tissues, support_mask

    rcfg = _recon_config(cfg)
    support = support_mask(x)
    part = cluster_tissues(t1rho_map, support, rcfg.n_groups)
    labels = (part.labels + 1).astype(np.uint16)
    fileio.write_array(out / "tissues.bin", labels, {
        "kind": "labels",
        "background": 0,
        "n_groups": part.n_groups,
    })
    fileio.write_json(out / "tissue_edges.json", {
        "n_groups": part.n_groups,
        "edges_ms": [float(e) for e in part.edges],
        "group_sizes": [int(np.sum(part.labels == g))
                        for g in range(part.n_groups)],
    })


def cmd_fit(args):
    """Fit parameter maps from a reconstructed series."""
    from smartmap import fileio
    from smartmap.fitting import fit_map
    from smartmap.parametric import support_mask

    cfg = load_config(args.config)
    out = _out_dir(args, cfg)
    x = fileio.read_series(_input_path(args, cfg, "series"))
    support = support_mask(x)
    t1rho_map, m0_map, fit_qc = fit_map(x, support)
    fileio.write_map(out / "t1rho_map.bin", t1rho_map, "t1rho")
    fileio.write_map(out / "m0_map.bin", m0_map, "m0")
    fileio.emit_png(t1rho_map, out / "t1rho_map.png")
    fileio.write_json(out / "fit_qc.json", fit_qc)
    print(f"fit: {fit_qc.get('n_fit', 0)} voxels -> {out / 't1rho_map.bin'}")
    return 0


def cmd_rank_experiment(args):
    """Monte-Carlo per-pixel vs. block Hankel rank experiment."""
    from smartmap import fileio
    from smartmap.phantom import RankExperimentConfig, rank_experiment

    cfg = load_config(args.config)
    sec = cfg.get("rank_experiment", {})
    seed = _resolve_seed(args, cfg, "rank_experiment")
    runs = 1000 if args.full else sec.get("runs", 100)
    rcfg = RankExperimentConfig(
        seed=seed,
        snrs=_tuple_or_none(sec.get("snrs")) or RankExperimentConfig(0).snrs,
        runs=runs,
        ratio=sec.get("ratio", 0.01),
    )
    spec = _phantom_spec(cfg)
    out = _out_dir(args, cfg)
    start = time.time()
    rows = rank_experiment(spec, rcfg)
    elapsed = time.time() - start
    fileio.write_csv(out / "ranks.csv", rows)
    fileio.save_rank_figure(rows, out / "ranks.png")
    fileio.write_json(out / "rank_qc.json", {
        "runs": runs, "seed": seed, "snrs": list(rcfg.snrs),
        "ratio": rcfg.ratio, "runtime_s": round(elapsed, 3),
    })
    print(f"rank-experiment: {len(rows)} rows ({runs} runs) in "
          f"{elapsed:.1f}s -> {out / 'ranks.csv'}")
    return 0


def cmd_metrics(args):
    """Score a series against a reference series."""
    from smartmap import fileio
    from smartmap.metrics import report

    cfg = load_config(args.config)
    out = _out_dir(args, cfg)
    series_path = _input_path(args, cfg, "series")
    ref_path = _input_path(args, cfg, "ref")
    x = fileio.read_series(series_path)
    ref = fileio.read_series(ref_path)
    rep = report(x, ref, reference=ref_path.name)
    rows = []
    for i in range(len(rep.per_tsl["nrmse"])):
        rows.append({
            "tsl_index": i,
            "nrmse": rep.per_tsl["nrmse"][i],
            "psnr": rep.per_tsl["psnr"][i],
            "ssim": rep.per_tsl["ssim"][i],
            "hfen": rep.per_tsl["hfen"][i],
        })
    rows.append({"tsl_index": "aggregate", **rep.aggregate})
    fileio.write_csv(out / "metrics.csv", rows)
    fileio.write_json(out / "metrics.json", {
        "reference": rep.reference,
        "per_tsl": rep.per_tsl,
        "aggregate": rep.aggregate,
    })
    fileio.save_metric_figure(rep, out / "metrics.png")
    agg = rep.aggregate
    print(f"metrics: nRMSE={agg['nrmse']:.5f} PSNR={agg['psnr']:.2f} "
          f"SSIM={agg['ssim']:.4f} HFEN={agg['hfen']:.4f} -> "
          f"{out / 'metrics.csv'}")
    return 0


def _add_common(parser):
    parser.add_argument("--config", metavar="PATH", default=None,
                        help="JSON run config (flags override its values)")
    parser.add_argument("--seed", metavar="N", type=int, default=None,
                        help="seed override for random draws")
    parser.add_argument("--out", metavar="DIR", default=None,
                        help="output directory (default: paths.out or '.')")
    parser.add_argument("--threads", metavar="N", type=int, default=None,
                        help="BLAS thread count (falls back to SMART_THREADS)")


def build_parser():
    """Construct the argparse command tree."""
    parser = argparse.ArgumentParser(
        prog="smartmap",
        description="Quantitative T1rho mapping from undersampled k-space.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate phantom + ground truth")
    _add_common(p)
    p.add_argument("--model", choices=("mono", "bi"), default=None,
                   help="decay model override")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("mask", help="generate per-TSL sampling masks")
    _add_common(p)
    p.set_defaults(func=cmd_mask)

    p = sub.add_parser("recon", help="undersample and reconstruct")
    _add_common(p)
    p.add_argument("--mode", metavar="M", default=None,
                   choices=("smart", "spatial-only", "parametric-only",
                            "zero-filled", "spatial_only", "parametric_only",
                            "zero_filled"),
                   help="reconstruction mode")
    p.add_argument("--truth", metavar="PATH", default=None,
                   help="ground-truth series file (from simulate)")
    p.add_argument("--mask", metavar="PATH", default=None,
                   help="sampling mask file (from mask)")
    p.add_argument("--dump-patches", action="store_true",
                   help="write a block-matching summary CSV")
    p.add_argument("--dump-tissues", action="store_true",
                   help="write tissue partition labels and ranges")
    p.add_argument("--amplify-error", metavar="N", type=float, default=10.0,
                   help="error-map display amplification (default 10)")
    p.set_defaults(func=cmd_recon)

    p = sub.add_parser("fit", help="fit T1rho/M0 maps from a series")
    _add_common(p)
    p.add_argument("--series", metavar="PATH", default=None,
                   help="reconstructed series file")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("rank-experiment",
                       help="Monte-Carlo Hankel rank experiment")
    _add_common(p)
    p.add_argument("--full", action="store_true",
                   help="run the full 1000-run version (default 100)")
    p.set_defaults(func=cmd_rank_experiment)

    p = sub.add_parser("metrics", help="score a series against a reference")
    _add_common(p)
    p.add_argument("--series", metavar="PATH", default=None,
                   help="series to score")
    p.add_argument("--ref", metavar="PATH", default=None,
                   help="reference series")
    p.set_defaults(func=cmd_metrics)

    return parser


def main(argv=None):
    """Entry point; returns the process exit code."""
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _configure_threads(args.threads)
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
