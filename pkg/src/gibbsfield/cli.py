"""Command line interface: simulate mock data, reconstruct, validate configs.

Exit codes: 0 success, 2 configuration error, 3 reconstruction did not
converge (outputs are still written), 4 input/output error.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import __version__
from .config import (ConfigError, RunConfig, build_band_structure, build_model,
                     build_priors, load_config_file, resolve_config,
                     true_log_spectrum)
from .free_energy import c_matrix
from .grids import LogSpectrum, draw_gaussian_field
from .io import (load_vector_csv, save_field_csv, save_jsonl, save_manifest,
                 save_matrix_csv, save_vector_csv)
from .likelihoods import simulate_data
from .solver import MaxIterationsExceeded, ReconstructionResult, run

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NO_CONVERGENCE = 3
EXIT_IO = 4


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    if getattr(args, "max_iter", None) is not None:
        cfg.solver.max_outer_iter = args.max_iter
        cfg.resolved["solver"]["max_outer_iter"] = args.max_iter
    if getattr(args, "seed", None) is not None:
        cfg.solver.seed = args.seed
        cfg.resolved["seeds"]["solver"] = args.seed
        cfg.seed_simulate = args.seed
        cfg.resolved["seeds"]["simulate"] = args.seed
    if getattr(args, "out", None) is not None:
        cfg.output_dir = args.out
        cfg.resolved["output_dir"] = args.out
    return cfg


def _out_dir(cfg: RunConfig) -> str:
    if not cfg.output_dir:
        raise ConfigError("no output directory: set output_dir or pass --out")
    os.makedirs(cfg.output_dir, exist_ok=True)
    return cfg.output_dir


def cmd_simulate(cfg: RunConfig, quiet: bool) -> int:
    bands = build_band_structure(cfg)
    tau = true_log_spectrum(cfg, bands)
    truth = draw_gaussian_field(tau, bands, seed=[cfg.seed_simulate, 0])
    model = build_model(cfg)
    data = simulate_data(model, truth, seed=[cfg.seed_simulate, 1])
    out = _out_dir(cfg)
    save_field_csv(os.path.join(out, "truth_field.csv"), truth, cfg.grid, bands)
    save_vector_csv(os.path.join(out, "truth_spectrum.csv"), tau.values)
    save_field_csv(os.path.join(out, "data.csv"), data, cfg.grid, bands)
    save_manifest(os.path.join(out, "manifest.json"),
                  {"command": "simulate", "config": cfg.resolved,
                   "package_version": __version__,
                   "outputs": ["truth_field.csv", "truth_spectrum.csv",
                               "data.csv"]})
    if not quiet:
        print(f"simulated {cfg.model_kind} data on grid {cfg.grid.shape} "
              f"({bands.n_bands} bands) -> {out}", file=sys.stderr)
    return EXIT_OK


def _write_reconstruction(cfg: RunConfig, res: ReconstructionResult, bands,
                          model, out: str) -> None:
    save_field_csv(os.path.join(out, "mean_field.csv"), res.m, cfg.grid, bands)
    save_vector_csv(os.path.join(out, "log_spectrum.csv"), res.t.values)
    save_field_csv(os.path.join(out, "field_sigma.csv"), np.sqrt(res.Dhat),
                   cfg.grid, bands)
    save_vector_csv(os.path.join(out, "spectrum_sigma.csv"),
                    np.sqrt(np.diag(res.theta_corrected)))
    save_matrix_csv(os.path.join(out, "theta_corrected.csv"), res.theta_corrected)
    save_matrix_csv(os.path.join(out, "theta_uncorrected.csv"), res.theta_uncorrected)
    lam, vec = np.linalg.eigh(res.theta_corrected)
    order = np.argsort(lam)[::-1]
    eigen_rows = np.column_stack([lam[order], vec[:, order].T])
    save_matrix_csv(os.path.join(out, "eigen_theta.csv"), eigen_rows)
    if res.c_fields:
        rows = np.column_stack([[cf.eigenvalue for cf in res.c_fields],
                                np.array([cf.band_vector for cf in res.c_fields])])
        save_matrix_csv(os.path.join(out, "c_band_vectors.csv"), rows)
        save_matrix_csv(os.path.join(out, "c_fields.csv"),
                        c_matrix(res.c_fields, cfg.grid.n_pixels, bands.n_bands))
    if cfg.model_kind == "lognormal":
        save_field_csv(os.path.join(out, "dirty_image.csv"),
                       model.response.adjoint(model.data), cfg.grid, bands)
    save_jsonl(os.path.join(out, "diagnostics.jsonl"), res.diagnostics)
    save_manifest(os.path.join(out, "manifest.json"),
                  {"command": "reconstruct", "config": cfg.resolved,
                   "package_version": __version__,
                   "converged": res.converged, "n_iter": res.n_iter,
                   "covariance_correction_applied": res.covariance_correction_applied,
                   "warnings": res.warnings})


def cmd_reconstruct(cfg: RunConfig, data_dir: str, quiet: bool) -> int:
    data_path = os.path.join(data_dir, "data.csv")
    data = load_vector_csv(data_path)
    bands = build_band_structure(cfg)
    if data.size != cfg.grid.n_pixels:
        raise ConfigError(f"data length {data.size} does not match grid "
                          f"{cfg.grid.shape}")
    model = build_model(cfg, data=data)
    hp, smoothness = build_priors(cfg, bands)
    out = _out_dir(cfg)
    log_fn = None if quiet else (lambda s: print(s, file=sys.stderr))
    try:
        res = run(cfg.solver, model, bands, hp, smoothness,
                  reference_scale=cfg.reference_scale, log_fn=log_fn)
    except MaxIterationsExceeded as err:
        _write_reconstruction(cfg, err.result, bands, model, out)
        if not quiet:
            print(f"no convergence in {err.result.n_iter} iterations; "
                  f"outputs written to {out}", file=sys.stderr)
        return EXIT_NO_CONVERGENCE
    _write_reconstruction(cfg, res, bands, model, out)
    if not quiet:
        print(f"converged after {res.n_iter} iterations -> {out}",
              file=sys.stderr)
    return EXIT_OK


def cmd_validate(cfg: RunConfig, quiet: bool) -> int:
    bands = build_band_structure(cfg)
    build_model(cfg)  # exercises response/noise validation
    hp, smoothness = build_priors(cfg, bands)
    if not quiet:
        kmin = np.exp(bands.kappa[1]) if bands.n_bands > 1 else float("nan")
        kmax = np.exp(bands.kappa[-1])
        lines = [
            f"grid: {cfg.grid.shape} ({cfg.grid.n_pixels} pixels)",
            f"bands: {bands.n_bands} ({cfg.band_policy}), |k| in "
            f"[{kmin:.4g}, {kmax:.4g}] plus the zero band",
            f"multiplicities: {bands.rho.tolist()}",
            f"model: {cfg.model_kind}, response {cfg.response_spec['type']}",
            f"smoothness: {'off' if smoothness.trivial else f'sigma={smoothness.sigma}'}",
            f"hyperprior: alpha={cfg.alpha}, q={cfg.q}",
            f"solver: seed={cfg.solver.seed}, max_outer_iter="
            f"{cfg.solver.max_outer_iter}, n_c_modes={cfg.solver.n_c_modes}",
        ]
        print("\n".join(lines))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gibbsfield",
        description="Joint field and power spectrum inference on periodic grids")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("config", help="JSON config file (or a manifest.json)")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seeds")
        p.add_argument("--out", default=None, help="override output_dir")
        p.add_argument("--max-iter", type=int, default=None,
                       help="override solver.max_outer_iter")
        p.add_argument("--quiet", action="store_true",
                       help="suppress progress output")

    p_sim = sub.add_parser("simulate", help="draw a truth field and mock data")
    common(p_sim)
    p_rec = sub.add_parser("reconstruct", help="infer field and spectrum from data")
    common(p_rec)
    p_rec.add_argument("--data", required=True,
                       help="directory containing data.csv")
    p_val = sub.add_parser("validate", help="check a config and print a summary")
    common(p_val)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(load_config_file(args.config))
        cfg = _apply_overrides(cfg, args)
        if args.command == "simulate":
            return cmd_simulate(cfg, args.quiet)
        if args.command == "reconstruct":
            return cmd_reconstruct(cfg, args.data, args.quiet)
        return cmd_validate(cfg, args.quiet)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as err:
        print(f"i/o error: {err}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
