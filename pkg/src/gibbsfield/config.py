"""Run configuration: JSON schema, strict validation, and object builders.

Configs are plain JSON.  Unknown keys are rejected everywhere so a typo
fails loudly instead of silently running with a default.  A manifest
written by a previous run is itself a valid config input (the resolved
config is nested under its "config" key), which is what makes every output
replayable from the manifest alone.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from typing import Any, Optional

import numpy as np

try:
    import jsonschema
except ImportError:  # pragma: no cover
    jsonschema = None

from .grids import GridSpace, LogSpectrum, SpectralBands, build_bands
from .likelihoods import (ExposureResponse, FourierMaskResponse,
                          GaussianConvolutionResponse, IdentityResponse,
                          MeasurementModel, Response, measurement_model)
from .priors import HyperPrior, SmoothnessOperator, build_smoothness_operator
from .solver import SolverConfig


class ConfigError(ValueError):
    pass


_NUMBER_OR_ARRAY = {"oneOf": [{"type": "number"},
                              {"type": "array", "items": {"type": "number"},
                               "minItems": 1}]}

_RESPONSE_SCHEMA = {
    "oneOf": [
        {"type": "object", "additionalProperties": False,
         "properties": {"type": {"const": "identity"}},
         "required": ["type"]},
        {"type": "object", "additionalProperties": False,
         "properties": {"type": {"const": "gaussian_convolution"},
                        "fwhm": {"type": "number", "exclusiveMinimum": 0}},
         "required": ["type", "fwhm"]},
        {"type": "object", "additionalProperties": False,
         "properties": {"type": {"const": "fourier_mask"},
                        "fraction": {"type": "number", "exclusiveMinimum": 0,
                                     "maximum": 1},
                        "seed": {"type": "integer", "minimum": 0}},
         "required": ["type", "fraction", "seed"]},
        {"type": "object", "additionalProperties": False,
         "properties": {"type": {"const": "exposure"},
                        "map": {"type": "array", "items": {"type": "number"},
                                "minItems": 1}},
         "required": ["type", "map"]},
        {"type": "object", "additionalProperties": False,
         "properties": {"type": {"const": "exposure"},
                        "profile": {"enum": ["ramp", "step"]},
                        "low": {"type": "number", "minimum": 0},
                        "high": {"type": "number", "minimum": 0}},
         "required": ["type", "profile", "low", "high"]},
    ]
}

_SOLVER_SCHEMA = {
    "type": "object", "additionalProperties": False,
    "properties": {
        "max_outer_iter": {"type": "integer", "minimum": 1},
        "cg_tol": {"type": "number", "exclusiveMinimum": 0},
        "cg_tol_final": {"type": "number", "exclusiveMinimum": 0},
        "n_probes": {"type": "integer", "minimum": 0},
        "probe_reset_threshold": {"type": "number", "exclusiveMinimum": 0},
        "n_c_modes": {"type": "integer", "minimum": 0},
        "c_refresh_every": {"type": "integer", "minimum": 1},
        "temperature": {"type": "number", "exclusiveMinimum": 0},
        "f_accelerate": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "f_brake": {"type": "number", "minimum": 1},
        "eta_floor": {"type": "number", "exclusiveMinimum": 0},
        "eta_ceiling": {"type": "number", "exclusiveMinimum": 0},
        "force_tol": {"type": "number", "exclusiveMinimum": 0},
        "step_tol": {"type": "number", "exclusiveMinimum": 0},
        "max_step_t": {"type": "number", "minimum": 0},
        "max_step_m": {"type": "number", "minimum": 0},
        "spectrum_warmup": {"type": "integer", "minimum": 0},
        "converged_window": {"type": "integer", "minimum": 1},
        "theta_relax": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "steer_m": {"type": "boolean"},
        "update_spectrum": {"type": "boolean"},
        "freeze_theta_zero": {"type": "boolean"},
        "use_theta_correction": {"type": "boolean"},
        "theta_eig_cap": {"type": "number", "exclusiveMinimum": 0},
        "max_step_retries": {"type": "integer", "minimum": 0},
        "final_probe_factor": {"type": "integer", "minimum": 1},
    },
}

CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "required": ["grid", "model"],
    "properties": {
        "grid": {"type": "object", "additionalProperties": False,
                 "required": ["shape"],
                 "properties": {"shape": {"type": "array",
                                          "items": {"type": "integer", "minimum": 2},
                                          "minItems": 1, "maxItems": 2}}},
        "bands": {"type": "object", "additionalProperties": False,
                  "properties": {"policy": {"enum": ["distinct", "log"]},
                                 "bins_per_decade": {"type": "integer", "minimum": 1}}},
        "model": {"type": "object", "additionalProperties": False,
                  "required": ["kind", "response"],
                  "properties": {
                      "kind": {"enum": ["normal", "lognormal", "poisson"]},
                      "response": _RESPONSE_SCHEMA,
                      "noise_variance": _NUMBER_OR_ARRAY,
                      "background": _NUMBER_OR_ARRAY,
                      "epsilon": {"type": "number", "minimum": 0, "maximum": 1},
                      "exp_cap": {"type": "number", "exclusiveMinimum": 0},
                      "pln_corrections": {"type": "boolean"}}},
        "prior": {"type": "object", "additionalProperties": False,
                  "properties": {"alpha": {"type": "number", "minimum": 1},
                                 "q": {"type": "number", "minimum": 0},
                                 "smoothness_sigma": _NUMBER_OR_ARRAY["oneOf"][0],
                                 "reference_scale": {"type": "number",
                                                     "exclusiveMinimum": 0}}},
        "true_spectrum": {"type": "object", "additionalProperties": False,
                          "required": ["amplitude", "slope", "knee"],
                          "properties": {"amplitude": {"type": "number",
                                                       "exclusiveMinimum": 0},
                                         "slope": {"type": "number", "minimum": 0},
                                         "knee": {"type": "number",
                                                  "exclusiveMinimum": 0}}},
        "solver": _SOLVER_SCHEMA,
        "seeds": {"type": "object", "additionalProperties": False,
                  "properties": {"simulate": {"type": "integer", "minimum": 0},
                                 "solver": {"type": "integer", "minimum": 0}}},
        "output_dir": {"type": "string", "minLength": 1},
    },
}

_DEFAULT_PRIOR = {"alpha": 1.0, "q": 0.0, "smoothness_sigma": 1.0,
                  "reference_scale": 1.0}
_DEFAULT_SEEDS = {"simulate": 1, "solver": 2}


def validate_config(raw: dict) -> None:
    """Schema-check a raw config dict; raises ConfigError on any violation."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    if jsonschema is None:  # pragma: no cover
        raise ConfigError("jsonschema package is required for validation")
    try:
        jsonschema.validate(raw, CONFIG_SCHEMA)
    except jsonschema.ValidationError as err:
        path = "/".join(str(p) for p in err.absolute_path) or "<root>"
        raise ConfigError(f"config invalid at {path}: {err.message}") from err
    kind = raw["model"]["kind"]
    if kind in ("normal", "lognormal") and "noise_variance" not in raw["model"]:
        raise ConfigError(f"model kind {kind!r} requires noise_variance")
    if kind == "poisson" and "background" not in raw["model"]:
        raise ConfigError("model kind 'poisson' requires background")
    bands = raw.get("bands", {})
    if bands.get("policy") == "log" and "bins_per_decade" not in bands:
        raise ConfigError("log band policy requires bins_per_decade")


@dataclass
class RunConfig:
    """Fully resolved run configuration (defaults applied)."""

    grid: GridSpace
    band_policy: str
    bins_per_decade: Optional[int]
    model_kind: str
    response_spec: dict
    noise_variance: Any
    background: Any
    epsilon: Optional[float]
    exp_cap: float
    pln_corrections: bool
    alpha: float
    q: float
    smoothness_sigma: float
    reference_scale: float
    true_spectrum: Optional[dict]
    solver: SolverConfig
    seed_simulate: int
    output_dir: Optional[str]
    resolved: dict


def resolve_config(raw: dict) -> RunConfig:
    """Validate, fill in defaults, and build the typed config."""
    if isinstance(raw, dict) and "config" in raw and "grid" not in raw:
        raw = raw["config"]  # accept a manifest as config input
    validate_config(raw)
    grid = GridSpace(shape=tuple(raw["grid"]["shape"]))
    bands_raw = dict(raw.get("bands", {}))
    band_policy = bands_raw.get("policy", "distinct")
    bins_per_decade = bands_raw.get("bins_per_decade")
    model_raw = dict(raw["model"])
    prior = {**_DEFAULT_PRIOR, **raw.get("prior", {})}
    seeds = {**_DEFAULT_SEEDS, **raw.get("seeds", {})}
    kind = model_raw["kind"]

    solver_raw = dict(raw.get("solver", {}))
    # kind-aware defaults: the cross coupling earns its keep for the normal
    # model; the stiffer likelihoods run leaner and steer the field block
    solver_raw.setdefault("n_c_modes", 2 if kind == "normal" else 0)
    solver_raw.setdefault("steer_m", kind != "normal")
    solver_raw.setdefault("seed", seeds["solver"])
    known = {f.name for f in fields(SolverConfig)}
    solver_cfg = SolverConfig(**{k: v for k, v in solver_raw.items() if k in known})

    resolved = {
        "grid": {"shape": list(grid.shape)},
        "bands": {"policy": band_policy,
                  **({"bins_per_decade": bins_per_decade}
                     if bins_per_decade is not None else {})},
        "model": model_raw,
        "prior": prior,
        "solver": {k: v for k, v in asdict(solver_cfg).items() if k != "seed"},
        "seeds": seeds,
    }
    if "true_spectrum" in raw:
        resolved["true_spectrum"] = dict(raw["true_spectrum"])
    if "output_dir" in raw:
        resolved["output_dir"] = raw["output_dir"]

    return RunConfig(
        grid=grid, band_policy=band_policy, bins_per_decade=bins_per_decade,
        model_kind=kind, response_spec=dict(model_raw["response"]),
        noise_variance=model_raw.get("noise_variance"),
        background=model_raw.get("background"),
        epsilon=model_raw.get("epsilon"),
        exp_cap=model_raw.get("exp_cap", 60.0),
        pln_corrections=model_raw.get("pln_corrections", False),
        alpha=prior["alpha"], q=prior["q"],
        smoothness_sigma=prior["smoothness_sigma"],
        reference_scale=prior["reference_scale"],
        true_spectrum=raw.get("true_spectrum"),
        solver=solver_cfg, seed_simulate=seeds["simulate"],
        output_dir=raw.get("output_dir"), resolved=resolved)


def build_response(cfg: RunConfig) -> Response:
    spec = cfg.response_spec
    kind = spec["type"]
    if kind == "identity":
        return IdentityResponse(cfg.grid)
    if kind == "gaussian_convolution":
        return GaussianConvolutionResponse(cfg.grid, fwhm=spec["fwhm"])
    if kind == "fourier_mask":
        return FourierMaskResponse(cfg.grid, fraction=spec["fraction"],
                                   seed=spec["seed"])
    if kind == "exposure":
        if "map" in spec:
            exposure = np.asarray(spec["map"], dtype=float)
            if exposure.size != cfg.grid.n_pixels:
                raise ConfigError("exposure map length does not match the grid")
        else:
            n = cfg.grid.n_pixels
            lo, hi = float(spec["low"]), float(spec["high"])
            if spec["profile"] == "ramp":
                exposure = lo + (hi - lo) * np.arange(n) / max(n - 1, 1)
            else:
                exposure = np.full(n, lo)
                exposure[n // 4: 3 * n // 4] = hi
        return ExposureResponse(cfg.grid, exposure)
    raise ConfigError(f"unknown response type {kind!r}")


def build_band_structure(cfg: RunConfig) -> SpectralBands:
    return build_bands(cfg.grid, policy=cfg.band_policy,
                       bins_per_decade=cfg.bins_per_decade)


def build_model(cfg: RunConfig, data: Optional[np.ndarray] = None) -> MeasurementModel:
    return measurement_model(cfg.model_kind, build_response(cfg), data=data,
                             noise_variance=cfg.noise_variance,
                             background=cfg.background, epsilon=cfg.epsilon,
                             exp_cap=cfg.exp_cap,
                             pln_corrections=cfg.pln_corrections)


def build_priors(cfg: RunConfig, bands: SpectralBands) -> tuple[HyperPrior, SmoothnessOperator]:
    hp = HyperPrior.from_scalars(cfg.alpha, cfg.q, bands.n_bands)
    smoothness = build_smoothness_operator(bands, cfg.smoothness_sigma)
    return hp, smoothness


def true_log_spectrum(cfg: RunConfig, bands: SpectralBands) -> LogSpectrum:
    """Parametric generating spectrum: amplitude / (1 + |k|/knee)^slope."""
    if cfg.true_spectrum is None:
        raise ConfigError("config has no true_spectrum section")
    ts = cfg.true_spectrum
    k_mag = np.exp(bands.kappa)  # zero band: exp(-inf) = 0
    power = ts["amplitude"] * (1.0 + k_mag / ts["knee"]) ** (-ts["slope"])
    return LogSpectrum(values=np.log(power / cfg.reference_scale),
                       reference_scale=cfg.reference_scale)


def load_config_file(path: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from err
    except json.JSONDecodeError as err:
        raise ConfigError(f"config {path} is not valid JSON: {err}") from err
