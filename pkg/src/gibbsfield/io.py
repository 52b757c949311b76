"""Flat-file serialization: CSV arrays, JSON sidecars, manifests, JSONL logs.

Fields are written one value per line in row-major order with a .json
sidecar recording the grid shape and the band structure, so every array on
disk is self-describing.  Floats use repr-faithful formatting, which keeps
reruns bit-identical.
"""

from __future__ import annotations

import json
import os

import numpy as np

from .grids import GridSpace, SpectralBands

_FMT = "%.17g"


def save_vector_csv(path: str, values: np.ndarray) -> None:
    np.savetxt(path, np.asarray(values, dtype=float).ravel(), fmt=_FMT)


def load_vector_csv(path: str) -> np.ndarray:
    return np.atleast_1d(np.loadtxt(path, dtype=float))


def save_matrix_csv(path: str, matrix: np.ndarray) -> None:
    np.savetxt(path, np.asarray(matrix, dtype=float), fmt=_FMT, delimiter=",")


def load_matrix_csv(path: str) -> np.ndarray:
    return np.atleast_2d(np.loadtxt(path, dtype=float, delimiter=","))


def _jsonable_kappa(kappa: np.ndarray) -> list:
    # strict JSON has no -inf; the unconstrained zero band is stored as null
    return [None if not np.isfinite(k) else float(k) for k in kappa]


def save_field_csv(path: str, values: np.ndarray, grid: GridSpace,
                   bands: SpectralBands | None = None) -> None:
    """Write a field plus its JSON sidecar (shape, and bands if given)."""
    save_vector_csv(path, values)
    sidecar = {"shape": list(grid.shape)}
    if bands is not None:
        sidecar["kappa"] = _jsonable_kappa(bands.kappa)
        sidecar["rho"] = [int(r) for r in bands.rho]
    with open(_sidecar_path(path), "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _sidecar_path(path: str) -> str:
    return path + ".json"


def load_field_csv(path: str) -> tuple[np.ndarray, dict]:
    values = load_vector_csv(path)
    sidecar = {}
    sc_path = _sidecar_path(path)
    if os.path.exists(sc_path):
        with open(sc_path, "r", encoding="utf-8") as fh:
            sidecar = json.load(fh)
    return values, sidecar


def save_manifest(path: str, manifest: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_manifest(path: str) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def save_jsonl(path: str, records: list[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True))
            fh.write("\n")
