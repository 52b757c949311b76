"""Priors on the log band spectrum: spectral smoothness and per-band terms."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .grids import LogSpectrum, SpectralBands


@dataclass(frozen=True)
class SmoothnessOperator:
    """Quadratic penalty 0.5 t.T t on curvature of the log-log spectrum.

    matrix is dense (n_bands, n_bands), PSD, with zero row and column for the
    unconstrained zero band.  trivial marks the no-penalty case (sigma = inf
    or fewer than 3 coupled bands).
    """

    matrix: np.ndarray
    sigma: float
    trivial: bool


def build_smoothness_operator(bands: SpectralBands, sigma: float) -> SmoothnessOperator:
    """Second-difference curvature penalty over kappa, strength 1/sigma^2.

    The stencil is the exact non-uniform 3-point second derivative, so affine
    log-log spectra (pure power laws) pay nothing.  Quadrature weights are
    trapezoidal over interior coupled bands; the ends float freely (natural
    boundary).  The zero band never couples.
    """
    n = bands.n_bands
    if sigma <= 0:
        raise ValueError("sigma must be positive (use inf to disable)")
    kappa = bands.kappa[1:]
    n_coupled = kappa.size
    if np.isinf(sigma) or n_coupled < 3:
        if not np.isinf(sigma) and n_coupled < 3:
            warnings.warn("fewer than 3 coupled bands: smoothness penalty is "
                          "degenerate and has been disabled", stacklevel=2)
        return SmoothnessOperator(matrix=np.zeros((n, n)), sigma=sigma, trivial=True)

    n_rows = n_coupled - 2
    d = np.zeros((n_rows, n_coupled))
    w = np.zeros(n_rows)
    for i in range(1, n_coupled - 1):
        h1 = kappa[i] - kappa[i - 1]
        h2 = kappa[i + 1] - kappa[i]
        d[i - 1, i - 1] = 2.0 / (h1 * (h1 + h2))
        d[i - 1, i] = -2.0 / (h1 * h2)
        d[i - 1, i + 1] = 2.0 / (h2 * (h1 + h2))
        w[i - 1] = 0.5 * (kappa[i + 1] - kappa[i - 1])
    t_coupled = d.T @ (w[:, None] * d) / sigma**2
    matrix = np.zeros((n, n))
    matrix[1:, 1:] = t_coupled
    return SmoothnessOperator(matrix=matrix, sigma=float(sigma), trivial=False)


@dataclass(frozen=True)
class HyperPrior:
    """Per-band inverse-gamma style prior on the band power: shape alpha, scale q."""

    alpha: np.ndarray
    q: np.ndarray

    @classmethod
    def from_scalars(cls, alpha, q, n_bands: int) -> "HyperPrior":
        a = np.broadcast_to(np.asarray(alpha, dtype=float), (n_bands,)).copy()
        qq = np.broadcast_to(np.asarray(q, dtype=float), (n_bands,)).copy()
        if np.any(a < 1.0) or np.any(qq < 0.0):
            raise ValueError("hyperprior requires alpha >= 1 and q >= 0")
        return cls(alpha=a, q=qq)

    @property
    def n_bands(self) -> int:
        return int(self.alpha.size)


def spectral_hamiltonian(t: LogSpectrum, smoothness: SmoothnessOperator,
                         hp: HyperPrior) -> float:
    """Negative log prior of the log spectrum, up to constants.

    0.5 t.T t + (alpha-1).t + q.exp(-t); with alpha = 1, q = 0 and no
    smoothness this is flat in t (scale-agnostic).
    """
    tv = t.values
    return float(0.5 * tv @ (smoothness.matrix @ tv)
                 + (hp.alpha - 1.0) @ tv
                 + hp.q @ np.exp(-tv))


def spectral_hamiltonian_gradient(t: LogSpectrum, smoothness: SmoothnessOperator,
                                  hp: HyperPrior) -> np.ndarray:
    tv = t.values
    return smoothness.matrix @ tv + (hp.alpha - 1.0) - hp.q * np.exp(-tv)
