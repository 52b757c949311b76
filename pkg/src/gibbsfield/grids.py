"""Periodic grids, harmonic transforms, and spectral band bookkeeping.

Fields live on regular periodic grids (1D or 2D) and are stored as flat
float64 arrays in row-major order.  The harmonic transform is the unitary
FFT (norm="ortho"), so Parseval holds exactly and the pixel volume is 1.
A statistically isotropic and homogeneous prior is diagonal in the
harmonic basis with one variance per band of equal |k|; bands carry a
log-scale coordinate kappa and a multiplicity rho.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

TWO_PI = 2.0 * np.pi


class EmptyBandError(ValueError):
    """Raised when a requested band binning produces a band with no modes."""


@dataclass(frozen=True)
class GridSpace:
    """Regular periodic grid with unit pixel volume.

    Args:
        shape: grid extent per axis, one or two axes, each >= 2.
    """

    shape: tuple[int, ...]

    def __post_init__(self):
        shape = tuple(int(n) for n in self.shape)
        object.__setattr__(self, "shape", shape)
        if len(shape) not in (1, 2):
            raise ValueError(f"only 1D and 2D grids are supported, got shape {shape}")
        if any(n < 2 for n in shape):
            raise ValueError(f"every axis needs at least 2 pixels, got shape {shape}")

    @property
    def n_pixels(self) -> int:
        return int(np.prod(self.shape))


def to_harmonic(grid: GridSpace, field: np.ndarray) -> np.ndarray:
    """Unitary FFT of a flat real field; returns flat complex modes."""
    x = np.asarray(field).reshape(grid.shape)
    return np.fft.fftn(x, norm="ortho").ravel()


def from_harmonic(grid: GridSpace, modes: np.ndarray) -> np.ndarray:
    """Unitary inverse FFT back to a flat real field.

    The imaginary part is discarded; callers are responsible for feeding
    Hermitian-symmetric mode arrays (all band filters here preserve that).
    """
    m = np.asarray(modes).reshape(grid.shape)
    return np.fft.ifftn(m, norm="ortho").real.ravel()


def _integer_frequencies(grid: GridSpace) -> list[np.ndarray]:
    # integer FFT frequencies j per axis: 0, 1, ..., -1 in numpy fft order
    return [np.rint(np.fft.fftfreq(n) * n).astype(np.int64) for n in grid.shape]


def _mode_lambda_keys(grid: GridSpace) -> tuple[np.ndarray, np.ndarray]:
    """Per-mode squared wavenumber, exactly and in float.

    Returns (key, lam): `key` is the exact integer sum_a (j_a * prod_{b!=a} n_b)^2
    used for tie-free grouping, `lam` the physical |k|^2 with k_a = 2 pi j_a / n_a.
    """
    freqs = _integer_frequencies(grid)
    if len(grid.shape) == 1:
        j = freqs[0]
        key = j.astype(object) ** 2
        lam = (TWO_PI * j / grid.shape[0]) ** 2
    else:
        n1, n2 = grid.shape
        j1 = freqs[0][:, None]
        j2 = freqs[1][None, :]
        # exact integers (object dtype dodges overflow for large grids)
        key = ((j1 * n2).astype(object) ** 2 + (j2 * n1).astype(object) ** 2).ravel()
        lam = ((TWO_PI * j1 / n1) ** 2 + (TWO_PI * j2 / n2) ** 2).ravel()
    return np.asarray(key, dtype=object).ravel(), np.asarray(lam, dtype=float).ravel()


@dataclass(frozen=True)
class SpectralBands:
    """Partition of harmonic modes into bands of (near-)equal |k|.

    Attributes:
        grid: the underlying position grid.
        mode_to_band: per-mode band index, aligned with to_harmonic ordering.
        kappa: per-band log length scale, 0.5*ln(mean |k|^2).  The zero mode
            forms band 0 on its own and carries kappa = -inf as its flag.
        rho: per-band mode multiplicities.
    """

    grid: GridSpace
    mode_to_band: np.ndarray
    kappa: np.ndarray
    rho: np.ndarray

    @property
    def n_bands(self) -> int:
        return int(self.kappa.size)

    def __post_init__(self):
        if self.rho[0] != 1 or not np.isneginf(self.kappa[0]):
            raise ValueError("band 0 must hold exactly the zero mode with kappa = -inf")
        finite = self.kappa[1:]
        if finite.size and not np.all(np.diff(finite) > 0):
            raise ValueError("kappa must be strictly increasing over bands >= 1")
        if int(self.rho.sum()) != self.grid.n_pixels:
            raise ValueError("band multiplicities must sum to the number of modes")


def build_bands(grid: GridSpace, policy: str = "distinct",
                bins_per_decade: int | None = None) -> SpectralBands:
    """Group harmonic modes into spectral bands.

    Args:
        grid: position grid.
        policy: "distinct" gives one band per distinct |k| (exact integer
            arithmetic, no float ties); "log" bins |k| logarithmically.
        bins_per_decade: bin density for the "log" policy.

    Raises:
        EmptyBandError: if a log bin catches no modes.
    """
    key, lam = _mode_lambda_keys(grid)
    zero = lam == 0.0
    if int(zero.sum()) != 1:
        raise AssertionError("exactly one zero mode expected")

    mode_to_band = np.zeros(grid.n_pixels, dtype=np.int64)
    if policy == "distinct":
        nz_keys = key[~zero]
        uniq = sorted(set(nz_keys.tolist()))
        index_of = {k: i + 1 for i, k in enumerate(uniq)}
        mode_to_band[~zero] = [index_of[k] for k in nz_keys.tolist()]
    elif policy == "log":
        if bins_per_decade is None or bins_per_decade < 1:
            raise ValueError("log policy requires bins_per_decade >= 1")
        logk = 0.5 * np.log10(lam[~zero])
        lo, hi = logk.min(), logk.max()
        n_bins = int(np.floor((hi - lo) * bins_per_decade)) + 1
        idx = np.floor((logk - lo) * bins_per_decade).astype(np.int64)
        idx = np.minimum(idx, n_bins - 1)
        counts = np.bincount(idx, minlength=n_bins)
        empty = np.flatnonzero(counts == 0)
        if empty.size:
            raise EmptyBandError(
                f"log binning with {bins_per_decade} bins/decade leaves bin(s) "
                f"{empty.tolist()} empty; lower bins_per_decade")
        mode_to_band[~zero] = idx + 1
    else:
        raise ValueError(f"unknown band policy {policy!r}")

    n_bands = int(mode_to_band.max()) + 1
    rho = np.bincount(mode_to_band, minlength=n_bands)
    mean_lam = np.bincount(mode_to_band, weights=lam, minlength=n_bands) / rho
    kappa = np.empty(n_bands)
    kappa[0] = -np.inf
    kappa[1:] = 0.5 * np.log(mean_lam[1:])
    return SpectralBands(grid=grid, mode_to_band=mode_to_band,
                         kappa=kappa, rho=rho.astype(np.int64))


@dataclass
class LogSpectrum:
    """Log band powers tau; the band power is reference_scale * exp(tau)."""

    values: np.ndarray
    reference_scale: float = 1.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if not np.all(np.isfinite(self.values)):
            raise ValueError("log spectrum entries must be finite")
        if not self.reference_scale > 0:
            raise ValueError("reference_scale must be positive")

    def power(self) -> np.ndarray:
        return self.reference_scale * np.exp(self.values)


def band_power(field: np.ndarray, bands: SpectralBands) -> np.ndarray:
    """Per-band sum of squared harmonic amplitudes of a real field."""
    h = to_harmonic(bands.grid, field)
    return np.bincount(bands.mode_to_band, weights=np.abs(h) ** 2,
                       minlength=bands.n_bands)


def apply_band_filter(weights: np.ndarray, field: np.ndarray,
                      bands: SpectralBands) -> np.ndarray:
    """Apply a real band-diagonal filter: one multiplicative weight per band.

    Self-adjoint and Hermitian-preserving since weights are real and shared
    across every mode of a band.
    """
    w = np.asarray(weights, dtype=float)
    h = to_harmonic(bands.grid, field)
    return from_harmonic(bands.grid, h * w[bands.mode_to_band])


def apply_phi_inverse(tprime: LogSpectrum, field: np.ndarray,
                      bands: SpectralBands) -> np.ndarray:
    """Apply the inverse prior covariance for the given effective log spectrum."""
    w = np.exp(-tprime.values) / tprime.reference_scale
    return apply_band_filter(w, field, bands)


def apply_phi(tprime: LogSpectrum, field: np.ndarray,
              bands: SpectralBands) -> np.ndarray:
    """Apply the prior covariance itself (band-diagonal)."""
    return apply_band_filter(tprime.power(), field, bands)


def phi_position_diagonal(tprime: LogSpectrum, bands: SpectralBands) -> float:
    """Position-space diagonal of the prior covariance (constant by homogeneity)."""
    p = tprime.power()
    return float(np.sum(bands.rho * p) / bands.grid.n_pixels)


def draw_gaussian_field(tau: LogSpectrum, bands: SpectralBands, seed) -> np.ndarray:
    """Draw a real zero-mean Gaussian field with the given band spectrum.

    White noise is drawn in position space, colored per band in the harmonic
    basis, and transformed back; Hermitian symmetry is automatic because the
    filter is band-symmetric.
    """
    rng = np.random.default_rng(seed)
    white = rng.standard_normal(bands.grid.n_pixels)
    return apply_band_filter(np.sqrt(tau.power()), white, bands)
