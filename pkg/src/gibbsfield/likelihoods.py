"""Measurement models: responses, data simulation, and likelihood gradients.

Three data models share one interface: additive Gaussian noise on the field
(normal), additive Gaussian noise on the exponentiated field (lognormal),
and Poisson counts with log-normal intensity (poisson).  All responses map
the grid to itself, so n_data == n_pixels.

The lognormal and poisson energies fold the pixelwise field uncertainty
Dhat into shifted means: mp = m + Dhat/2 under the data coupling and
mpp = m + (1+epsilon)/2 * Dhat under the quadratic/rate terms, where
epsilon in [0, 1] interpolates how much of the uncertainty the squared
response terms see.  Gradients returned here are exact gradients of the
energies implemented here (at fixed Dhat), so finite differences close.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .grids import GridSpace
from .operators import LinearOperator

KINDS = ("normal", "lognormal", "poisson")


class ResponseError(ValueError):
    pass


class Response:
    """Base class: linear map from the field grid into data space."""

    nonnegative = False
    default_epsilon = 1.0

    def __init__(self, grid: GridSpace):
        self.grid = grid
        self.n_pixels = grid.n_pixels

    def apply(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def adjoint(self, y: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def colsum_sq(self, w: np.ndarray) -> np.ndarray:
        """Weighted squared column sums: out_x = sum_i w_i R_ix^2.

        This is the workhorse behind every diagonal curvature estimate.
        """
        raise NotImplementedError

    def harmonic_transfer_sq(self) -> Optional[np.ndarray]:
        """|transfer|^2 per harmonic mode if the response is diagonal there.

        Stationary responses (convolutions, mode masks) commute with the
        harmonic basis; returning their squared transfer unlocks exact
        covariance summaries in O(n).  None means no such structure.
        """
        return None


class IdentityResponse(Response):
    nonnegative = True

    def apply(self, x):
        return np.asarray(x, dtype=float).copy()

    adjoint = apply

    def colsum_sq(self, w):
        return np.broadcast_to(np.asarray(w, dtype=float), (self.n_pixels,)).copy()

    def harmonic_transfer_sq(self):
        return np.ones(self.n_pixels)


class GaussianConvolutionResponse(Response):
    """Periodic convolution with an isotropic Gaussian kernel (fwhm in pixels)."""

    nonnegative = True

    def __init__(self, grid: GridSpace, fwhm: float):
        super().__init__(grid)
        if fwhm <= 0:
            raise ResponseError("fwhm must be positive")
        self.fwhm = float(fwhm)
        sig = self.fwhm / (2.0 * np.sqrt(2.0 * np.log(2.0)))
        dist_sq = 0.0
        for ax, n in enumerate(grid.shape):
            i = np.arange(n)
            d = np.minimum(i, n - i).astype(float)
            shape = [1] * len(grid.shape)
            shape[ax] = n
            dist_sq = dist_sq + (d.reshape(shape)) ** 2
        kernel = np.exp(-0.5 * dist_sq / sig**2)
        kernel /= kernel.sum()
        self._kernel = kernel
        self._kernel_hat = np.fft.fftn(kernel)

    def _convolve(self, x, kernel_hat):
        xg = np.asarray(x, dtype=float).reshape(self.grid.shape)
        return np.fft.ifftn(np.fft.fftn(xg) * kernel_hat).real.ravel()

    def apply(self, x):
        return self._convolve(x, self._kernel_hat)

    def adjoint(self, y):
        return self._convolve(y, self._kernel_hat.conj())

    def colsum_sq(self, w):
        wg = np.broadcast_to(np.asarray(w, dtype=float),
                             (self.n_pixels,)).reshape(self.grid.shape)
        v_hat = np.fft.fftn(self._kernel**2)
        out = np.fft.ifftn(np.fft.fftn(wg) * v_hat.conj()).real
        return out.ravel()

    def harmonic_transfer_sq(self):
        return np.abs(self._kernel_hat.ravel()) ** 2


class FourierMaskResponse(Response):
    """Projection onto a seeded random subset of harmonic modes.

    The kept set is Hermitian-symmetric and always contains the zero mode,
    so the operator maps real fields to real fields.  Its position-space
    kernel oscillates around zero, which is why this response is refused by
    the count model and why its backprojections show ringing.
    """

    nonnegative = False
    default_epsilon = 0.0

    def __init__(self, grid: GridSpace, fraction: float, seed: int):
        super().__init__(grid)
        if not 0.0 < fraction <= 1.0:
            raise ResponseError("fraction must lie in (0, 1]")
        self.fraction = float(fraction)
        self.seed = int(seed)
        self._mask = self._build_mask()
        kernel = np.fft.ifftn(self._mask.astype(float).reshape(grid.shape)).real
        self._kernel = kernel.ravel()

    def _build_mask(self) -> np.ndarray:
        shape = self.grid.shape
        n = self.n_pixels
        idx = np.arange(n).reshape(shape)
        # flat index of the conjugate mode -j
        conj = idx.copy()
        for ax, size in enumerate(shape):
            conj = np.take(conj, (-np.arange(size)) % size, axis=ax)
        conj = conj.ravel()
        flat = np.arange(n)
        reps = flat[(flat <= conj) & (flat != 0)]
        rng = np.random.default_rng(self.seed)
        order = rng.permutation(reps)
        target = max(1, int(round(self.fraction * n)))
        mask = np.zeros(n, dtype=bool)
        mask[0] = True
        kept = 1
        for r in order:
            if kept >= target:
                break
            mask[r] = True
            kept += 1
            if conj[r] != r:
                mask[conj[r]] = True
                kept += 1
        return mask

    @property
    def mask(self) -> np.ndarray:
        return self._mask.copy()

    def apply(self, x):
        xg = np.asarray(x, dtype=float).reshape(self.grid.shape)
        h = np.fft.fftn(xg).ravel()
        h[~self._mask] = 0.0
        return np.fft.ifftn(h.reshape(self.grid.shape)).real.ravel()

    adjoint = apply

    def colsum_sq(self, w):
        wg = np.broadcast_to(np.asarray(w, dtype=float),
                             (self.n_pixels,)).reshape(self.grid.shape)
        v_hat = np.fft.fftn((self._kernel**2).reshape(self.grid.shape))
        return np.fft.ifftn(np.fft.fftn(wg) * v_hat.conj()).real.ravel()

    def harmonic_transfer_sq(self):
        return self._mask.astype(float)


class ExposureResponse(Response):
    """Pointwise multiplication with a nonnegative exposure map."""

    nonnegative = True

    def __init__(self, grid: GridSpace, exposure: np.ndarray):
        super().__init__(grid)
        e = np.asarray(exposure, dtype=float).ravel()
        if e.size != grid.n_pixels:
            raise ResponseError("exposure map size does not match the grid")
        if np.any(e < 0):
            raise ResponseError("exposure must be nonnegative")
        self.exposure = e

    def apply(self, x):
        return self.exposure * np.asarray(x, dtype=float)

    adjoint = apply

    def colsum_sq(self, w):
        return self.exposure**2 * np.broadcast_to(np.asarray(w, dtype=float),
                                                  (self.n_pixels,))


@dataclass
class MeasurementModel:
    """A response plus noise statistics plus (optionally) observed data."""

    kind: str
    response: Response
    data: Optional[np.ndarray] = None
    noise_variance: Optional[np.ndarray] = None
    background: Optional[np.ndarray] = None
    epsilon: float = 1.0
    exp_cap: float = 60.0
    pln_corrections: bool = False

    def with_data(self, data: np.ndarray) -> "MeasurementModel":
        return measurement_model(self.kind, self.response, data=data,
                                 noise_variance=self.noise_variance,
                                 background=self.background,
                                 epsilon=self.epsilon, exp_cap=self.exp_cap,
                                 pln_corrections=self.pln_corrections)


def measurement_model(kind: str, response: Response, data=None,
                      noise_variance=None, background=None, epsilon=None,
                      exp_cap: float = 60.0,
                      pln_corrections: bool = False) -> MeasurementModel:
    """Validated constructor for MeasurementModel."""
    if kind not in KINDS:
        raise ValueError(f"unknown measurement kind {kind!r}")
    n = response.n_pixels
    if kind in ("normal", "lognormal"):
        if noise_variance is None:
            raise ValueError(f"{kind} model requires noise_variance")
        nv = np.broadcast_to(np.asarray(noise_variance, dtype=float), (n,)).copy()
        if np.any(nv <= 0):
            raise ValueError("noise_variance must be strictly positive")
        noise_variance = nv
        background = None
    else:
        if background is None:
            raise ValueError("poisson model requires a background rate")
        bg = np.broadcast_to(np.asarray(background, dtype=float), (n,)).copy()
        if np.any(bg < 0):
            raise ValueError("background must be nonnegative")
        background = bg
        noise_variance = None
        if not response.nonnegative:
            raise ValueError("count data require a nonnegative response; "
                             "this response produces negative weights")
    if data is not None:
        data = np.asarray(data, dtype=float).ravel()
        if data.size != n:
            raise ValueError("data size does not match the response")
        if kind == "poisson":
            if np.any(data < 0) or np.any(data != np.rint(data)):
                raise ValueError("counts must be nonnegative integers")
    if epsilon is None:
        epsilon = response.default_epsilon
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError("epsilon must lie in [0, 1]")
    return MeasurementModel(kind=kind, response=response, data=data,
                            noise_variance=noise_variance, background=background,
                            epsilon=float(epsilon), exp_cap=float(exp_cap),
                            pln_corrections=pln_corrections)


def simulate_data(model: MeasurementModel, true_field: np.ndarray, seed) -> np.ndarray:
    """Draw one data realization given the true field (normal: the field
    itself is observed; lognormal/poisson: its exponential sets the signal)."""
    rng = np.random.default_rng(seed)
    r = model.response
    s = np.asarray(true_field, dtype=float)
    if model.kind == "normal":
        return r.apply(s) + rng.standard_normal(r.n_pixels) * np.sqrt(model.noise_variance)
    if model.kind == "lognormal":
        return r.apply(np.exp(s)) + rng.standard_normal(r.n_pixels) * np.sqrt(model.noise_variance)
    rate = r.apply(np.exp(s)) + model.background
    if np.any(rate < 0):
        raise ValueError("negative count rate in simulation")
    return rng.poisson(rate).astype(float)


@dataclass
class LikelihoodGradients:
    """Energy, field gradient, and uncertainty couplings at one point.

    grad_Dhat is the diagonal of the energy's sensitivity to the field
    covariance; twice this diagonal is the likelihood curvature that enters
    the posterior precision.  curvature applies that (PSD) operator.
    """

    energy: float
    grad_m: np.ndarray
    grad_Dhat: np.ndarray
    curvature: LinearOperator
    energy_omits_uncertainty_trace: bool
    exp_cap_hit: bool = False
    # harmonic diagonal of the curvature where the model is stationary
    # (normal likelihood, uniform noise, spectral response); None otherwise
    curvature_harmonic_diag: Optional[np.ndarray] = None


def _capped_exp(x: np.ndarray, cap: float) -> tuple[np.ndarray, bool]:
    hit = bool(np.any(x > cap))
    return np.exp(np.minimum(x, cap)), hit


def _require_data(model):
    if model.data is None:
        raise ValueError("likelihood gradients need observed data")


def normal_gradients(model: MeasurementModel, m: np.ndarray,
                     Dhat: np.ndarray) -> LikelihoodGradients:
    _require_data(model)
    r = model.response
    inv_n = 1.0 / model.noise_variance
    resid = model.data - r.apply(m)
    energy = 0.5 * float(resid @ (inv_n * resid))
    grad_m = -r.adjoint(inv_n * resid)
    grad_dhat = 0.5 * r.colsum_sq(inv_n)
    curv = LinearOperator(domain_size=r.n_pixels,
                          matvec=lambda v: r.adjoint(inv_n * r.apply(v)),
                          is_self_adjoint=True)
    transfer = r.harmonic_transfer_sq()
    uniform = bool(np.all(model.noise_variance == model.noise_variance[0]))
    curv_hat = (transfer / model.noise_variance[0]
                if transfer is not None and uniform else None)
    return LikelihoodGradients(energy=energy, grad_m=grad_m, grad_Dhat=grad_dhat,
                               curvature=curv, energy_omits_uncertainty_trace=True,
                               curvature_harmonic_diag=curv_hat)


def lognormal_gradients(model: MeasurementModel, m: np.ndarray, Dhat: np.ndarray,
                        covariance_corrected: bool = False) -> LikelihoodGradients:
    _require_data(model)
    r = model.response
    inv_n = 1.0 / model.noise_variance
    mp = m + 0.5 * Dhat
    mpp = m + 0.5 * (1.0 + model.epsilon) * Dhat
    emp, hit1 = _capped_exp(mp, model.exp_cap)
    empp, hit2 = _capped_exp(mpp, model.exp_cap)
    r_empp = r.apply(empp)
    r_emp = r.apply(emp)
    energy = 0.5 * float(r_empp @ (inv_n * r_empp)) - float(r_emp @ (inv_n * model.data))
    grad_m = empp * r.adjoint(inv_n * r_empp) - emp * r.adjoint(inv_n * model.data)
    grad_dhat = 0.5 * empp**2 * r.colsum_sq(inv_n)
    if covariance_corrected:
        # at the solution the odd term sharpens the covariance report
        grad_dhat = grad_dhat + 0.5 * grad_m

    def curv_apply(v, _e=empp, _corr=covariance_corrected, _g=grad_m):
        out = _e * r.adjoint(inv_n * r.apply(_e * v))
        if _corr:
            out = out + _g * v
        return out

    curv = LinearOperator(domain_size=r.n_pixels, matvec=curv_apply,
                          is_self_adjoint=True)
    return LikelihoodGradients(energy=energy, grad_m=grad_m, grad_Dhat=grad_dhat,
                               curvature=curv, energy_omits_uncertainty_trace=False,
                               exp_cap_hit=hit1 or hit2)


def pln_gradients(model: MeasurementModel, m: np.ndarray, Dhat: np.ndarray,
                  covariance_corrected: bool = False) -> LikelihoodGradients:
    _require_data(model)
    r = model.response
    d = model.data
    mp = m + 0.5 * Dhat
    mpp = m + 0.5 * (1.0 + model.epsilon) * Dhat
    emp, hit1 = _capped_exp(mp, model.exp_cap)
    empp, hit2 = _capped_exp(mpp, model.exp_cap)
    r_emp = r.apply(emp)
    mu = r_emp + model.background
    if np.any((mu <= 0) & (d > 0)):
        raise ValueError("counts observed where the model rate vanishes")
    with np.errstate(divide="ignore", invalid="ignore"):
        log_mu = np.where(d > 0, np.log(np.maximum(mu, 1e-300)), 0.0)
        d_over_mu = np.where(d > 0, d / np.maximum(mu, 1e-300), 0.0)
    energy = float(np.sum(r_emp)) - float(d @ log_mu)
    grad_m = emp * r.adjoint(1.0 - d_over_mu)
    weight = np.where(mu > 0, d_over_mu / np.maximum(mu, 1e-300), 0.0)
    grad_dhat = 0.5 * empp**2 * r.colsum_sq(weight)

    if model.pln_corrections:
        r_empp = r.apply(empp)
        inv_mu2 = np.where(mu > 0, 1.0 / np.maximum(mu, 1e-300) ** 2, 0.0)
        gap = r_emp**2 - r_empp**2
        energy += -0.5 * float(d @ (inv_mu2 * gap))
        term2 = (-emp * r.adjoint(d * inv_mu2 * r_emp)
                 + empp * r.adjoint(d * inv_mu2 * r_empp))
        inv_mu3 = np.where(mu > 0, inv_mu2 / np.maximum(mu, 1e-300), 0.0)
        term3 = emp * r.adjoint(d * inv_mu3 * gap)
        grad_m = grad_m + term2 + term3

    if covariance_corrected:
        grad_dhat = grad_dhat - 0.5 * grad_m

    def curv_apply(v, _e=empp, _w=weight, _corr=covariance_corrected, _g=grad_m):
        out = _e * r.adjoint(_w * r.apply(_e * v))
        if _corr:
            out = out - _g * v
        return out

    curv = LinearOperator(domain_size=r.n_pixels, matvec=curv_apply,
                          is_self_adjoint=True)
    return LikelihoodGradients(energy=energy, grad_m=grad_m, grad_Dhat=grad_dhat,
                               curvature=curv, energy_omits_uncertainty_trace=False,
                               exp_cap_hit=hit1 or hit2)


def likelihood_gradients(model: MeasurementModel, m: np.ndarray, Dhat: np.ndarray,
                         covariance_corrected: bool = False) -> LikelihoodGradients:
    """Dispatch on the model kind.

    covariance_corrected switches on the odd curvature term that is only
    valid (positive definite) at the posterior mode; it is used once after
    convergence to report final uncertainties, never during descent.
    """
    if model.kind == "normal":
        return normal_gradients(model, m, Dhat)
    if model.kind == "lognormal":
        return lognormal_gradients(model, m, Dhat, covariance_corrected)
    return pln_gradients(model, m, Dhat, covariance_corrected)


def lognormal_energy_dense(model: MeasurementModel, m: np.ndarray,
                           D_dense: np.ndarray) -> float:
    """Exact lognormal energy for a full field covariance.  Oracle only:
    cost is quadratic in pixels, keep it at <= ~100 pixels."""
    _require_data(model)
    r = model.response
    n = r.n_pixels
    if n > 128:
        raise ValueError("dense lognormal energy is an oracle for small grids")
    inv_n = 1.0 / model.noise_variance
    # dense R.T N^{-1} R, column by column
    b = np.empty((n, n))
    e = np.zeros(n)
    for j in range(n):
        e[j] = 1.0
        b[:, j] = r.adjoint(inv_n * r.apply(e))
        e[j] = 0.0
    mp = m + 0.5 * np.diag(D_dense)
    quad = 0.5 * float(np.sum(b * np.exp(mp[:, None] + mp[None, :] + D_dense)))
    lin = float(np.exp(mp) @ r.adjoint(inv_n * model.data))
    return quad - lin
