"""Gibbs free energy of the Gaussian trial posterior: forces and fix points.

The trial posterior over (field, log spectrum) is Gaussian with mean (m, t)
and covariance [[D, C], [C.T, Theta]].  Minimizing internal energy minus
temperature times Gaussian entropy yields, per block:

  field force    f_m = -(likelihood gradient) - PhiInv_{t'} (m - c-correction)
  spectrum force f_t = (q + w/(2r)) exp(-t') - (alpha - 1 + rho/2 + T t)
  field covariance     D = E - A_D,      E^{-1} = (PhiInv_{t'} + curvature)/temp
  spectrum covariance  Theta = F - A_Th, F = temp * (T + diag(rate))^{-1}
  cross coupling       C = sum_i c_i a_i.T  over leading Theta eigenpairs

with t' = t - diag(Theta)/2 the uncertainty-shifted log spectrum and
w_k the band power of (m - c-correction) plus the band trace of D.  The
degrees-of-freedom correction replaces w by w' = w - band_trace(D) inside
the Theta rate (never inside f_t), which restores the exact chi-square
calibration of the spectrum uncertainty.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dataclass_field

import numpy as np

from .grids import (LogSpectrum, SpectralBands, apply_band_filter,
                    apply_phi_inverse, band_power, from_harmonic,
                    phi_position_diagonal, to_harmonic)
from .likelihoods import (LikelihoodGradients, MeasurementModel,
                          likelihood_gradients)
from .operators import LinearOperator, cg_solve, to_dense
from .priors import HyperPrior, SmoothnessOperator

RATE_FLOOR = 1e-12


def _scaled_filter_preconditioner(position_diag: np.ndarray,
                                  mode_phi_inv: np.ndarray,
                                  bands: SpectralBands,
                                  inverse: bool = False) -> LinearOperator:
    """Approximate inverse of (prior precision + position-varying diagonal).

    Symmetric scaling by the exact position diagonal flattens the
    exponential dynamic range of non-Gaussian likelihood curvatures and of
    heavy steering; a harmonic filter then absorbs what remains of the
    band-diagonal prior.  SPD by congruence.  With inverse=True the
    operator approximates the forward matrix instead.
    """
    grid = bands.grid
    pd = np.asarray(position_diag, dtype=float)
    pd = np.maximum(pd, 1e-12 * max(float(np.max(np.abs(pd))), 1e-300))
    b = 1.0 / np.sqrt(pd)
    g = 1.0 / float(np.median(pd))
    f = 1.0 / (1.0 + g * mode_phi_inv)
    if inverse:
        b = 1.0 / b
        f = 1.0 / f

    def matvec(v):
        return b * from_harmonic(grid, f * to_harmonic(grid, b * v))

    return LinearOperator(domain_size=grid.n_pixels, matvec=matvec,
                          is_self_adjoint=True)


@dataclass
class CField:
    """One rank-1 term of the field-spectrum cross covariance."""

    eigenvalue: float
    band_vector: np.ndarray
    field: np.ndarray


@dataclass
class PosteriorState:
    """Current Gaussian trial posterior, with probed covariance summaries.

    Dhat is the pixelwise diagonal of D, Dband the per-band harmonic traces
    tr(P_k D); both are Monte Carlo estimates at production scale and exact
    in the dense test path.
    """

    m: np.ndarray
    t: LogSpectrum
    theta: np.ndarray
    Dhat: np.ndarray
    Dband: np.ndarray
    c_fields: list[CField] = dataclass_field(default_factory=list)

    @property
    def r(self) -> float:
        return self.t.reference_scale

    @property
    def theta_diag(self) -> np.ndarray:
        return np.diag(self.theta)

    @property
    def tprime(self) -> LogSpectrum:
        # recomputed on access so it can never go stale
        return LogSpectrum(values=self.t.values - 0.5 * self.theta_diag,
                           reference_scale=self.r)


def _residual_modes(state: PosteriorState, bands: SpectralBands) -> np.ndarray:
    """Harmonic modes of m minus its band-dependent c-field correction."""
    h = to_harmonic(bands.grid, state.m)
    for cf in state.c_fields:
        h = h - cf.band_vector[bands.mode_to_band] * to_harmonic(bands.grid, cf.field)
    return h


def band_w(state: PosteriorState, bands: SpectralBands) -> tuple[np.ndarray, np.ndarray]:
    """Per-band field fluctuation budget.

    Returns (w, w_prime): w counts the posterior mean power plus the field
    uncertainty, w_prime strips the uncertainty again (the degrees of
    freedom actually constrained by the data).
    """
    resid = _residual_modes(state, bands)
    w_prime = np.bincount(bands.mode_to_band, weights=np.abs(resid) ** 2,
                          minlength=bands.n_bands)
    return w_prime + state.Dband, w_prime


def field_prior_energy(state: PosteriorState, bands: SpectralBands) -> float:
    """Internal energy of the field prior at the current state."""
    w, _ = band_w(state, bands)
    tp = state.tprime.values
    return float(0.5 * state.t.values @ bands.rho
                 + 0.5 * np.sum(np.exp(-tp) * w) / state.r)


def field_force(state: PosteriorState, grads: LikelihoodGradients,
                bands: SpectralBands) -> np.ndarray:
    """Negative gradient of the free energy with respect to m."""
    tp = state.tprime
    prior = apply_phi_inverse(tp, state.m, bands)
    inv_p = np.exp(-tp.values) / state.r
    for cf in state.c_fields:
        prior = prior - apply_band_filter(inv_p * cf.band_vector, cf.field, bands)
    return -grads.grad_m - prior


def spectrum_force(state: PosteriorState, hp: HyperPrior, smoothness: SmoothnessOperator,
                   bands: SpectralBands, w: np.ndarray | None = None) -> np.ndarray:
    """Negative gradient of the free energy with respect to t."""
    if w is None:
        w, _ = band_w(state, bands)
    tp = state.tprime.values
    theta_rate = (hp.q + 0.5 * w / state.r) * np.exp(-tp)
    return theta_rate - (hp.alpha - 1.0 + 0.5 * bands.rho
                         + smoothness.matrix @ state.t.values)


def _band_rate(state: PosteriorState, hp: HyperPrior, bands: SpectralBands,
               use_corrected: bool) -> np.ndarray:
    w, w_prime = band_w(state, bands)
    w_used = w_prime if use_corrected else w
    rate = (hp.q + 0.5 * w_used / state.r) * np.exp(-state.tprime.values)
    return np.maximum(rate, RATE_FLOOR)


def band_precision_matrix(rate: np.ndarray, smoothness: SmoothnessOperator,
                          temperature: float) -> np.ndarray:
    """F^{-1}: the spectrum-block precision at the given per-band rate."""
    return (smoothness.matrix + np.diag(rate)) / temperature


def theta_fixpoint(state: PosteriorState, grads: LikelihoodGradients | None,
                   hp: HyperPrior, smoothness: SmoothnessOperator,
                   bands: SpectralBands, use_corrected: bool = True,
                   temperature: float = 1.0, eig_floor: float = 1e-8,
                   eig_floor_rel: float = 1e-3,
                   eig_cap: float = 100.0) -> np.ndarray:
    """Self-consistent spectrum covariance Theta = F - C.T E^{-1} C.

    Eigenvalues are floored (PSD guard) and capped (keeps exp(-t') finite
    even when a band is fully unconstrained).
    """
    rate = _band_rate(state, hp, bands, use_corrected)
    f_inv = band_precision_matrix(rate, smoothness, temperature)
    f_mat = np.linalg.inv(f_inv)
    theta = f_mat
    if state.c_fields:
        if grads is None:
            raise ValueError("c-field correction needs likelihood curvature")
        dop = DOperator(state, grads, hp, smoothness, bands,
                        temperature=temperature, use_corrected=use_corrected)
        k = len(state.c_fields)
        gram = np.empty((k, k))
        einv_c = [dop.apply_e_inverse(cf.field) for cf in state.c_fields]
        for i, cf in enumerate(state.c_fields):
            for j in range(k):
                gram[i, j] = float(cf.field @ einv_c[j])
        gram = 0.5 * (gram + gram.T)
        a_mat = np.column_stack([cf.band_vector for cf in state.c_fields])
        theta = f_mat - a_mat @ gram @ a_mat.T
    theta = 0.5 * (theta + theta.T)
    lam, vec = np.linalg.eigh(theta)
    f_lam_max = float(np.linalg.eigvalsh(f_mat).max())
    floor_v = max(eig_floor, eig_floor_rel * f_lam_max)
    lam = np.clip(lam, min(floor_v, eig_cap), eig_cap)
    return (vec * lam) @ vec.T


class DOperator:
    """Matrix-free field covariance D = E - C F^{-1} C.T and friends.

    E^{-1} applies directly (prior precision plus likelihood curvature);
    E itself is inverted by conjugate gradients, and D^{-1} by an outer CG
    around D (nested solves).
    """

    def __init__(self, state: PosteriorState, grads: LikelihoodGradients,
                 hp: HyperPrior, smoothness: SmoothnessOperator,
                 bands: SpectralBands, temperature: float = 1.0,
                 cg_tol: float = 1e-8, cg_max_iter: int | None = None,
                 use_corrected: bool = True):
        self.state = state
        self.grads = grads
        self.bands = bands
        self.temperature = temperature
        self.cg_tol = cg_tol
        self.cg_max_iter = cg_max_iter
        n = bands.grid.n_pixels
        tp = state.tprime

        def einv(v):
            return (apply_phi_inverse(tp, v, bands) + grads.curvature.apply(v)) / temperature

        self._einv_op = LinearOperator(domain_size=n, matvec=einv,
                                       is_self_adjoint=True)
        # scaled-filter approximations of E and E^{-1} precondition every
        # E-block solve (pure iteration-path change, never the solution)
        self._mode_phi_inv = ((np.exp(-tp.values) / tp.reference_scale)
                              [bands.mode_to_band] / temperature)
        pos_diag = self.e_inverse_diagonal()
        self._precond_e = _scaled_filter_preconditioner(
            pos_diag, self._mode_phi_inv, bands)
        self._precond_d_inverse = _scaled_filter_preconditioner(
            pos_diag, self._mode_phi_inv, bands, inverse=True)
        if state.c_fields:
            rate = _band_rate(state, hp, bands, use_corrected)
            self._f_inv = band_precision_matrix(rate, smoothness, temperature)
        else:
            self._f_inv = None

    @property
    def e_inverse_operator(self) -> LinearOperator:
        return self._einv_op

    def apply_e_inverse(self, v: np.ndarray) -> np.ndarray:
        return self._einv_op.apply(v)

    def apply_e(self, v: np.ndarray, tol: float | None = None) -> np.ndarray:
        return cg_solve(self._einv_op, v, tol=tol or self.cg_tol,
                        max_iter=self.cg_max_iter, precond=self._precond_e)

    def _apply_a_d(self, v: np.ndarray) -> np.ndarray:
        cfs = self.state.c_fields
        band_part = np.zeros(self.bands.n_bands)
        for cf in cfs:
            band_part += cf.band_vector * float(cf.field @ v)
        x = np.linalg.solve(self._f_inv, band_part)
        out = np.zeros_like(v)
        for cf in cfs:
            out += cf.field * float(cf.band_vector @ x)
        return out

    def apply(self, v: np.ndarray, tol: float | None = None) -> np.ndarray:
        out = self.apply_e(v, tol=tol)
        if self.state.c_fields:
            out = out - self._apply_a_d(v)
        return out

    def as_operator(self, tol: float | None = None) -> LinearOperator:
        n = self.bands.grid.n_pixels
        return LinearOperator(domain_size=n,
                              matvec=lambda v: self.apply(v, tol=tol),
                              is_self_adjoint=True)

    def apply_inverse(self, v: np.ndarray, tol: float | None = None) -> np.ndarray:
        # outer CG around the (self-adjoint, positive) composite D
        return cg_solve(self.as_operator(tol=tol), v, tol=tol or self.cg_tol,
                        max_iter=self.cg_max_iter,
                        precond=self._precond_d_inverse)

    def field_block_preconditioner(self, eta_diag: np.ndarray) -> LinearOperator:
        """Approximate inverse of the steered block E^{-1} + diag(eta)."""
        return _scaled_filter_preconditioner(
            self.e_inverse_diagonal() + eta_diag, self._mode_phi_inv, self.bands)

    def e_inverse_diagonal(self) -> np.ndarray:
        """Exact position diagonal of E^{-1} (prior part is constant)."""
        tp = self.state.tprime
        n = self.bands.grid.n_pixels
        prior_diag = float(np.sum(self.bands.rho * np.exp(-tp.values))
                           / tp.reference_scale / n)
        return (prior_diag + 2.0 * self.grads.grad_Dhat) / self.temperature

    def exact_summaries(self, tol: float | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Exact diag(D) and per-band traces of D, replacing probing.

        O(n log n) when the posterior precision is harmonic-diagonal
        (stationary normal models); otherwise n operator applies and an
        n x n dense intermediate, so only sensible for small grids.
        """
        bands = self.bands
        n = bands.grid.n_pixels
        tp = self.state.tprime
        curv_hat = self.grads.curvature_harmonic_diag
        if curv_hat is not None:
            einv_modes = (np.exp(-tp.values)[bands.mode_to_band]
                          / tp.reference_scale + curv_hat) / self.temperature
            d_modes = 1.0 / einv_modes
            dband = np.bincount(bands.mode_to_band, weights=d_modes,
                                minlength=bands.n_bands)
            dhat = np.full(n, d_modes.sum() / n)
            if self.state.c_fields:
                cfs = self.state.c_fields
                a_mat = np.stack([cf.band_vector for cf in cfs])
                gram = a_mat @ np.linalg.solve(self._f_inv, a_mat.T)
                hats = [to_harmonic(bands.grid, cf.field) for cf in cfs]
                for i, ci in enumerate(cfs):
                    for j, cj in enumerate(cfs):
                        dhat = dhat - gram[i, j] * ci.field * cj.field
                        cross = (hats[i] * hats[j].conj()).real
                        dband = dband - gram[i, j] * np.bincount(
                            bands.mode_to_band, weights=cross,
                            minlength=bands.n_bands)
            return dhat, dband
        cols = np.empty((n, n))
        unit = np.zeros(n)
        for j in range(n):
            unit[j] = 1.0
            cols[:, j] = self.apply(unit, tol=tol)
            unit[j] = 0.0
        dhat = np.diag(cols).copy()
        hat_cols = np.empty((n, n), dtype=complex)
        f_rows = np.empty((n, n), dtype=complex)
        for j in range(n):
            hat_cols[:, j] = to_harmonic(bands.grid, cols[:, j])
            unit[j] = 1.0
            f_rows[:, j] = to_harmonic(bands.grid, unit)
            unit[j] = 0.0
        diag_h = np.einsum("kj,kj->k", hat_cols, f_rows.conj()).real
        dband = np.bincount(bands.mode_to_band, weights=diag_h,
                            minlength=bands.n_bands)
        return dhat, dband


def solve_c(state: PosteriorState, grads: LikelihoodGradients,
            bands: SpectralBands, n_modes: int,
            cg_tol: float = 1e-8,
            previous: list[CField] | None = None) -> list[CField]:
    """Cross-covariance fields along the leading spectrum eigendirections.

    For each large Theta eigenpair (lam, a) solve
      [(1 + lam/r) PhiInv_{t'} + curvature] c = (lam/r) PhiInv_{t'} P_a m
    where P_a projects m onto the band profile a.

    When previous fields are given, eigenpairs are matched to them by
    overlap instead of ranked by eigenvalue.  Near-degenerate pairs
    otherwise swap places between refreshes, and the resulting dither in
    the band projection rocks the outer loop.
    """
    if n_modes <= 0:
        return []
    lam, vec = np.linalg.eigh(state.theta)
    order = list(np.argsort(lam)[::-1])
    if previous:
        matched = []
        taken = set()
        for cf in previous[:n_modes]:
            overlaps = np.abs(vec.T @ cf.band_vector)
            for idx in np.argsort(overlaps)[::-1]:
                if int(idx) not in taken:
                    matched.append(int(idx))
                    taken.add(int(idx))
                    break
        for idx in order:
            if len(matched) >= n_modes:
                break
            if idx not in taken:
                matched.append(int(idx))
                taken.add(int(idx))
        order = matched
    tp = state.tprime
    r = state.r
    out = []
    for idx in order[:n_modes]:
        lam_i = float(lam[idx])
        if lam_i <= 0:
            continue
        a = vec[:, idx].copy()
        source = apply_band_filter(a, state.m, bands)
        rhs = (lam_i / r) * apply_phi_inverse(tp, source, bands)
        scale = 1.0 + lam_i / r

        def matvec(v, _s=scale):
            return _s * apply_phi_inverse(tp, v, bands) + grads.curvature.apply(v)

        op = LinearOperator(domain_size=bands.grid.n_pixels, matvec=matvec,
                            is_self_adjoint=True)
        prior_flat = scale * phi_position_diagonal(tp, bands)
        mode_phi_inv = scale * (np.exp(-tp.values) / tp.reference_scale)[bands.mode_to_band]
        pos_diag = prior_flat + 2.0 * grads.grad_Dhat
        c = cg_solve(op, rhs, tol=cg_tol,
                     precond=_scaled_filter_preconditioner(pos_diag, mode_phi_inv,
                                                           bands))
        out.append(CField(eigenvalue=lam_i, band_vector=a, field=c))
    return out


def c_matrix(c_fields: list[CField], n_pixels: int, n_bands: int) -> np.ndarray:
    """Dense (n_pixels, n_bands) cross covariance, for oracles and export."""
    c = np.zeros((n_pixels, n_bands))
    for cf in c_fields:
        c += np.outer(cf.field, cf.band_vector)
    return c


def entropy(cov: np.ndarray) -> float:
    """Gaussian entropy 0.5 tr(1 + ln(2 pi S)) of a dense covariance."""
    lam = np.linalg.eigvalsh(np.asarray(cov, dtype=float))
    if np.any(lam <= 0):
        raise ValueError("covariance must be positive definite")
    return float(0.5 * np.sum(1.0 + np.log(2.0 * np.pi * lam)))


def entropic_force_adjointness_check(d: np.ndarray, theta: np.ndarray,
                                     c: np.ndarray, rel_tol: float = 1e-10) -> bool:
    """Verify E^{-1} C Theta^{-1} == D^{-1} C F^{-1} on dense blocks.

    This identity lets the entropic force on the cross block be evaluated
    from either side; it must hold for any consistent (D, Theta, C).
    """
    theta_inv = np.linalg.inv(theta)
    d_inv = np.linalg.inv(d)
    e = d + c @ theta_inv @ c.T
    f = theta + c.T @ d_inv @ c
    lhs = np.linalg.solve(e, c @ theta_inv)
    rhs = d_inv @ c @ np.linalg.inv(f)
    scale = max(float(np.linalg.norm(lhs)), 1e-300)
    return float(np.linalg.norm(lhs - rhs)) / scale <= rel_tol


def _dense_band_traces(d: np.ndarray, bands: SpectralBands) -> np.ndarray:
    n = bands.grid.n_pixels
    eye = np.eye(n)
    f_full = np.empty((n, n), dtype=complex)
    for j in range(n):
        f_full[:, j] = to_harmonic(bands.grid, eye[:, j])
    fd = f_full @ d
    diag = np.einsum("kj,kj->k", fd, f_full.conj()).real
    return np.bincount(bands.mode_to_band, weights=diag, minlength=bands.n_bands)


def dense_covariance(m: np.ndarray, tprime: LogSpectrum, model: MeasurementModel,
                     bands: SpectralBands, Dhat: np.ndarray,
                     temperature: float = 1.0) -> np.ndarray:
    """Dense D = E at the given point (no cross coupling).  Oracle path."""
    grads = likelihood_gradients(model, m, Dhat)
    n = bands.grid.n_pixels

    def einv(v):
        return (apply_phi_inverse(tprime, v, bands) + grads.curvature.apply(v)) / temperature

    e_inv = to_dense(LinearOperator(domain_size=n, matvec=einv, is_self_adjoint=True))
    return np.linalg.inv(e_inv)


def solve_dense_fixpoint(m: np.ndarray, t: LogSpectrum, model: MeasurementModel,
                         hp: HyperPrior, smoothness: SmoothnessOperator,
                         bands: SpectralBands, use_corrected: bool = False,
                         temperature: float = 1.0, tol: float = 1e-13,
                         max_iter: int = 400) -> tuple[PosteriorState, np.ndarray]:
    """Iterate the (D, Theta) fix points exactly on a small grid.

    Returns the self-consistent state at fixed (m, t), plus dense D.  With
    use_corrected=False the returned point is a stationary point of the
    dense free energy in the covariances for the normal model, which is
    what the envelope-style force tests rely on.
    """
    n = bands.grid.n_pixels
    nb = bands.n_bands
    state = PosteriorState(m=np.asarray(m, dtype=float), t=t,
                           theta=np.diag(np.full(nb, 1e-3)),
                           Dhat=np.zeros(n), Dband=np.zeros(nb), c_fields=[])
    d_dense = np.eye(n)
    for _ in range(max_iter):
        d_dense = dense_covariance(state.m, state.tprime, model, bands,
                                   state.Dhat, temperature)
        dhat = np.diag(d_dense).copy()
        dband = _dense_band_traces(d_dense, bands)
        new = PosteriorState(m=state.m, t=t, theta=state.theta,
                             Dhat=dhat, Dband=dband, c_fields=[])
        rate = _band_rate(new, hp, bands, use_corrected)
        theta = np.linalg.inv(band_precision_matrix(rate, smoothness, temperature))
        theta = 0.5 * (theta + theta.T)
        delta = max(float(np.max(np.abs(theta - state.theta))),
                    float(np.max(np.abs(dhat - state.Dhat))))
        state = PosteriorState(m=state.m, t=t, theta=theta, Dhat=dhat,
                               Dband=dband, c_fields=[])
        if delta < tol:
            return state, d_dense
    raise RuntimeError("dense covariance fix point did not settle")


def dense_gibbs(state: PosteriorState, d_dense: np.ndarray,
                model: MeasurementModel, hp: HyperPrior,
                smoothness: SmoothnessOperator, bands: SpectralBands,
                temperature: float = 1.0) -> float:
    """Exact free energy on a small grid, given the dense field covariance."""
    n = bands.grid.n_pixels
    nb = bands.n_bands
    grads = likelihood_gradients(model, state.m, np.diag(d_dense).copy())
    u_like = grads.energy
    if grads.energy_omits_uncertainty_trace:
        curv = to_dense(grads.curvature)
        u_like += 0.5 * float(np.sum(curv * d_dense))
    tp = state.tprime.values
    w_exact = band_w(PosteriorState(m=state.m, t=state.t, theta=state.theta,
                                    Dhat=np.diag(d_dense).copy(),
                                    Dband=_dense_band_traces(d_dense, bands),
                                    c_fields=state.c_fields), bands)[0]
    u_field = 0.5 * float(state.t.values @ bands.rho) \
        + 0.5 * float(np.sum(np.exp(-tp) * w_exact)) / state.r
    tv = state.t.values
    u_spec = 0.5 * float(tv @ (smoothness.matrix @ tv)) \
        + 0.5 * float(np.sum(smoothness.matrix * state.theta)) \
        + float((hp.alpha - 1.0) @ tv) + float(hp.q @ np.exp(-tp))
    c = c_matrix(state.c_fields, n, nb)
    joint = np.block([[d_dense, c], [c.T, state.theta]])
    return u_like + u_field + u_spec - temperature * entropy(joint)


def gibbs_free_energy(state: PosteriorState, model: MeasurementModel,
                      hp: HyperPrior, smoothness: SmoothnessOperator,
                      bands: SpectralBands, temperature: float = 1.0,
                      dense_mode: bool = False) -> float:
    """Free energy of the current state.

    dense_mode evaluates everything exactly (small grids only).  The
    default is a production-scale monitor: the likelihood uncertainty trace
    is contracted against the probed pixel diagonal, the field log
    determinant is approximated band by band from the probed traces, and
    the cross coupling is ignored.  Good for tracking descent, not for
    reporting absolute evidence.
    """
    if dense_mode:
        d_dense = dense_covariance(state.m, state.tprime, model, bands,
                                   state.Dhat, temperature)
        if state.c_fields:
            c = c_matrix(state.c_fields, bands.grid.n_pixels, bands.n_bands)
            d_dense = d_dense - c @ np.linalg.solve(state.theta, c.T)
        return dense_gibbs(state, d_dense, model, hp, smoothness, bands, temperature)

    grads = likelihood_gradients(model, state.m, state.Dhat)
    u_like = grads.energy
    if grads.energy_omits_uncertainty_trace:
        u_like += float(state.Dhat @ grads.grad_Dhat)
    u_field = field_prior_energy(state, bands)
    tv = state.t.values
    tp = state.tprime.values
    u_spec = 0.5 * float(tv @ (smoothness.matrix @ tv)) \
        + 0.5 * float(np.sum(smoothness.matrix * state.theta)) \
        + float((hp.alpha - 1.0) @ tv) + float(hp.q @ np.exp(-tp))
    n = bands.grid.n_pixels
    nb = bands.n_bands
    lam_theta = np.maximum(np.linalg.eigvalsh(state.theta), 1e-12)
    logdet_d = float(np.sum(bands.rho * np.log(
        np.maximum(state.Dband, 1e-300) / bands.rho)))
    ent = 0.5 * ((n + nb) * (1.0 + np.log(2.0 * np.pi))
                 + float(np.sum(np.log(lam_theta))) + logdet_d)
    return u_like + u_field + u_spec - temperature * ent
