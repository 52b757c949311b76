"""Damped Newton descent of the free energy with adaptive steering.

Each outer iteration: (1) refresh the Monte Carlo estimates of the field
covariance diagonal and band traces (running means, reset when the
effective spectrum has drifted), (2) adopt the spectrum covariance fix
point, (3) periodically refresh the cross-covariance fields, (4) evaluate
forces, (5) solve the damped Newton system by conjugate gradients,
(6) update the per-component damping from step-direction correlations, and
(7) test convergence on the force norm and the relative step size.

Damping: the Newton system is (S^{-1} + eta) dx = f with eta the
componentwise product of a dimensionless steering factor eta' and the
(estimated) diagonal of S^{-1}.  eta' halves where consecutive steps agree
in sign, triples where they flip or stall, and never drops below the
configured floor.  By default only the spectrum block is steered; the
field block joins in for the stiffer non-Gaussian likelihoods.

The spectrum lives in log amplitude, so its Newton curvature vanishes
exponentially for bands the data do not constrain; a raw step there can be
astronomically long even though the fix point is finite.  Each log spectrum
component is therefore trust-region limited to max_step_t per iteration
(max_step_m optionally does the same for the field block).
"""

from __future__ import annotations

from dataclasses import dataclass, field as dataclass_field, replace
from typing import Callable, Optional

import numpy as np

from .free_energy import (DOperator, PosteriorState, band_precision_matrix,
                          band_w, field_force, gibbs_free_energy, solve_c,
                          spectrum_force, theta_fixpoint, _band_rate)
from .grids import (LogSpectrum, SpectralBands, band_power,
                    phi_position_diagonal, to_harmonic)
from .likelihoods import MeasurementModel, likelihood_gradients
from .operators import (BreakdownNegativeCurvature, LinearOperator,
                        NonConvergenceError, cg_solve, clip)
from .priors import HyperPrior, SmoothnessOperator


class MaxIterationsExceeded(RuntimeError):
    """The outer loop hit its iteration budget; carries the last state."""

    def __init__(self, result: "ReconstructionResult"):
        super().__init__(f"no convergence within {result.n_iter} outer iterations")
        self.result = result


class OverflowGuardError(RuntimeError):
    """The exponential cap was still active at the converged point."""


@dataclass
class SolverConfig:
    """Knobs of the outer loop.  Defaults suit desk-scale problems."""

    max_outer_iter: int = 200
    cg_tol: float = 1e-4
    cg_tol_final: float = 1e-8
    n_probes: int = 32
    probe_reset_threshold: float = 0.5
    n_c_modes: int = 0
    c_refresh_every: int = 5
    temperature: float = 1.0
    f_accelerate: float = 0.5
    f_brake: float = 3.0
    eta_floor: float = 0.3
    eta_ceiling: float = 1e9
    force_tol: float = 1e-3
    step_tol: float = 1e-4
    max_step_t: float = 5.0
    max_step_m: float = 0.0
    # iterations with the spectrum held fixed while the mean absorbs the
    # data; starting both from scratch lets the spectrum collapse before
    # the mean carries any band power (w' = 0 reads as an empty band)
    spectrum_warmup: int = 2
    converged_window: int = 3
    seed: int = 0
    steer_m: bool = False
    update_spectrum: bool = True
    freeze_theta_zero: bool = False
    use_theta_correction: bool = True
    # also bounds the t' = t - theta_tilde/2 shift: a cap of C inflates
    # e^{-t'} by at most e^{C/2}, and an unmeasured band pinned at the cap
    # must not push the field precision into overflow territory
    theta_eig_cap: float = 10.0
    # adopting the spectrum covariance fix point outright is an undamped
    # fixed point iteration whose local slope grows with the equilibrium
    # value itself; at a weakly measured band it turns into a two-cycle
    # bouncing off the eigenvalue cap.  A convex step of weight beta keeps
    # the iterates positive semidefinite and is locally stable for
    # equilibria up to 2*(2/beta - 1); 0.25 covers the cap with margin
    theta_relax: float = 0.25
    max_step_retries: int = 3
    final_probe_factor: int = 4


@dataclass
class SteeringState:
    """Per-component dimensionless damping and the previous step."""

    eta_m: np.ndarray
    eta_t: np.ndarray
    prev_dm: np.ndarray
    prev_dt: np.ndarray


def update_damping(steering: SteeringState, dm: np.ndarray, dt: np.ndarray,
                   cfg: SolverConfig) -> SteeringState:
    """Accelerate where consecutive steps align, brake where they flip.

    A zero product (first step, stalled component) counts as a flip.  The
    floor is enforced unconditionally.  A ceiling guards against overflow:
    a component that dithers at rounding level (a frozen band, a step at
    CG tolerance) would otherwise brake geometrically without bound.
    """

    def advance(eta, step, prev):
        agree = step * prev > 0
        out = np.where(agree, eta * cfg.f_accelerate, eta * cfg.f_brake)
        return np.clip(out, cfg.eta_floor, cfg.eta_ceiling)

    return SteeringState(eta_m=advance(steering.eta_m, dm, steering.prev_dm),
                         eta_t=advance(steering.eta_t, dt, steering.prev_dt),
                         prev_dm=dm.copy(), prev_dt=dt.copy())


@dataclass
class ReconstructionResult:
    m: np.ndarray
    t: LogSpectrum
    Dhat: np.ndarray
    Dband: np.ndarray
    theta: np.ndarray
    theta_corrected: np.ndarray
    theta_uncorrected: np.ndarray
    c_fields: list
    converged: bool
    n_iter: int
    diagnostics: list[dict]
    covariance_correction_applied: bool = False
    warnings: list[str] = dataclass_field(default_factory=list)


class _ProbeAccumulator:
    """Joint running-mean probes of diag(D) and the band traces of D.

    One Gaussian probe costs one D application and serves both estimates.
    Probe i always uses the stream seeded by (seed, i); the index never
    repeats within a run, so every estimate is reproducible.
    """

    def __init__(self, seed: int, n_pixels: int, n_bands: int):
        self.seed = seed
        self.next_index = 0
        self.n_pixels = n_pixels
        self.n_bands = n_bands
        self.reset(np.zeros(0))

    def reset(self, tprime_ref: np.ndarray):
        self.count = 0
        self.dhat_sum = np.zeros(self.n_pixels)
        self.dband_sum = np.zeros(self.n_bands)
        self.tprime_ref = tprime_ref.copy()

    def drifted(self, tprime: np.ndarray, threshold: float) -> bool:
        if self.count == 0:
            return True
        return bool(np.max(np.abs(tprime - self.tprime_ref)) > threshold)

    def add(self, dop: DOperator, bands: SpectralBands, n_probes: int):
        for i in range(self.next_index, self.next_index + n_probes):
            xi = np.random.default_rng([self.seed, i]).standard_normal(self.n_pixels)
            y = dop.apply(xi)
            self.dhat_sum += xi * y
            hx = to_harmonic(bands.grid, xi)
            hy = to_harmonic(bands.grid, y)
            self.dband_sum += np.bincount(bands.mode_to_band,
                                          weights=(hx.conj() * hy).real,
                                          minlength=self.n_bands)
        self.next_index += n_probes
        self.count += n_probes

    def means(self) -> tuple[np.ndarray, np.ndarray]:
        return self.dhat_sum / self.count, self.dband_sum / self.count


def _clip_covariance_summaries(state: PosteriorState, bands: SpectralBands,
                               dhat: np.ndarray, dband: np.ndarray):
    tp = state.tprime
    dhat_cap = phi_position_diagonal(tp, bands)
    dband_cap = bands.rho * tp.power()
    return clip(dhat, 0.0, dhat_cap), clip(dband, 0.0, dband_cap)


def initial_state(model: MeasurementModel, bands: SpectralBands,
                  cfg: SolverConfig, reference_scale: float = 1.0,
                  init_t: LogSpectrum | None = None) -> PosteriorState:
    """Zero mean, flat crude spectrum, weakly informative Theta, no coupling."""
    nb = bands.n_bands
    if init_t is not None:
        t = LogSpectrum(values=np.asarray(init_t.values, dtype=float).copy(),
                        reference_scale=init_t.reference_scale)
    else:
        back = model.response.adjoint(model.data)
        if model.kind != "normal":
            # the backprojection estimates exp(field); its floored log is
            # the crude field proxy, recentred so the zero mode cannot
            # dominate the pooled level
            scale = float(np.max(np.abs(back)))
            floor = 1e-3 * scale if scale > 0 else 1.0
            back = np.log(np.maximum(back, floor))
            back = back - float(np.mean(back))
        # pool mode-weighted (total power over total modes, i.e. the proxy
        # variance): an unweighted band mean lets the few low-k bands set a
        # level orders of magnitude above the spread the start state must
        # support, and the first covariance estimates blow up with it
        crude = (float(np.sum(band_power(back, bands))) / bands.grid.n_pixels
                 / reference_scale)
        level = np.log(crude) if crude > 0 else 0.0
        t = LogSpectrum(values=np.full(nb, level), reference_scale=reference_scale)
    theta = np.zeros((nb, nb)) if cfg.freeze_theta_zero else np.diag(2.0 / bands.rho)
    return PosteriorState(m=np.zeros(bands.grid.n_pixels), t=t, theta=theta,
                          Dhat=np.zeros(bands.grid.n_pixels),
                          Dband=np.zeros(nb), c_fields=[])


def newton_step(state: PosteriorState, dop: DOperator, f_m: np.ndarray,
                f_t: np.ndarray, steering: SteeringState, f_inv: np.ndarray,
                cfg: SolverConfig, update_spectrum: bool) -> tuple[np.ndarray, np.ndarray]:
    """Solve (S^{-1} + eta) dx = f for the step dx = (dm, dt).

    With no cross coupling the blocks decouple: CG on the field block,
    a dense solve on the small spectrum block.  With coupling active the
    full self-adjoint block system is solved by CG on the joint vector.
    """
    n = f_m.size
    nb = f_t.size
    eta_m_vec = steering.eta_m * dop.e_inverse_diagonal() if cfg.steer_m else np.zeros(n)
    eta_t_vec = steering.eta_t * np.diag(f_inv)

    if not state.c_fields:
        field_op = LinearOperator(
            domain_size=n,
            matvec=lambda v: dop.apply_e_inverse(v) + eta_m_vec * v,
            is_self_adjoint=True)
        field_pre = dop.field_block_preconditioner(eta_m_vec)
        dm = cg_solve(field_op, f_m, tol=cfg.cg_tol, precond=field_pre)
        if update_spectrum:
            dt = np.linalg.solve(f_inv + np.diag(eta_t_vec), f_t)
        else:
            dt = np.zeros(nb)
        _assert_steering_bound(dm, dt, f_m, f_t, eta_m_vec, eta_t_vec, cfg, update_spectrum)
        return dm, dt

    theta = state.theta
    c_fields = state.c_fields

    def c_apply(x):
        out = np.zeros(n)
        for cf in c_fields:
            out += cf.field * float(cf.band_vector @ x)
        return out

    def ct_apply(v):
        out = np.zeros(nb)
        for cf in c_fields:
            out += cf.band_vector * float(cf.field @ v)
        return out

    def block_apply(z):
        zm, zt = z[:n], z[n:]
        e1 = dop.apply_e_inverse(zm)
        th_zt = np.linalg.solve(theta, zt)
        e2 = dop.apply_e_inverse(c_apply(th_zt))
        top = e1 - e2 + eta_m_vec * zm
        bottom = -np.linalg.solve(theta, ct_apply(e1)) + f_inv @ zt + eta_t_vec * zt
        return np.concatenate([top, bottom])

    rhs = np.concatenate([f_m, f_t if update_spectrum else np.zeros(nb)])
    op = LinearOperator(domain_size=n + nb, matvec=block_apply, is_self_adjoint=True)
    field_pre = dop.field_block_preconditioner(eta_m_vec)
    t_pre_diag = 1.0 / (np.diag(f_inv) + eta_t_vec)

    def block_precond(z):
        return np.concatenate([field_pre.apply(z[:n]), t_pre_diag * z[n:]])

    pre = LinearOperator(domain_size=n + nb, matvec=block_precond,
                         is_self_adjoint=True)
    z = cg_solve(op, rhs, tol=cfg.cg_tol, precond=pre)
    dm, dt = z[:n], z[n:]
    if not update_spectrum:
        dt = np.zeros(nb)
    _assert_steering_bound(dm, dt, f_m, f_t, eta_m_vec, eta_t_vec, cfg,
                           update_spectrum, coupled=True)
    return dm, dt


def _assert_steering_bound(dm, dt, f_m, f_t, eta_m_vec, eta_t_vec, cfg,
                           update_spectrum, coupled=False):
    # (S^{-1} + eta) >= eta in the PSD order bounds the steered step.  The
    # per-block form only holds when the blocks decouple; with active cross
    # coupling the bound applies to the joint vector, and only when every
    # component is steered (an unsteered zero eta voids the PSD argument).
    slack = 1.0 + 1e-6
    if coupled:
        if cfg.steer_m and eta_m_vec.min() > 0 and update_spectrum \
                and eta_t_vec.min() > 0:
            f_all = np.concatenate([f_m, f_t])
            z_all = np.concatenate([dm, dt])
            bound = np.linalg.norm(f_all) / min(eta_m_vec.min(), eta_t_vec.min())
            assert np.linalg.norm(z_all) <= bound * slack + 1e-300, \
                "joint step exceeds its steering bound"
        return
    if cfg.steer_m and eta_m_vec.size and eta_m_vec.min() > 0:
        bound = np.linalg.norm(f_m) / eta_m_vec.min()
        assert np.linalg.norm(dm) <= bound * slack + 1e-300, \
            "field step exceeds its steering bound"
    if update_spectrum and eta_t_vec.size and eta_t_vec.min() > 0:
        bound = np.linalg.norm(f_t) / eta_t_vec.min()
        assert np.linalg.norm(dt) <= bound * slack + 1e-300, \
            "spectrum step exceeds its steering bound"


def run(cfg: SolverConfig, model: MeasurementModel, bands: SpectralBands,
        hp: HyperPrior, smoothness: SmoothnessOperator,
        reference_scale: float = 1.0, init_t: LogSpectrum | None = None,
        log_fn: Optional[Callable[[str], None]] = None,
        collect_gibbs: bool = True) -> ReconstructionResult:
    """Run the full reconstruction.  Raises MaxIterationsExceeded (carrying
    the last state) if the convergence window is never satisfied."""
    if model.data is None:
        raise ValueError("run needs a model with observed data")
    if cfg.freeze_theta_zero and cfg.n_c_modes > 0:
        raise ValueError("cross-covariance modes require an evolving theta")
    n = bands.grid.n_pixels
    nb = bands.n_bands
    state = initial_state(model, bands, cfg, reference_scale, init_t)
    steering = SteeringState(eta_m=np.ones(n), eta_t=np.ones(nb),
                             prev_dm=np.zeros(n), prev_dt=np.zeros(nb))
    probes = _ProbeAccumulator(cfg.seed, n, nb)
    diagnostics: list[dict] = []
    streak = 0
    converged = False
    m_force_scale = None
    it = 0

    for it in range(1, cfg.max_outer_iter + 1):
        grads = likelihood_gradients(model, state.m, state.Dhat)
        dop = DOperator(state, grads, hp, smoothness, bands,
                        temperature=cfg.temperature, cg_tol=cfg.cg_tol,
                        use_corrected=cfg.use_theta_correction)
        if cfg.n_probes == 0:
            raw = dop.exact_summaries()
        else:
            tp_now = state.tprime.values
            if probes.drifted(tp_now, cfg.probe_reset_threshold):
                probes.reset(tp_now)
            probes.add(dop, bands, cfg.n_probes)
            raw = probes.means()
        dhat, dband = _clip_covariance_summaries(state, bands, *raw)
        state = replace(state, Dhat=dhat, Dband=dband)

        grads = likelihood_gradients(model, state.m, state.Dhat)
        # Adopt the fix point only once the mean carries data: at the zero
        # initialization every corrected band rate degenerates to q*e^{-t'}.
        if not cfg.freeze_theta_zero and it > 1:
            theta = theta_fixpoint(state, grads, hp, smoothness, bands,
                                   use_corrected=cfg.use_theta_correction,
                                   temperature=cfg.temperature,
                                   eig_cap=cfg.theta_eig_cap)
            beta = min(max(cfg.theta_relax, 0.0), 1.0)
            theta = (1.0 - beta) * state.theta + beta * theta
            state = replace(state, theta=theta)
            dhat, dband = _clip_covariance_summaries(state, bands, *raw)
            state = replace(state, Dhat=dhat, Dband=dband)
            grads = likelihood_gradients(model, state.m, state.Dhat)

        if cfg.n_c_modes > 0 and (it - 1) % cfg.c_refresh_every == 0:
            c_fields = solve_c(state, grads, bands, cfg.n_c_modes, cfg.cg_tol,
                               previous=state.c_fields)
            state = replace(state, c_fields=c_fields)

        # forces and the Newton curvature must see the adopted theta
        dop = DOperator(state, grads, hp, smoothness, bands,
                        temperature=cfg.temperature, cg_tol=cfg.cg_tol,
                        use_corrected=cfg.use_theta_correction)

        spectrum_live = cfg.update_spectrum and it > cfg.spectrum_warmup
        w, _ = band_w(state, bands)
        f_m = field_force(state, grads, bands)
        f_t = (spectrum_force(state, hp, smoothness, bands, w)
               if spectrum_live else np.zeros(nb))
        if m_force_scale is None:
            m_force_scale = max(float(np.max(np.abs(f_m))), 1e-300)

        # The Newton t-block uses the implicit curvature, with the band
        # covariance tracking the spectrum rather than frozen.  Writing
        # y = D_mode e^{-t'}/r for the prior fraction of a mode, the
        # covariance part of w contributes sum y(1-y)/2 instead of the
        # frozen sum y/2: nothing for prior dominated bands (where the
        # frozen curvature overestimates stiffness and stalls the tail)
        # and nothing for data dominated ones, but real stiffness at the
        # measurement edge (skipping it makes edge bands overshoot and
        # oscillate).  Band means stand in for the per mode fractions.
        rate = _band_rate(state, hp, bands, use_corrected=True)
        ybar = np.clip(state.Dband * np.exp(-state.tprime.values)
                       / (state.t.reference_scale * bands.rho), 0.0, 1.0)
        rate = rate + 0.5 * bands.rho * ybar * (1.0 - ybar)
        f_inv = band_precision_matrix(rate, smoothness, cfg.temperature)

        dm = dt = None
        for attempt in range(cfg.max_step_retries + 1):
            try:
                dm, dt = newton_step(state, dop, f_m, f_t, steering, f_inv,
                                     cfg, spectrum_live)
                break
            except (BreakdownNegativeCurvature, NonConvergenceError):
                if attempt == cfg.max_step_retries:
                    raise
                steering = SteeringState(eta_m=steering.eta_m * cfg.f_brake,
                                         eta_t=steering.eta_t * cfg.f_brake,
                                         prev_dm=steering.prev_dm,
                                         prev_dt=steering.prev_dt)
                if attempt >= 1 and state.c_fields:
                    # heavier damping did not cure it: the cross coupling
                    # itself has broken positive definiteness (a nearly
                    # empty band weights residual field noise by a huge
                    # precision), so shed the weakest mode and retry
                    state = replace(state, c_fields=state.c_fields[:-1])
                    dop = DOperator(state, grads, hp, smoothness, bands,
                                    temperature=cfg.temperature,
                                    cg_tol=cfg.cg_tol,
                                    use_corrected=cfg.use_theta_correction)

        if cfg.max_step_t > 0:
            dt = np.clip(dt, -cfg.max_step_t, cfg.max_step_t)
        if cfg.max_step_m > 0:
            dm = np.clip(dm, -cfg.max_step_m, cfg.max_step_m)
        steering = update_damping(steering, dm, dt, cfg)
        new_m = state.m + dm
        new_t = state.t
        if spectrum_live:
            new_t = LogSpectrum(values=state.t.values + dt,
                                reference_scale=state.t.reference_scale)
        state = replace(state, m=new_m, t=new_t)

        x_norm = np.sqrt(float(np.sum(new_m**2))
                         + (float(np.sum(new_t.values**2)) if cfg.update_spectrum else 0.0))
        step_norm = np.sqrt(float(np.sum(dm**2)) + float(np.sum(dt**2)))
        rel_step = step_norm / max(x_norm, 1e-12)
        f_m_inf = float(np.max(np.abs(f_m)))
        f_t_inf = float(np.max(np.abs(f_t))) if cfg.update_spectrum else 0.0
        force_ok = (f_t_inf < cfg.force_tol if cfg.update_spectrum
                    else f_m_inf < cfg.force_tol * m_force_scale)
        step_ok = rel_step < cfg.step_tol
        warming = cfg.update_spectrum and not spectrum_live
        streak = streak + 1 if (force_ok and step_ok and not warming) else 0

        record = {"iteration": it, "f_m_inf": f_m_inf, "f_t_inf": f_t_inf,
                  "rel_step": rel_step,
                  "eta_max": float(max(steering.eta_m.max(), steering.eta_t.max())),
                  "probe_count": probes.count}
        if collect_gibbs:
            record["gibbs"] = gibbs_free_energy(state, model, hp, smoothness,
                                                bands, cfg.temperature)
        diagnostics.append(record)
        if log_fn is not None:
            g_txt = f" G={record['gibbs']:.6g}" if collect_gibbs else ""
            log_fn(f"iter {it:4d}  |f_m|={f_m_inf:.3e}  |f_t|={f_t_inf:.3e}"
                   f"  step={rel_step:.3e}{g_txt}  eta_max={record['eta_max']:.3g}")

        if streak >= cfg.converged_window:
            converged = True
            break

    result = _finalize(cfg, model, bands, hp, smoothness, state, probes,
                       diagnostics, converged, it)
    if not converged:
        raise MaxIterationsExceeded(result)
    return result


def _finalize(cfg, model, bands, hp, smoothness, state, probes, diagnostics,
              converged, n_iter) -> ReconstructionResult:
    """Report final covariances: re-probe D with the curvature correction
    that is only safe at the minimum, and export both theta variants."""
    warnings_list: list[str] = []
    corrected = converged and model.kind in ("lognormal", "poisson")
    grads = likelihood_gradients(model, state.m, state.Dhat,
                                 covariance_corrected=corrected)
    if converged and grads.exp_cap_hit:
        raise OverflowGuardError("exponential overflow guard still active at "
                                 "the converged point; rescale the problem")

    def final_summaries(g):
        dop = DOperator(state, g, hp, smoothness, bands,
                        temperature=cfg.temperature, cg_tol=cfg.cg_tol_final,
                        use_corrected=cfg.use_theta_correction)
        if cfg.n_probes == 0:
            return dop.exact_summaries(tol=cfg.cg_tol_final)
        fp = _ProbeAccumulator(cfg.seed, bands.grid.n_pixels, bands.n_bands)
        fp.next_index = probes.next_index
        fp.reset(state.tprime.values)
        fp.add(dop, bands, cfg.n_probes * cfg.final_probe_factor)
        return fp.means()

    applied = corrected
    try:
        raw = final_summaries(grads)
    except BreakdownNegativeCurvature:
        if not corrected:
            raise
        warnings_list.append("corrected curvature not positive definite; "
                             "final covariances use the uncorrected form")
        applied = False
        grads = likelihood_gradients(model, state.m, state.Dhat)
        raw = final_summaries(grads)
    dhat, dband = _clip_covariance_summaries(state, bands, *raw)
    state = replace(state, Dhat=dhat, Dband=dband)
    final_grads = likelihood_gradients(model, state.m, state.Dhat)
    theta_corr = theta_fixpoint(state, final_grads, hp, smoothness, bands,
                                use_corrected=True, temperature=cfg.temperature,
                                eig_cap=cfg.theta_eig_cap)
    theta_unc = theta_fixpoint(state, final_grads, hp, smoothness, bands,
                               use_corrected=False, temperature=cfg.temperature,
                               eig_cap=cfg.theta_eig_cap)
    return ReconstructionResult(m=state.m, t=state.t, Dhat=state.Dhat,
                                Dband=state.Dband, theta=state.theta,
                                theta_corrected=theta_corr,
                                theta_uncorrected=theta_unc,
                                c_fields=state.c_fields, converged=converged,
                                n_iter=n_iter, diagnostics=diagnostics,
                                covariance_correction_applied=applied,
                                warnings=warnings_list)
