"""Matrix-free linear operators, conjugate gradients, and trace probing.

Everything at production scale is applied, never materialized: operators are
callables on flat arrays.  Dense realizations exist only for small oracle
tests via to_dense.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .grids import SpectralBands, to_harmonic


class NonConvergenceError(RuntimeError):
    """CG ran out of iterations; carries the final relative residual."""

    def __init__(self, residual: float, n_iter: int):
        super().__init__(f"cg did not converge in {n_iter} iterations "
                         f"(relative residual {residual:.3e})")
        self.residual = residual
        self.n_iter = n_iter


class BreakdownNegativeCurvature(RuntimeError):
    """CG met a direction of non-positive curvature: operator not SPD."""


@dataclass(frozen=True)
class LinearOperator:
    """A self-describing matrix-free linear map on flat float64 arrays."""

    domain_size: int
    matvec: Callable[[np.ndarray], np.ndarray]
    is_self_adjoint: bool = False

    def apply(self, x: np.ndarray) -> np.ndarray:
        return self.matvec(np.asarray(x, dtype=float))


def operator_from_matrix(a: np.ndarray) -> LinearOperator:
    a = np.asarray(a, dtype=float)
    sym = np.allclose(a, a.T)
    return LinearOperator(domain_size=a.shape[1], matvec=lambda x: a @ x,
                          is_self_adjoint=sym)


def identity_operator(n: int) -> LinearOperator:
    return LinearOperator(domain_size=n, matvec=lambda x: x.copy(),
                          is_self_adjoint=True)


def add_diagonal(op: LinearOperator, diag) -> LinearOperator:
    d = np.broadcast_to(np.asarray(diag, dtype=float), (op.domain_size,)).copy()
    return LinearOperator(domain_size=op.domain_size,
                          matvec=lambda x: op.apply(x) + d * x,
                          is_self_adjoint=op.is_self_adjoint)


def to_dense(op: LinearOperator) -> np.ndarray:
    """Materialize an operator column by column.  Small sizes only."""
    n = op.domain_size
    out = np.empty((n, n))
    e = np.zeros(n)
    for j in range(n):
        e[j] = 1.0
        out[:, j] = op.apply(e)
        e[j] = 0.0
    return out


def cg_solve(a: LinearOperator, b: np.ndarray, tol: float = 1e-8,
             max_iter: int | None = None, x0: np.ndarray | None = None,
             precond: LinearOperator | None = None) -> np.ndarray:
    """Conjugate gradients for SPD systems, relative-residual stopping.

    precond, when given, applies an SPD approximation of a^{-1}; it changes
    the iteration path, never the solution or the stopping rule (which stays
    on the true residual).

    Raises:
        BreakdownNegativeCurvature: on a direction with p.A p <= 0.
        NonConvergenceError: when max_iter is exhausted.
    """
    b = np.asarray(b, dtype=float)
    n = b.size
    if max_iter is None:
        max_iter = 10 * n
    b_norm = float(np.linalg.norm(b))
    if b_norm == 0.0:
        return np.zeros(n)
    x = np.zeros(n) if x0 is None else np.asarray(x0, dtype=float).copy()
    r = b - a.apply(x) if x0 is not None else b.copy()
    if np.linalg.norm(r) / b_norm <= tol:
        return x
    z = precond.apply(r) if precond is not None else r
    p = z.copy()
    rz = float(r @ z)
    for _ in range(max_iter):
        ap = a.apply(p)
        p_ap = float(p @ ap)
        if p_ap <= 0.0:
            raise BreakdownNegativeCurvature(
                f"curvature {p_ap:.3e} along a cg search direction")
        alpha = rz / p_ap
        x += alpha * p
        r -= alpha * ap
        if np.linalg.norm(r) / b_norm <= tol:
            return x
        z = precond.apply(r) if precond is not None else r
        rz_new = float(r @ z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise NonConvergenceError(np.linalg.norm(r) / b_norm, max_iter)


def clip(values: np.ndarray, lower, upper) -> np.ndarray:
    """Componentwise clip with a sanity check on the bounds."""
    lo = np.asarray(lower, dtype=float)
    hi = np.asarray(upper, dtype=float)
    if np.any(lo > hi):
        raise ValueError("clip called with lower bound above upper bound")
    return np.clip(np.asarray(values, dtype=float), lo, hi)


@dataclass
class ProbeEstimate:
    """Running-mean Monte Carlo estimate over white-noise probes.

    Probe i always uses the generator seeded by (seed, i), so extending an
    estimate with more probes reproduces the batch computation bit for bit.
    """

    total: np.ndarray | float
    n_probes: int
    seed: int

    @property
    def value(self):
        return self.total / self.n_probes


def _probe_xi(seed: int, index: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, index]).standard_normal(n)


def _accumulate(outcome: Callable[[np.ndarray], np.ndarray | float], n: int,
                n_probes: int, seed: int,
                resume: ProbeEstimate | None) -> ProbeEstimate:
    start = 0 if resume is None else resume.n_probes
    total = 0.0 if resume is None else resume.total
    for i in range(start, start + n_probes):
        total = total + outcome(_probe_xi(seed, i, n))
    return ProbeEstimate(total=total, n_probes=start + n_probes, seed=seed)


def probe_trace(op: LinearOperator, n_probes: int, seed: int,
                resume: ProbeEstimate | None = None) -> ProbeEstimate:
    """Hutchinson trace estimate tr(O) = <xi.O xi> over Gaussian probes."""
    return _accumulate(lambda xi: float(xi @ op.apply(xi)),
                       op.domain_size, n_probes, seed, resume)


def probe_diagonal(op: LinearOperator, n_probes: int, seed: int,
                   resume: ProbeEstimate | None = None) -> ProbeEstimate:
    """Diagonal estimate diag(O) = <xi * (O xi)> over Gaussian probes."""
    return _accumulate(lambda xi: xi * op.apply(xi),
                       op.domain_size, n_probes, seed, resume)


def probe_band_diagonal(op: LinearOperator, bands: SpectralBands, n_probes: int,
                        seed: int, resume: ProbeEstimate | None = None) -> ProbeEstimate:
    """Per-band harmonic traces tr(P_k O) via the same Gaussian probes."""

    def outcome(xi):
        hx = to_harmonic(bands.grid, xi)
        hy = to_harmonic(bands.grid, op.apply(xi))
        return np.bincount(bands.mode_to_band,
                           weights=(hx.conj() * hy).real,
                           minlength=bands.n_bands)

    return _accumulate(outcome, op.domain_size, n_probes, seed, resume)
