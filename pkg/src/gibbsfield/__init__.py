"""Joint inference of a correlated field and its power spectrum.

A Gaussian trial posterior over the field and its log band spectrum is
fitted by minimizing its Gibbs free energy: gradients drive damped Newton
updates of the means while the covariance blocks are adopted from their
self-consistent fix points.  Supports additive Gaussian data on the field
or on its exponential, and Poisson counts with log-normal intensity.
"""

from .grids import (EmptyBandError, GridSpace, LogSpectrum, SpectralBands,
                    apply_band_filter, apply_phi, apply_phi_inverse,
                    band_power, build_bands, draw_gaussian_field,
                    from_harmonic, phi_position_diagonal, to_harmonic)
from .operators import (BreakdownNegativeCurvature, LinearOperator,
                        NonConvergenceError, ProbeEstimate, cg_solve, clip,
                        identity_operator, operator_from_matrix,
                        probe_band_diagonal, probe_diagonal, probe_trace,
                        to_dense)
from .priors import (HyperPrior, SmoothnessOperator, build_smoothness_operator,
                     spectral_hamiltonian, spectral_hamiltonian_gradient)
from .likelihoods import (ExposureResponse, FourierMaskResponse,
                          GaussianConvolutionResponse, IdentityResponse,
                          LikelihoodGradients, MeasurementModel, Response,
                          likelihood_gradients, lognormal_energy_dense,
                          lognormal_gradients, measurement_model,
                          normal_gradients, pln_gradients, simulate_data)
from .free_energy import (CField, DOperator, PosteriorState, band_w,
                          dense_covariance, dense_gibbs, entropy,
                          entropic_force_adjointness_check, field_force,
                          field_prior_energy, gibbs_free_energy, solve_c,
                          solve_dense_fixpoint, spectrum_force, theta_fixpoint)
from .solver import (MaxIterationsExceeded, OverflowGuardError,
                     ReconstructionResult, SolverConfig, SteeringState,
                     newton_step, run, update_damping)
from .config import (ConfigError, RunConfig, build_band_structure, build_model,
                     build_priors, resolve_config, true_log_spectrum,
                     validate_config)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
