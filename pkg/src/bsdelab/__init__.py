"""bsdelab: a numerical laboratory for quadratic-growth BSDEs.

Simulates forward SDEs with their tangent processes, solves quadratic
BSDEs by regression Monte Carlo, differentiates them in the initial point
(variational BSDE vs finite differences), computes Malliavin derivatives
two ways, and runs BMO/Girsanov integrability diagnostics.  Everything is
seeded and deterministic; see the fixture registry for vetted examples.
"""

from .bmo import (BmoEstimate, GirsanovReport, HolderExponents, MomentReport,
                  estimate_bmo2, find_r, girsanov_weights,
                  moment_bound_diagnostic, psi)
from .bsde import (BsdeSolution, LinearDriver, NodeRegressionCache,
                   RegressionBasis, Truncation, cole_hopf_solve,
                   condexp_regress, martingale_standard_error,
                   solve_linear_bsde, solve_lsmc, y0_standard_error)
from .errors import (BadGrid, Blowup, BsdeLabError, ConfigError, DomainError,
                     EmptyInput, InsufficientHs, MissingDiagonal,
                     NonFiniteCoefficient, NonFiniteState, OverflowInExponent,
                     ShapeMismatch, SingularBasis, SingularVariation,
                     UnknownFixture)
from .fixtures import (Fixture, Reference, config_for_fixture, fixture_names,
                       gauss_hermite_expectation, get_fixture)
from .forward import (PathSet, shift_initial, simulate, simulate_brownian,
                      simulate_sde)
from .harness import (ExperimentSpec, RunManifest, emit_convergence_table,
                      list_fixtures, load_spec, run, spec_hash)
from .malliavin import (MalliavinDerivative, TraceReport, dtheta_forward,
                        malliavin_derivative, representation_from_variational,
                        solve_malliavin_bsde, trace_check)
from .model import (CheckResult, ExperimentConfig, QuadraticGenerator,
                    SdeModel, TerminalCondition, TimeGrid, ValidationReport,
                    build_grid, scalar_generator, scalar_sde, scalar_terminal,
                    validate_model)
from .sensitivity import (DifferenceQuotient, SensitivityReport,
                          StabilityReport, VariationalSolution,
                          convergence_study, finite_difference_sensitivity,
                          solve_variational_bsde, stability_diagnostic)
from .verify import CriterionResult, verify_all

__version__ = "0.1.0"
