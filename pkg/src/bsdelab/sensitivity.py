"""Initial-point sensitivities two ways: variational BSDE vs finite differences.

The variational route solves the formally differentiated linear BSDE whose
coefficients (dl/dy, dl/dz and the quadratic-term slope) are evaluated on
the BASE solution and frozen, never re-fit.  The finite-difference route
re-solves the full BSDE at a shifted initial point under common random
numbers.  convergence_study compares the two in the sup/L2 sample norms.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .bsde import (BsdeSolution, LinearDriver, NodeRegressionCache,
                   RegressionBasis, Truncation, solve_linear_bsde, solve_lsmc)
from .errors import InsufficientHs, ShapeMismatch
from .forward import PathSet, shift_initial, simulate
from .model import ExperimentConfig, QuadraticGenerator, TerminalCondition


def _check_aligned(base: BsdeSolution, paths: PathSet):
    if base.y.shape[0] != paths.n_paths or base.y.shape[1] != paths.grid.n_steps + 1:
        raise ShapeMismatch("base solution and paths are not aligned")


def linearized_coefficients(base: BsdeSolution, paths: PathSet,
                            gen: QuadraticGenerator,
                            trunc: Optional[Truncation] = None):
    """Driver coefficients of the differentiated BSDE, frozen on the base.

    Returns (l_part, h) for solve_linear_bsde: l_part(k,t,u,v) =
    dl_dy*u + dl_dz.v evaluated at the base (X, Y, Z); h = alpha * g'_n(Z),
    the z-slope of the quadratic term actually solved (2*alpha*Z when
    untruncated).  The dl_dx array is returned separately for A-terms.
    """
    if trunc is None:
        trunc = base.truncation
    m, steps = paths.n_paths, paths.grid.n_steps
    n, d = paths.dim_x, paths.dim_w
    dly = np.zeros((m, steps + 1))
    dlz = np.zeros((m, steps + 1, d))
    dlx = np.zeros((m, steps + 1, n))
    h = np.zeros((m, steps + 1, d)) if gen.alpha != 0.0 else None
    for k in range(steps):
        t_k = float(paths.grid.nodes[k])
        xk = paths.states[:, k]
        yk = base.y[:, k]
        zk = base.z[:, k]
        dly[:, k] = gen.dl_dy(t_k, xk, yk, zk)
        dlz[:, k] = gen.dl_dz(t_k, xk, yk, zk)
        dlx[:, k] = gen.dl_dx(t_k, xk, yk, zk)
        if h is not None:
            h[:, k] = gen.alpha * trunc.gprime(zk)

    def l_part(k, t, u, v):
        return dly[:, k] * u + np.einsum("md,md->m", dlz[:, k], v)

    return l_part, h, dlx


@dataclass
class VariationalSolution:
    """Stacked per-axis solutions of the differentiated BSDE.

    grad_y: (M, N+1, n) with grad_y[.,N,:] the differentiated terminal
    condition per path; grad_z: (M, N+1, d, n).
    """

    grad_y: np.ndarray
    grad_z: np.ndarray
    grid: object
    basis: RegressionBasis
    diagnostics: dict = field(default_factory=dict)

    def grad_y0(self, axis: int = 0) -> float:
        return float(self.grad_y[:, 0, axis].mean())


def solve_variational_bsde(base: BsdeSolution, paths: PathSet,
                           gen: QuadraticGenerator, term: TerminalCondition,
                           basis: Optional[RegressionBasis] = None,
                           picard_iters: int = 3,
                           cache: Optional[NodeRegressionCache] = None
                           ) -> VariationalSolution:
    """Solve the differentiated BSDE along every initial-point axis.

    Axis i uses terminal data (grad xi)_i, source term A = dl_dx . (J e_i)
    and the linear driver from linearized_coefficients; everything is
    evaluated on the base solution.
    """
    _check_aligned(base, paths)
    if basis is None:
        basis = base.basis
    if cache is None:
        cache = NodeRegressionCache(paths, basis)
    m, steps = paths.n_paths, paths.grid.n_steps
    n, d = paths.dim_x, paths.dim_w
    l_part, h, dlx = linearized_coefficients(base, paths, gen)
    grad_xi = term.gradient(paths)  # (M, n)

    grad_y = np.empty((m, steps + 1, n))
    grad_z = np.empty((m, steps + 1, d, n))
    per_axis_diags = []
    for i in range(n):
        a = np.zeros((m, steps + 1))
        for k in range(steps):
            a[:, k] = np.einsum("mn,mn->m", dlx[:, k], paths.tangents[:, k, :, i])
        lin = LinearDriver(l=l_part, h=h, a=a)
        sol = solve_linear_bsde(lin, grad_xi[:, i], paths, basis,
                                picard_iters=picard_iters, cache=cache)
        grad_y[:, :, i] = sol.y
        grad_z[:, :, :, i] = sol.z
        per_axis_diags.append(sol.diagnostics)
    return VariationalSolution(grad_y=grad_y, grad_z=grad_z, grid=paths.grid,
                               basis=basis,
                               diagnostics={"per_axis": per_axis_diags})


@dataclass(frozen=True)
class DifferenceQuotient:
    """Finite-difference quotients (U^h, V^h) under common random numbers."""

    u: np.ndarray        # (M, N+1)
    v: np.ndarray        # (M, N+1, d)
    zeta: np.ndarray     # (M,)
    h: float
    axis: int
    central: bool = False


def finite_difference_sensitivity(config: ExperimentConfig, h: float,
                                  axis: int = 0,
                                  base_paths: Optional[PathSet] = None,
                                  base: Optional[BsdeSolution] = None,
                                  central: bool = False) -> DifferenceQuotient:
    """Re-solve the BSDE at x0 + h e_axis (same noise) and form quotients.

    Forward quotient by default, mirroring the one-sided construction;
    central=True solves at x0 +/- h instead.
    """
    if h == 0:
        raise ShapeMismatch("finite-difference step h must be nonzero")
    basis = RegressionBasis(config.model.dim_x, config.basis_degree)
    if base_paths is None:
        base_paths = simulate(config)
    if not central and base is None:
        base = solve_lsmc(config.generator, config.terminal, base_paths, basis,
                          picard_iters=config.picard_iters)
    up_paths = shift_initial(config, axis, h, increments=base_paths.increments)
    up = solve_lsmc(config.generator, config.terminal, up_paths, basis,
                    picard_iters=config.picard_iters)
    if central:
        dn_paths = shift_initial(config, axis, -h, increments=base_paths.increments)
        dn = solve_lsmc(config.generator, config.terminal, dn_paths, basis,
                        picard_iters=config.picard_iters)
        u = (up.y - dn.y) / (2 * h)
        v = (up.z - dn.z) / (2 * h)
    else:
        u = (up.y - base.y) / h
        v = (up.z - base.z) / h
    return DifferenceQuotient(u=u, v=v, zeta=u[:, -1].copy(), h=h, axis=axis,
                              central=central)


@dataclass(frozen=True)
class SensitivityRow:
    h: float
    e_sup: float
    e_l2_z: float
    n_paths: int
    seed: int


@dataclass
class SensitivityReport:
    """Per-h error table with the fitted convergence order.

    slope is the log-log slope of the root error E_sup^(1/(2p)) against
    |h|, i.e. the estimated order beta in sup-error ~ h^beta; a forward
    quotient dominated by its first-order bias sits near 1.
    """

    rows: tuple
    slope: float
    r_squared: float
    passed: bool
    tolerance: float
    axis: int
    exponent_p: float


def convergence_study(config: ExperimentConfig, hs: Sequence[float],
                      axis: int = 0, sup_tolerance: float = 0.05,
                      exponent_p: float = 1.0) -> SensitivityReport:
    """Compare U^h against the variational solution over a ladder of h.

    E_sup(h) = sample mean of sup_k |U^h - grad Y . e_axis|^{2p} and the
    matching L2 error on V^h; PASS when E_sup decreases monotonically in
    |h| and the final E_sup is below sup_tolerance.
    """
    hs = [float(h) for h in hs]
    if any(h == 0 for h in hs):
        raise InsufficientHs("h values must be nonzero")
    mags = sorted({abs(h) for h in hs}, reverse=True)
    if len(mags) < 3:
        raise InsufficientHs(f"need >= 3 distinct |h|, got {len(mags)}")
    if mags[0] / mags[-1] < 100.0 * (1 - 1e-12):
        raise InsufficientHs("|h| values must span at least two decades")

    basis = RegressionBasis(config.model.dim_x, config.basis_degree)
    base_paths = simulate(config)
    cache = NodeRegressionCache(base_paths, basis)
    base = solve_lsmc(config.generator, config.terminal, base_paths, basis,
                      picard_iters=config.picard_iters, cache=cache)
    varsol = solve_variational_bsde(base, base_paths, config.generator,
                                    config.terminal, basis,
                                    picard_iters=config.picard_iters,
                                    cache=cache)
    dt = config.grid.dt
    steps = config.grid.n_steps
    ref_y = varsol.grad_y[:, :, axis]
    ref_z = varsol.grad_z[:, :, :, axis]

    ordered = sorted(hs, key=abs, reverse=True)
    rows = []
    for h in ordered:
        quot = finite_difference_sensitivity(config, h, axis,
                                             base_paths=base_paths, base=base)
        diff_y = np.abs(quot.u - ref_y).max(axis=1)
        e_sup = float(np.mean(diff_y ** (2 * exponent_p)))
        dz = quot.v[:, :steps] - ref_z[:, :steps]
        e_l2 = float(np.mean((np.sum(dz ** 2, axis=(1, 2)) * dt) ** exponent_p))
        rows.append(SensitivityRow(h=h, e_sup=e_sup, e_l2_z=e_l2,
                                   n_paths=config.n_paths, seed=config.seed))

    log_h = np.log10([abs(r.h) for r in rows])
    # fit the order of the root error, not of its 2p-th power
    log_e = np.log10([max(r.e_sup, 1e-300) for r in rows]) / (2 * exponent_p)
    slope, intercept = np.polyfit(log_h, log_e, 1)
    fitted = slope * log_h + intercept
    ss_res = float(np.sum((log_e - fitted) ** 2))
    ss_tot = float(np.sum((log_e - log_e.mean()) ** 2))
    r_squared = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    e_vals = [r.e_sup for r in rows]
    monotone = all(a > b for a, b in zip(e_vals, e_vals[1:]))
    passed = monotone and e_vals[-1] < sup_tolerance
    return SensitivityReport(rows=tuple(rows), slope=float(slope),
                             r_squared=r_squared, passed=passed,
                             tolerance=sup_tolerance, axis=axis,
                             exponent_p=exponent_p)


@dataclass(frozen=True)
class StabilityRow:
    epsilon: float
    norm_y: float
    norm_z: float


@dataclass
class StabilityReport:
    """Solution-difference norms for scaled terminal perturbations."""

    rows: tuple
    ratios: tuple  # (eps_ratio, y_ratio, z_ratio) for consecutive eps pairs


def stability_diagnostic(config: ExperimentConfig,
                         epsilons: Sequence[float],
                         eta: Optional[Callable] = None) -> StabilityReport:
    """Norms of Y/Z differences under terminal perturbations xi + eps*eta.

    eta is a bounded fixed map of X_T (default cos).  Every solve shares
    the base paths, so eps = 0 gives exact zeros, and consecutive-eps norm
    ratios read off the first-order scaling.
    """
    epsilons = [float(e) for e in epsilons]
    if len(epsilons) < 2:
        raise ShapeMismatch("need at least two epsilon values")
    if any(e < 0 for e in epsilons):
        raise ShapeMismatch("epsilon values must be >= 0")
    if eta is None:
        def eta(x):
            return np.cos(x[:, 0])
    basis = RegressionBasis(config.model.dim_x, config.basis_degree)
    paths = simulate(config)
    cache = NodeRegressionCache(paths, basis)
    term = config.terminal
    base = solve_lsmc(config.generator, term, paths, basis,
                      picard_iters=config.picard_iters, cache=cache)
    dt = config.grid.dt
    steps = config.grid.n_steps
    rows = []
    for eps in epsilons:
        def sampler(p, _eps=eps):
            return term.evaluate(p) + _eps * eta(p.states[:, -1])
        bound = None if term.bound is None else term.bound + abs(eps)
        perturbed = type(term)(kind="sampler", sampler=sampler, bound=bound)
        sol = solve_lsmc(config.generator, perturbed, paths, basis,
                         picard_iters=config.picard_iters, cache=cache)
        dy = sol.y - base.y
        dz = sol.z[:, :steps] - base.z[:, :steps]
        norm_y = float(np.sqrt(np.mean(np.abs(dy).max(axis=1) ** 2)))
        norm_z = float(np.sqrt(np.mean(np.sum(dz ** 2, axis=(1, 2)) * dt)))
        rows.append(StabilityRow(epsilon=eps, norm_y=norm_y, norm_z=norm_z))
    ratios = []
    for lo, hi in zip(rows, rows[1:]):
        if lo.epsilon == 0 or lo.norm_y == 0:
            continue
        ratios.append((hi.epsilon / lo.epsilon, hi.norm_y / lo.norm_y,
                       hi.norm_z / lo.norm_z if lo.norm_z > 0 else float("nan")))
    return StabilityReport(rows=tuple(rows), ratios=tuple(ratios))
