"""Backward LSMC solvers: quadratic BSDE, linear BSDE, Cole-Hopf oracle.

Conditional expectations are ordinary least squares onto a monomial basis
of the state, solved through the normal equations with a deterministic
ridge fallback for rank-deficient designs (a deterministic start point
gives a one-point design at node 0 and must not crash).

Scheme conventions shared by all solvers:
  * backward induction from the terminal node, Y[.,N] = xi exactly;
  * at node k the conditional mean of Y[.,k+1] is fitted first, Z[.,k] is
    regressed from the martingale increment (Y[.,k+1] - mean fit) * dW/dt,
    then Y[.,k] = mean fit + f(t_k, X_k, Y, Z_k) dt with Picard iteration
    in the Y argument only;
  * Z[.,N] is by convention a copy of Z[.,N-1] and never enters integrals.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import Blowup, OverflowInExponent, ShapeMismatch, SingularBasis
from .errors import DomainError
from .forward import PathSet
from .model import QuadraticGenerator, SdeModel, TerminalCondition

_TINY_POSITIVE = np.finfo(float).tiny


class RegressionBasis:
    """Monomials of the n state components up to total degree p, plus constant.

    Basis size B = C(n+p, p); exponent tuples are enumerated in graded
    lexicographic order so feature columns are deterministic.
    """

    def __init__(self, dim: int, degree: int):
        if dim < 1 or degree < 0:
            raise ShapeMismatch("basis needs dim >= 1 and degree >= 0")
        self.dim = dim
        self.degree = degree
        exps = []
        for total in range(degree + 1):
            exps.extend(sorted(_compositions(total, dim), reverse=True))
        self.exponents = np.array(exps, dtype=int).reshape(len(exps), dim)
        assert self.size == math.comb(dim + degree, degree)

    @property
    def size(self) -> int:
        return self.exponents.shape[0]

    def design(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.prod(x[:, None, :] ** self.exponents[None, :, :], axis=2)

    def gradient(self, x: np.ndarray) -> np.ndarray:
        """d(phi_j)/d(x_k) stacked as (paths, B, n)."""
        x = np.asarray(x, dtype=float)
        m = x.shape[0]
        out = np.empty((m, self.size, self.dim))
        for k in range(self.dim):
            shifted = self.exponents.copy()
            shifted[:, k] = np.maximum(shifted[:, k] - 1, 0)
            vals = np.prod(x[:, None, :] ** shifted[None, :, :], axis=2)
            out[:, :, k] = self.exponents[None, :, k] * vals
        return out


def _compositions(total, dim):
    if dim == 1:
        yield (total,)
        return
    for head in range(total + 1):
        for tail in _compositions(total - head, dim - 1):
            yield (head,) + tail


@dataclass(frozen=True)
class Truncation:
    """The truncation family g_n acting radially on z.

    g_n(z) = |z|^2 for |z| <= n and 2n|z| - n^2 beyond; its slope
    g'_n(z) = 2z clipped radially at 2n; h_n(z) = (g_n(z)/|z|^2) z with
    h_n(0) = 0.  level=None means no truncation (g = |z|^2).
    """

    level: Optional[float] = None

    def __post_init__(self):
        if self.level is not None and self.level <= 0:
            raise DomainError("truncation level must be positive")

    def g(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        s = np.linalg.norm(z, axis=-1)
        if self.level is None:
            return s ** 2
        n = self.level
        return np.where(s <= n, s ** 2, 2.0 * n * s - n ** 2)

    def gprime(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        if self.level is None:
            return 2.0 * z
        s = np.linalg.norm(z, axis=-1, keepdims=True)
        scale = np.minimum(1.0, self.level / np.maximum(s, _TINY_POSITIVE))
        return 2.0 * z * scale

    def h(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        s2 = np.sum(z * z, axis=-1, keepdims=True)
        g = self.g(z)[..., None]
        out = np.zeros_like(z)
        np.divide(g * z, s2, out=out, where=s2 > 0)
        return out


class _NodeRegression:
    """Normal equations for one node's design matrix, reusable across targets."""

    def __init__(self, design: np.ndarray):
        m, b = design.shape
        if m <= b:
            raise SingularBasis(f"{m} paths cannot support a basis of size {b}")
        self.design = design
        gram = design.T @ design
        if not np.isfinite(gram).all():
            raise SingularBasis("non-finite design matrix")
        self.ridged = False
        eigs = np.linalg.eigvalsh(gram)
        if eigs[0] <= 1e-12 * max(eigs[-1], 0.0):
            gram = gram + (1e-10 * np.trace(gram) / b) * np.eye(b)
            self.ridged = True
        self.gram = gram

    def _apply_ridge(self):
        b = self.gram.shape[0]
        self.gram = self.gram + (1e-10 * np.trace(self.gram) / b) * np.eye(b)
        self.ridged = True

    def coefficients(self, targets: np.ndarray) -> np.ndarray:
        rhs = self.design.T @ targets
        for attempt in range(2):
            try:
                coef = np.linalg.solve(self.gram, rhs)
            except np.linalg.LinAlgError:
                coef = None
            if coef is not None and np.isfinite(coef).all():
                return coef
            if self.ridged:
                break
            self._apply_ridge()
        raise SingularBasis("normal equations unsolvable after ridge fallback")

    def fit(self, targets: np.ndarray) -> np.ndarray:
        return self.design @ self.coefficients(targets)


def condexp_regress(targets: np.ndarray, states: np.ndarray,
                    basis: RegressionBasis) -> np.ndarray:
    """OLS projection of per-path targets onto span{phi(state)}.

    targets may be (paths,) or (paths, q) for q simultaneous targets.
    """
    states = np.asarray(states, dtype=float)
    if states.ndim == 1:
        states = states[:, None]
    targets = np.asarray(targets, dtype=float)
    return _NodeRegression(basis.design(states)).fit(targets)


class NodeRegressionCache:
    """Per-node factored regressions for one (PathSet, basis) pair."""

    def __init__(self, paths: PathSet, basis: RegressionBasis):
        self.paths = paths
        self.basis = basis
        self._nodes: dict[int, _NodeRegression] = {}

    def at(self, k: int) -> _NodeRegression:
        reg = self._nodes.get(k)
        if reg is None:
            reg = _NodeRegression(self.basis.design(self.paths.states[:, k]))
            self._nodes[k] = reg
        return reg


@dataclass
class BsdeSolution:
    """Per-path arrays on the grid: y (M, N+1), z (M, N+1, d).

    diagnostics holds per-node arrays of length N:
      fit_residual_rms  - RMS of Y[.,k+1] minus its conditional-mean fit;
      defect_mean_abs / defect_rms - pathwise recursion defect
      Y_k - Y_{k+1} - f dt + Z dW, the projection residual of the scheme.
    """

    y: np.ndarray
    z: np.ndarray
    grid: object
    basis: RegressionBasis
    truncation: Truncation
    diagnostics: dict = field(default_factory=dict)
    start_node: int = 0

    @property
    def y0(self) -> float:
        """Node-zero value (paths coincide there for a deterministic start)."""
        return float(self.y[:, self.start_node].mean())


def martingale_standard_error(z: np.ndarray, paths: PathSet,
                              start_node: int = 0) -> float:
    """Standard error of a start-node mean estimate from its Z integrand.

    The scheme's node-0 estimate fluctuates with the sample mean of
    xi + int f dt, whose per-path deviation is the discrete stochastic
    integral sum Z . dW up to the recursion defect; its sample std over
    sqrt(M) estimates the Monte Carlo SE.  The cross-sectional spread at
    an early node would miss the common component and understate this.
    """
    steps = paths.grid.n_steps
    mart = np.einsum("mkd,mkd->m", z[:, start_node:steps],
                     paths.increments[:, start_node:])
    return float(np.std(mart, ddof=1) / np.sqrt(z.shape[0]))


def y0_standard_error(sol: BsdeSolution, paths: PathSet) -> float:
    """Monte Carlo SE of sol.y0 via the martingale fluctuation of Z."""
    return martingale_standard_error(sol.z, paths, sol.start_node)


def _finite_or_blowup(arr: np.ndarray, what: str, node: int):
    if not np.isfinite(arr).all():
        raise Blowup(f"non-finite {what} at node {node}")


def solve_lsmc(gen: QuadraticGenerator, term: TerminalCondition,
               paths: PathSet, basis: RegressionBasis,
               trunc: Optional[Truncation] = None, picard_iters: int = 3,
               cache: Optional[NodeRegressionCache] = None) -> BsdeSolution:
    """Backward LSMC for the quadratic BSDE with driver l + alpha*g_n(z)."""
    if picard_iters < 1:
        raise ShapeMismatch("picard_iters must be >= 1")
    if trunc is None:
        trunc = Truncation(gen.truncation_level)
    if cache is None:
        cache = NodeRegressionCache(paths, basis)
    m, steps = paths.n_paths, paths.grid.n_steps
    d = paths.dim_w
    dt = paths.grid.dt
    nodes = paths.grid.nodes
    xi = term.evaluate(paths)
    if not np.isfinite(xi).all():
        raise Blowup("non-finite terminal values")
    scale = term.bound if term.bound is not None else float(np.abs(xi).max())
    cap = 1e6 * (scale + 1.0)

    y = np.empty((m, steps + 1))
    z = np.empty((m, steps + 1, d))
    y[:, steps] = xi
    fit_resid = np.empty(steps)
    defect_mean = np.empty(steps)
    defect_rms = np.empty(steps)

    for k in range(steps - 1, -1, -1):
        reg = cache.at(k)
        xk = paths.states[:, k]
        dw = paths.increments[:, k]
        y_next = y[:, k + 1]
        mean_fit = reg.fit(y_next)
        increment = y_next - mean_fit
        z[:, k] = reg.fit(increment[:, None] * dw / dt)
        _finite_or_blowup(z[:, k], "Z", k)
        t_k = float(nodes[k])
        quad = gen.alpha * trunc.g(z[:, k]) if gen.alpha != 0.0 else 0.0
        yk = mean_fit
        for _ in range(picard_iters):
            yk = mean_fit + (gen.l(t_k, xk, yk, z[:, k]) + quad) * dt
        _finite_or_blowup(yk, "Y", k)
        if np.abs(yk).max() > cap:
            raise Blowup(f"|Y| exceeded {cap:.3g} at node {k}")
        y[:, k] = yk
        f_final = gen.l(t_k, xk, yk, z[:, k]) + quad
        defect = yk - y_next - f_final * dt + np.einsum("md,md->m", z[:, k], dw)
        fit_resid[k] = float(np.sqrt(np.mean(increment ** 2)))
        defect_mean[k] = float(np.mean(np.abs(defect)))
        defect_rms[k] = float(np.sqrt(np.mean(defect ** 2)))
    z[:, steps] = z[:, steps - 1]
    diagnostics = {
        "fit_residual_rms": fit_resid,
        "defect_mean_abs": defect_mean,
        "defect_rms": defect_rms,
    }
    return BsdeSolution(y=y, z=z, grid=paths.grid, basis=basis,
                        truncation=trunc, diagnostics=diagnostics)


def cole_hopf_solve(alpha: float, term: TerminalCondition, paths: PathSet,
                    basis: RegressionBasis, model: SdeModel,
                    cache: Optional[NodeRegressionCache] = None) -> BsdeSolution:
    """Exact-transform oracle for the pure-quadratic driver f = alpha |z|^2.

    Y_t = log(E[exp(2 alpha xi) | F_t]) / (2 alpha), with the conditional
    expectation fitted by regression and Z from the fitted surface gradient
    times sigma(t_k, X_k) by the chain rule on the basis monomials.  At a
    node whose design is a single point (deterministic start) the gradient
    carries no information; Y there is still the correct sample mean.
    """
    if alpha == 0:
        raise DomainError("alpha must be nonzero for the exponential transform")
    if cache is None:
        cache = NodeRegressionCache(paths, basis)
    xi = term.evaluate(paths)
    expo = 2.0 * alpha * xi
    worst = float(np.abs(expo).max())
    if worst > 700.0:
        raise OverflowInExponent(f"|2 alpha xi| reaches {worst:.1f} > 700")
    weights = np.exp(expo)
    m, steps = paths.n_paths, paths.grid.n_steps
    d = paths.dim_w
    y = np.empty((m, steps + 1))
    z = np.empty((m, steps + 1, d))
    y[:, steps] = xi
    floored = 0
    for k in range(steps):
        reg = cache.at(k)
        coef = reg.coefficients(weights)
        fitted = reg.design @ coef
        bad = fitted <= 0
        if bad.any():
            floored += int(bad.sum())
            fitted = np.maximum(fitted, _TINY_POSITIVE)
        y[:, k] = np.log(fitted) / (2.0 * alpha)
        grad_fit = np.einsum("mbn,b->mn", basis.gradient(paths.states[:, k]), coef)
        with np.errstate(over="ignore", divide="ignore"):
            grad_y = grad_fit / (2.0 * alpha * fitted[:, None])
        if bad.any():
            # a floored fit carries no slope information
            grad_y[bad] = 0.0
        sv = np.asarray(model.sigma(float(paths.grid.nodes[k]),
                                    paths.states[:, k]), dtype=float)
        z[:, k] = np.einsum("mn,mnd->md", grad_y, sv)
    z[:, steps] = z[:, steps - 1]
    if floored:
        warnings.warn(f"cole_hopf_solve floored {floored} non-positive fitted "
                      "values before the log", RuntimeWarning, stacklevel=2)
    return BsdeSolution(y=y, z=z, grid=paths.grid, basis=basis,
                        truncation=Truncation(None), diagnostics={})


@dataclass(frozen=True)
class LinearDriver:
    """Coefficients of the linear driver l(t,U,V) + H.V + A.

    l is called as l(k, t, u, v) with the node index first so callers can
    close over per-node arrays; h is (M, N+1, d) and a is (M, N+1), their
    terminal-node entries unused.  None means zero.
    """

    l: Optional[Callable] = None
    h: Optional[np.ndarray] = None
    a: Optional[np.ndarray] = None


def solve_linear_bsde(lin: LinearDriver, zeta: np.ndarray, paths: PathSet,
                      basis: RegressionBasis, picard_iters: int = 3,
                      start_node: int = 0,
                      cache: Optional[NodeRegressionCache] = None) -> BsdeSolution:
    """Backward LSMC for U_t = zeta + int (l + H.V + A) ds - int V dW.

    Runs on the sub-grid [start_node, N]; U and V are zero-filled before
    start_node (used by Malliavin slices, which vanish before theta).
    """
    if picard_iters < 1:
        raise ShapeMismatch("picard_iters must be >= 1")
    m, steps = paths.n_paths, paths.grid.n_steps
    d = paths.dim_w
    dt = paths.grid.dt
    if not 0 <= start_node <= steps:
        raise ShapeMismatch(f"start_node {start_node} outside [0, {steps}]")
    zeta = np.asarray(zeta, dtype=float).reshape(-1)
    if zeta.shape[0] != m:
        raise ShapeMismatch("zeta length differs from path count")
    if not np.isfinite(zeta).all():
        raise Blowup("non-finite terminal data zeta")
    for name, arr, tail in (("h", lin.h, (d,)), ("a", lin.a, ())):
        if arr is not None:
            want = (m, steps + 1) + tail
            if arr.shape != want:
                raise ShapeMismatch(f"driver array {name} shaped {arr.shape}, "
                                    f"expected {want}")
            if not np.isfinite(arr).all():
                raise ShapeMismatch(f"driver array {name} has non-finite entries")
    if cache is None:
        cache = NodeRegressionCache(paths, basis)
    cap = 1e6 * (float(np.abs(zeta).max()) + 1.0)

    u = np.zeros((m, steps + 1))
    v = np.zeros((m, steps + 1, d))
    u[:, steps] = zeta
    fit_resid = np.zeros(steps)
    defect_mean = np.zeros(steps)
    defect_rms = np.zeros(steps)

    for k in range(steps - 1, start_node - 1, -1):
        reg = cache.at(k)
        dw = paths.increments[:, k]
        u_next = u[:, k + 1]
        mean_fit = reg.fit(u_next)
        increment = u_next - mean_fit
        v[:, k] = reg.fit(increment[:, None] * dw / dt)
        _finite_or_blowup(v[:, k], "V", k)
        t_k = float(paths.grid.nodes[k])
        drift = np.zeros(m)
        if lin.h is not None:
            drift += np.einsum("md,md->m", lin.h[:, k], v[:, k])
        if lin.a is not None:
            drift += lin.a[:, k]
        uk = mean_fit
        for _ in range(picard_iters):
            extra = lin.l(k, t_k, uk, v[:, k]) if lin.l is not None else 0.0
            uk = mean_fit + (extra + drift) * dt
        _finite_or_blowup(uk, "U", k)
        if np.abs(uk).max() > cap:
            raise Blowup(f"|U| exceeded {cap:.3g} at node {k}")
        u[:, k] = uk
        final_l = lin.l(k, t_k, uk, v[:, k]) if lin.l is not None else 0.0
        defect = (uk - u_next - (final_l + drift) * dt
                  + np.einsum("md,md->m", v[:, k], dw))
        fit_resid[k] = float(np.sqrt(np.mean(increment ** 2)))
        defect_mean[k] = float(np.mean(np.abs(defect)))
        defect_rms[k] = float(np.sqrt(np.mean(defect ** 2)))
    if start_node < steps:
        v[:, steps] = v[:, steps - 1]
    diagnostics = {
        "fit_residual_rms": fit_resid,
        "defect_mean_abs": defect_mean,
        "defect_rms": defect_rms,
    }
    return BsdeSolution(y=u, z=v, grid=paths.grid, basis=basis,
                        truncation=Truncation(None), diagnostics=diagnostics,
                        start_node=start_node)
