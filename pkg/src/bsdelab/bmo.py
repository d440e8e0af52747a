"""BMO-energy estimation, the reverse-Holder function, and change of measure.

The chain: estimate the conditional tail energy of Z (a grid-time lower
bound for the BMO2 norm), find the largest r whose reverse-Holder value
Psi(r) clears 2*alpha*D, convert to the conjugate q, and feed q into the
moment-bound ratio diagnostic.  Girsanov weights exp(int H dW - 1/2 int
|H|^2 dt) supply the unit-mass check for the measure change at H = 2*alpha*Z.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .bsde import BsdeSolution, RegressionBasis, condexp_regress
from .errors import DomainError, OverflowInExponent, ShapeMismatch
from .forward import PathSet

_EXP_CAP = 700.0
# smallest r-1 offset probed; Psi(1 + 1e-320) ~ 26.3 is the float64 ceiling
_U_MIN = 1e-320


def _psi_from_offset(u):
    """Psi(1 + u) computed from the offset u = x - 1 > 0.

    Writing the log argument as (1 + 2u)/(2u) keeps the evaluation exact
    for offsets far below machine epsilon, where 1 + u rounds to 1.
    """
    u = np.asarray(u, dtype=float)
    val = np.log1p(2.0 * u) - np.log(2.0 * u)
    return np.sqrt(1.0 + val / (1.0 + u) ** 2) - 1.0


def psi(x):
    """Reverse-Holder function sqrt(1 + log((2x-1)/(2(x-1)))/x^2) - 1.

    Strictly decreasing on (1, inf), blowing up at 1+ and vanishing at
    infinity.  Scalar in, scalar out; arrays elementwise.
    """
    arr = np.asarray(x, dtype=float)
    if np.any(arr <= 1.0):
        raise DomainError("psi is defined for x > 1 only")
    out = _psi_from_offset(arr - 1.0)
    return float(out) if np.isscalar(x) or arr.ndim == 0 else out


@dataclass
class BmoEstimate:
    """Grid-time conditional tail energies of Z and their sup norm.

    energies[p, k] is the fitted E[sum_{j>=k} |Z_j|^2 dt | X_k] per path;
    node_sup[k] the 99.9th percentile over paths (damps regression
    outliers); d_value = max_k sqrt(node_sup[k]).  A lower bound for the
    stopping-time BMO2 norm, since only grid times are probed.
    """

    d_value: float
    energies: np.ndarray
    node_sup: np.ndarray
    argmax_node: int
    n_clipped: int


def estimate_bmo2(z: Union[np.ndarray, BsdeSolution], paths: PathSet,
                  basis: RegressionBasis,
                  percentile: float = 99.9) -> BmoEstimate:
    """Estimate the BMO2 energy of int Z dW over grid times.

    Regresses the tail quadrature sum_{j>=k} |Z_j|^2 dt on the state basis
    at every node; negative fitted energies are clipped to zero with a
    warning (regression tolerance).
    """
    if isinstance(z, BsdeSolution):
        z = z.z
    if not np.all(np.isfinite(z)):
        raise ShapeMismatch("Z contains non-finite entries")
    m, steps = paths.n_paths, paths.grid.n_steps
    if z.shape[0] != m or z.shape[1] != steps + 1:
        raise ShapeMismatch(f"Z shape {z.shape} does not match paths")
    dt = paths.grid.dt
    sq = np.sum(z[:, :steps] ** 2, axis=2) * dt          # (M, N)
    tails = np.flip(np.cumsum(np.flip(sq, axis=1), axis=1), axis=1)
    energies = np.empty((m, steps))
    n_clipped = 0
    for k in range(steps):
        fitted = condexp_regress(tails[:, k], paths.states[:, k], basis)
        neg = fitted < 0
        n_clipped += int(neg.sum())
        energies[:, k] = np.where(neg, 0.0, fitted)
    if n_clipped:
        warnings.warn(f"clipped {n_clipped} negative fitted tail energies "
                      "to zero", RuntimeWarning, stacklevel=2)
    node_sup = np.percentile(energies, percentile, axis=0)
    argmax = int(np.argmax(node_sup))
    d_value = float(np.sqrt(max(node_sup[argmax], 0.0)))
    return BmoEstimate(d_value=d_value, energies=energies, node_sup=node_sup,
                       argmax_node=argmax, n_clipped=n_clipped)


@dataclass(frozen=True)
class HolderExponents:
    """Feasible reverse-Holder exponent r and its conjugate q = r/(r-1).

    r_minus_one carries the exact offset: for large thresholds the
    feasible r sits closer to 1 than machine epsilon, in which case the
    rounded field r equals 1.0 while r_minus_one stays positive and q,
    slack remain meaningful.
    """

    r: float
    q: float
    slack: float
    r_minus_one: float
    threshold: float
    capped: bool


def find_r(alpha: float, d_value: float, r_cap: float = 2.0) -> HolderExponents:
    """Largest r <= r_cap with Psi(r) > 2*alpha*D, bisected to 1e-8.

    Psi decreases, so feasibility of r_cap means r_cap itself is returned
    (capped=True).  Otherwise bisection runs on log(r - 1), which resolves
    the root even when it is far below machine epsilon away from 1; the
    feasible endpoint is returned, so slack > 0 always (Psi blows up at
    1+, hence a feasible r always exists down to float underflow).
    """
    if alpha < 0 or d_value < 0:
        raise DomainError("alpha and D must be >= 0")
    if r_cap <= 1.0:
        raise DomainError("r_cap must exceed 1")
    threshold = 2.0 * alpha * d_value
    if not np.isfinite(threshold):
        raise DomainError("threshold 2*alpha*D must be finite")
    u_cap = r_cap - 1.0

    def feasible(u):
        return float(_psi_from_offset(u)) > threshold

    if threshold <= 0.0 or feasible(u_cap):
        u = u_cap
        capped = True
    else:
        lo_t, hi_t = np.log(_U_MIN), np.log(u_cap)
        if not feasible(_U_MIN):
            # beyond the float64 ceiling of Psi; saturate at the smallest
            # probe and report the (non-positive) slack honestly
            u = _U_MIN
            capped = False
        else:
            while (np.exp(hi_t) - np.exp(lo_t) > 1e-8
                   and hi_t - lo_t > 1e-12):
                mid = 0.5 * (lo_t + hi_t)
                if feasible(np.exp(mid)):
                    lo_t = mid
                else:
                    hi_t = mid
            u = float(np.exp(lo_t))
            capped = False
    slack = float(_psi_from_offset(u)) - threshold
    return HolderExponents(r=1.0 + u, q=(1.0 + u) / u, slack=slack,
                           r_minus_one=u, threshold=threshold, capped=capped)


@dataclass
class GirsanovReport:
    """Stochastic-exponential weights and their unit-mass diagnostics."""

    weights: np.ndarray
    mean: float
    se: float
    variance: float
    variance_se: float
    log_max: float


def girsanov_weights(h: np.ndarray, paths: PathSet) -> GirsanovReport:
    """Per-path weights exp(sum H.dW - 1/2 sum |H|^2 dt).

    Accepts H over nodes (M, N+1, d), terminal row unused, or aligned
    with increments (M, N, d).  The sample mean and its standard error
    give the unit-mass check; variance and its (fourth-moment) standard
    error support lognormal comparisons.
    """
    m, steps = paths.n_paths, paths.grid.n_steps
    d = paths.dim_w
    if h.shape == (m, steps + 1, d):
        h = h[:, :steps]
    elif h.shape != (m, steps, d):
        raise ShapeMismatch(f"H shape {h.shape} does not match paths")
    if not np.all(np.isfinite(h)):
        raise ShapeMismatch("H contains non-finite entries")
    dt = paths.grid.dt
    log_w = (np.einsum("mkd,mkd->m", h, paths.increments)
             - 0.5 * np.sum(h ** 2, axis=(1, 2)) * dt)
    log_max = float(log_w.max())
    if log_max > _EXP_CAP:
        raise OverflowInExponent(
            f"max log-weight {log_max:.1f} exceeds {_EXP_CAP:.0f}")
    w = np.exp(log_w)
    mean = float(w.mean())
    se = float(w.std(ddof=1) / np.sqrt(m)) if m > 1 else 0.0
    var = float(w.var(ddof=1)) if m > 1 else 0.0
    m4 = float(np.mean((w - mean) ** 4))
    var_se = float(np.sqrt(max(m4 - var ** 2, 0.0) / m)) if m > 1 else 0.0
    return GirsanovReport(weights=w, mean=mean, se=se, variance=var,
                          variance_se=var_se, log_max=log_max)


@dataclass
class MomentReport:
    """Sample moment-bound ratio LHS / RHS at conjugate exponent q."""

    lhs: float
    rhs: float
    ratio: float
    p: float
    q: float
    beta: float
    passed: bool


def _log_mean_power(values: np.ndarray, exponent: float) -> float:
    """log of mean(|values|^exponent), stable for huge exponents."""
    with np.errstate(divide="ignore"):
        logs = exponent * np.log(np.abs(values))
    top = logs.max()
    if top == -np.inf:
        return -np.inf
    return float(top + np.log(np.mean(np.exp(logs - top))))


def moment_bound_diagnostic(sol, exponents: HolderExponents, p: float = 1.0,
                            zeta: Optional[np.ndarray] = None,
                            a: Optional[np.ndarray] = None,
                            lipschitz_bound: float = 0.0) -> MomentReport:
    """Sample check of the a-priori moment estimate at exponent p.

    LHS = E[sup|U|^{2p}] + E[(int |V|^2 dt)^p]; RHS = (E[|zeta|^{2pq^2}
    + (int |A| dt)^{2pq^2}])^{1/q^2} evaluated in log space so that the
    inflated exponent 2pq^2 does not overflow.  sol may be one solution
    (U, V read off directly) or a pair whose difference is diagnosed.
    PASS means the ratio is finite; 0/0 counts as a vacuous pass.  beta
    echoes the discount constant M^2 + 2M of the underlying estimate.
    """
    if isinstance(sol, (tuple, list)):
        one, two = sol
        u, v = one.y - two.y, one.z - two.z
        grid = one.grid
        if zeta is None:
            zeta = u[:, -1]
    else:
        u, v = sol.y, sol.z
        grid = sol.grid
        if zeta is None:
            zeta = sol.y[:, -1]
    if p <= 0:
        raise DomainError("p must be positive")
    dt = grid.dt
    steps = grid.n_steps
    sup_u = np.abs(u).max(axis=1)
    int_v = np.sum(v[:, :steps] ** 2, axis=(1, 2)) * dt
    lhs = float(np.mean(sup_u ** (2 * p)) + np.mean(int_v ** p))

    q = exponents.q
    e = 2.0 * p * q * q
    log_a = _log_mean_power(np.asarray(zeta, dtype=float), e)
    if a is not None:
        int_a = np.sum(np.abs(a[:, :steps]), axis=1) * dt
        log_b = _log_mean_power(int_a, e)
    else:
        log_b = -np.inf
    if log_a == -np.inf and log_b == -np.inf:
        rhs = 0.0
    else:
        top = max(log_a, log_b)
        log_sum = top + np.log(np.exp(log_a - top) + np.exp(log_b - top))
        rhs = float(np.exp(log_sum / (q * q)))

    if lhs == 0.0 and rhs == 0.0:
        ratio = 0.0
    elif rhs == 0.0:
        ratio = float("inf")
    else:
        ratio = lhs / rhs
    beta = lipschitz_bound ** 2 + 2.0 * lipschitz_bound
    return MomentReport(lhs=lhs, rhs=rhs, ratio=ratio, p=p, q=q, beta=beta,
                        passed=bool(np.isfinite(ratio)))
