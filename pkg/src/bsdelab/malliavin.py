"""Malliavin derivatives of the forward flow and of (Y, Z), two routes.

Route one solves, for each perturbation node theta, the linear BSDE whose
terminal data is grad g(X_T) . D_theta X_T on the sub-grid [theta, T].
Route two computes no new regression at all: D_theta Y_t = grad Y_t .
J_theta^{-1} sigma(theta, X_theta) via the variational solution and the
flow property of the tangent process.  trace_check compares the diagonal
D_k Y_k against Z_k, which is the representation the whole construction
is meant to certify.

Scalar noise only (dim_w == 1); the derivative index w.r.t. the Brownian
component is dropped throughout.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .bsde import (BsdeSolution, LinearDriver, NodeRegressionCache,
                   RegressionBasis, Truncation, solve_linear_bsde)
from .errors import (ConfigError, MissingDiagonal, ShapeMismatch,
                     SingularVariation)
from .forward import PathSet
from .model import QuadraticGenerator, SdeModel, TerminalCondition
from .sensitivity import VariationalSolution, linearized_coefficients

_DET_FLOOR = 1e-10


def _require_scalar_noise(paths: PathSet):
    if paths.dim_w != 1:
        raise ShapeMismatch("Malliavin routines support dim_w == 1 only")


def _theta_core(paths: PathSet, model: SdeModel, theta: int) -> np.ndarray:
    """J_theta^{-1} sigma(t_theta, X_theta) per path, shape (M, n).

    Raises SingularVariation when any tangent matrix at theta is
    numerically singular (|det| below 1e-10).
    """
    steps = paths.grid.n_steps
    if not 0 <= theta <= steps:
        raise ShapeMismatch(f"theta={theta} outside grid nodes 0..{steps}")
    j_theta = paths.tangents[:, theta]
    dets = np.linalg.det(j_theta)
    bad = np.flatnonzero(np.abs(dets) < _DET_FLOOR)
    if bad.size:
        raise SingularVariation(
            f"tangent matrix singular at node {theta} on path {int(bad[0])} "
            f"(|det|={abs(dets[bad[0]]):.3e})")
    t_theta = float(paths.grid.nodes[theta])
    sig = model.sigma(t_theta, paths.states[:, theta])  # (M, n, 1)
    return np.linalg.solve(j_theta, sig[:, :, :1])[:, :, 0]


def dtheta_forward(paths: PathSet, model: SdeModel, theta: int) -> np.ndarray:
    """D_theta X along the grid: J_k J_theta^{-1} sigma(theta) for k >= theta.

    Returns (M, N+1, n), identically zero strictly before theta.
    """
    _require_scalar_noise(paths)
    core = _theta_core(paths, model, theta)
    steps = paths.grid.n_steps
    dx = np.zeros((paths.n_paths, steps + 1, paths.dim_x))
    for k in range(theta, steps + 1):
        dx[:, k] = np.einsum("mab,mb->ma", paths.tangents[:, k], core)
    return dx


@dataclass
class MalliavinDerivative:
    """D_theta(X, Y, Z) on a set of grid nodes theta.

    dx: (M, T, N+1, n), dy: (M, T, N+1), dz: (M, T, N+1, d) where T indexes
    theta_nodes; entries at nodes strictly before theta are zero.  dz from
    the representation route is an almost-everywhere object and is not a
    convergence target; advisory_dz marks it.
    """

    theta_nodes: tuple
    dx: np.ndarray
    dy: np.ndarray
    dz: np.ndarray
    source: str
    advisory_dz: bool = False

    def diagonal(self) -> np.ndarray:
        """D_theta Y_theta per path and theta node, shape (M, T)."""
        return np.stack([self.dy[:, j, th]
                         for j, th in enumerate(self.theta_nodes)], axis=1)


def solve_malliavin_bsde(base: BsdeSolution, dx_slice: np.ndarray,
                         gen: QuadraticGenerator, term: TerminalCondition,
                         basis: RegressionBasis, theta: int, paths: PathSet,
                         picard_iters: int = 3,
                         trunc: Optional[Truncation] = None,
                         cache: Optional[NodeRegressionCache] = None):
    """Solve the derivative BSDE on [theta, T] for one perturbation node.

    Terminal data grad g(X_T) . D_theta X_T, source dl_dx . D_theta X,
    driver linearized on the base.  Returns (dy, dz) arrays over the full
    grid, zero before theta.
    """
    _require_scalar_noise(paths)
    if term.kind != "map":
        raise ConfigError("derivative terminal data needs kind='map'")
    steps = paths.grid.n_steps
    if dx_slice.shape != (paths.n_paths, steps + 1, paths.dim_x):
        raise ShapeMismatch(f"dx_slice shape {dx_slice.shape} does not match paths")
    l_part, h, dlx = linearized_coefficients(base, paths, gen, trunc=trunc)
    zeta = np.einsum("mn,mn->m", term.grad_g(paths.states[:, -1]),
                     dx_slice[:, -1])
    a = np.zeros((paths.n_paths, steps + 1))
    for k in range(theta, steps):
        a[:, k] = np.einsum("mn,mn->m", dlx[:, k], dx_slice[:, k])
    lin = LinearDriver(l=l_part, h=h, a=a)
    sol = solve_linear_bsde(lin, zeta, paths, basis,
                            picard_iters=picard_iters, start_node=theta,
                            cache=cache)
    return sol.y, sol.z


def malliavin_derivative(base: BsdeSolution, paths: PathSet, model: SdeModel,
                         gen: QuadraticGenerator, term: TerminalCondition,
                         basis: RegressionBasis,
                         theta_nodes: Sequence[int],
                         picard_iters: int = 3,
                         trunc: Optional[Truncation] = None
                         ) -> MalliavinDerivative:
    """BSDE-route Malliavin derivative over several perturbation nodes."""
    _require_scalar_noise(paths)
    theta_nodes = tuple(int(t) for t in theta_nodes)
    if not theta_nodes:
        raise ShapeMismatch("theta_nodes must be nonempty")
    m, steps = paths.n_paths, paths.grid.n_steps
    cache = NodeRegressionCache(paths, basis)
    dx = np.zeros((m, len(theta_nodes), steps + 1, paths.dim_x))
    dy = np.zeros((m, len(theta_nodes), steps + 1))
    dz = np.zeros((m, len(theta_nodes), steps + 1, paths.dim_w))
    for j, theta in enumerate(theta_nodes):
        dx_slice = dtheta_forward(paths, model, theta)
        dx[:, j] = dx_slice
        dy[:, j], dz[:, j] = solve_malliavin_bsde(
            base, dx_slice, gen, term, basis, theta, paths,
            picard_iters=picard_iters, trunc=trunc, cache=cache)
    return MalliavinDerivative(theta_nodes=theta_nodes, dx=dx, dy=dy, dz=dz,
                               source="bsde")


def representation_from_variational(varsol: VariationalSolution,
                                    paths: PathSet, model: SdeModel,
                                    theta_nodes: Sequence[int]
                                    ) -> MalliavinDerivative:
    """Regression-free route: D_theta Y = grad Y . J_theta^{-1} sigma(theta).

    Reuses the variational solution; no new conditional expectations are
    fit.  The dz field is produced the same way but only has
    almost-everywhere meaning, hence advisory_dz=True.
    """
    _require_scalar_noise(paths)
    theta_nodes = tuple(int(t) for t in theta_nodes)
    if not theta_nodes:
        raise ShapeMismatch("theta_nodes must be nonempty")
    m, steps = paths.n_paths, paths.grid.n_steps
    dx = np.zeros((m, len(theta_nodes), steps + 1, paths.dim_x))
    dy = np.zeros((m, len(theta_nodes), steps + 1))
    dz = np.zeros((m, len(theta_nodes), steps + 1, paths.dim_w))
    for j, theta in enumerate(theta_nodes):
        core = _theta_core(paths, model, theta)  # (M, n)
        for k in range(theta, steps + 1):
            dx[:, j, k] = np.einsum("mab,mb->ma", paths.tangents[:, k], core)
            dy[:, j, k] = np.einsum("mn,mn->m", varsol.grad_y[:, k], core)
            dz[:, j, k] = np.einsum("mdn,mn->md", varsol.grad_z[:, k], core)
    return MalliavinDerivative(theta_nodes=theta_nodes, dx=dx, dy=dy, dz=dz,
                               source="representation", advisory_dz=True)


@dataclass
class TraceReport:
    """Node-by-node comparison of Z_k against the diagonal D_k Y_k."""

    theta_nodes: tuple
    per_node: np.ndarray      # relative L2 error per theta node
    aggregate: float          # average over nodes
    z_node_max: np.ndarray    # sample max |Z| at each theta node
    dxi_bound: Optional[float]
    flagged_nodes: tuple      # nodes where max |Z| exceeds bound + slack


def trace_check(sol: BsdeSolution, mall: MalliavinDerivative,
                floor: float = 1e-8, dxi_bound: Optional[float] = None,
                slack: float = 0.0) -> TraceReport:
    """Relative L2 distance between Z and the Malliavin diagonal.

    per_node[j] = ||Z_theta - D_theta Y_theta|| / (||Z_theta|| + floor) in
    the sample L2 norm; aggregate averages over theta nodes.  When
    dxi_bound is given, nodes whose sample max |Z| exceeds bound + slack
    are flagged (the bound is the declared Lipschitz/derivative bound of
    the terminal map, which |Z| should respect up to estimation noise).
    """
    if not mall.theta_nodes:
        raise MissingDiagonal("no theta nodes to compare on the diagonal")
    if sol.z.shape[2] != 1:
        raise ShapeMismatch("trace check supports dim_w == 1 only")
    per_node = np.zeros(len(mall.theta_nodes))
    z_node_max = np.zeros(len(mall.theta_nodes))
    flagged = []
    for j, theta in enumerate(mall.theta_nodes):
        z_k = sol.z[:, theta, 0]
        d_k = mall.dy[:, j, theta]
        num = float(np.sqrt(np.mean((z_k - d_k) ** 2)))
        den = float(np.sqrt(np.mean(z_k ** 2)))
        per_node[j] = num / (den + floor)
        z_node_max[j] = float(np.abs(z_k).max())
        if dxi_bound is not None and z_node_max[j] > dxi_bound + slack:
            flagged.append(int(theta))
    return TraceReport(theta_nodes=mall.theta_nodes, per_node=per_node,
                       aggregate=float(per_node.mean()),
                       z_node_max=z_node_max, dxi_bound=dxi_bound,
                       flagged_nodes=tuple(flagged))
