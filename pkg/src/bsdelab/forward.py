"""Forward SDE and first-variation (tangent) simulation.

Euler scheme for X and the linearization of the same scheme for the tangent
J = dX/dx0, so finite differences of discrete paths converge to J exactly as
h -> 0.  Brownian increments come from counter-based per-path streams keyed
by (seed, path): the arrays are bit-identical no matter how work is split.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.random import Generator, Philox

from .errors import NonFiniteState, ShapeMismatch
from .model import ExperimentConfig, SdeModel, TimeGrid


@dataclass(frozen=True)
class PathSet:
    """Monte Carlo bundle: increments, states and tangents on one grid."""

    increments: np.ndarray  # (M, N, d), Gaussian with variance dt
    states: np.ndarray      # (M, N+1, n)
    tangents: np.ndarray    # (M, N+1, n, n)
    grid: TimeGrid
    seed: int
    x0: np.ndarray

    @property
    def n_paths(self) -> int:
        return self.states.shape[0]

    @property
    def dim_x(self) -> int:
        return self.states.shape[2]

    @property
    def dim_w(self) -> int:
        return self.increments.shape[2]


def simulate_brownian(seed: int, n_paths: int, grid: TimeGrid,
                      dim_w: int) -> np.ndarray:
    """Brownian increments (n_paths, N, dim_w) with variance dt.

    Path p draws from a Philox stream keyed by (seed, p); the output is a
    pure function of (seed, n_paths, grid, dim_w), independent of scheduling.
    """
    if n_paths < 1:
        raise ShapeMismatch("need at least one path")
    if int(seed) < 0:
        raise ShapeMismatch("seed must be a non-negative integer")
    n_steps = grid.n_steps
    sq_dt = np.sqrt(grid.dt)
    out = np.empty((n_paths, n_steps, dim_w))
    base = int(seed) << 64
    for p in range(n_paths):
        gen = Generator(Philox(key=base + p))
        out[p] = gen.standard_normal((n_steps, dim_w))
    out *= sq_dt
    return out


def simulate_sde(model: SdeModel, x0: np.ndarray, grid: TimeGrid,
                 increments: np.ndarray, seed: int = -1) -> PathSet:
    """Euler scheme for X and its tangent J (J[.,0] = identity).

    X[p,k+1] = X[p,k] + b dt + sigma dW[p,k]
    J[p,k+1] = J[p,k] + (jac_b J) dt + sum_i (jac_sigma[:,i,:] J) dW_i[p,k]
    """
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    n, d = model.dim_x, model.dim_w
    increments = np.asarray(increments, dtype=float)
    if increments.ndim != 3 or increments.shape[1] != grid.n_steps \
            or increments.shape[2] != d:
        raise ShapeMismatch(
            f"increments shaped {increments.shape}, expected "
            f"(paths, {grid.n_steps}, {d})")
    if x0.shape != (n,):
        raise ShapeMismatch(f"x0 shaped {x0.shape}, model dim_x is {n}")
    m = increments.shape[0]
    n_steps = grid.n_steps
    dt = grid.dt

    states = np.empty((m, n_steps + 1, n))
    tangents = np.empty((m, n_steps + 1, n, n))
    states[:, 0] = x0
    tangents[:, 0] = np.eye(n)

    for k in range(n_steps):
        t_k = float(grid.nodes[k])
        xk = states[:, k]
        jk = tangents[:, k]
        dw = increments[:, k]
        bv = np.asarray(model.b(t_k, xk), dtype=float)
        sv = np.asarray(model.sigma(t_k, xk), dtype=float)
        states[:, k + 1] = xk + bv * dt + np.einsum("mnd,md->mn", sv, dw)
        jb = np.asarray(model.jac_b(t_k, xk), dtype=float)
        js = np.asarray(model.jac_sigma(t_k, xk), dtype=float)
        tangents[:, k + 1] = (
            jk
            + np.einsum("mab,mbc->mac", jb, jk) * dt
            + np.einsum("maib,mbc,mi->mac", js, jk, dw)
        )
        if not np.isfinite(states[:, k + 1]).all():
            bad = np.argwhere(~np.isfinite(states[:, k + 1]))
            p_bad = int(bad[0, 0])
            raise NonFiniteState(
                f"non-finite state at path {p_bad}, node {k + 1}")
        if not np.isfinite(tangents[:, k + 1]).all():
            bad = np.argwhere(~np.isfinite(tangents[:, k + 1]))
            raise NonFiniteState(
                f"non-finite tangent at path {int(bad[0, 0])}, node {k + 1}")
    return PathSet(increments=increments, states=states, tangents=tangents,
                   grid=grid, seed=int(seed), x0=x0)


def simulate(config: ExperimentConfig) -> PathSet:
    """Brownian draw plus forward simulation for one config."""
    increments = simulate_brownian(config.seed, config.n_paths, config.grid,
                                   config.model.dim_w)
    return simulate_sde(config.model, config.x0, config.grid, increments,
                        seed=config.seed)


def shift_initial(config: ExperimentConfig, axis: int, h: float,
                  increments: np.ndarray | None = None) -> PathSet:
    """PathSet started at x0 + h e_axis, driven by the SAME increments.

    `axis` is zero-based.  Passing the base run's increments avoids a
    redraw; omitted, they are regenerated from the config seed (identical
    by the determinism contract).
    """
    if h == 0:
        raise ShapeMismatch("shift step h must be nonzero")
    if not 0 <= axis < config.model.dim_x:
        raise ShapeMismatch(f"axis {axis} out of range for dim {config.model.dim_x}")
    if increments is None:
        increments = simulate_brownian(config.seed, config.n_paths,
                                       config.grid, config.model.dim_w)
    x0 = config.x0.copy()
    x0[axis] += h
    return simulate_sde(config.model, x0, config.grid, increments,
                        seed=config.seed)
