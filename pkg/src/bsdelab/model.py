"""Model primitives: time grid, SDE coefficients, driver, terminal data.

Coefficient callables are vectorized over paths: with M paths and state
dimension n they map (t: float, x: (M, n)) to

    b        -> (M, n)
    sigma    -> (M, n, d)
    jac_b    -> (M, n, n)        jac_b[p, i, j]      = d b_i / d x_j
    jac_sigma-> (M, n, d, n)     jac_sigma[p, i, j, k] = d sigma_ij / d x_k

Driver callables take (t: float, x: (M, n), y: (M,), z: (M, d)).
Scalar (n = d = 1) fixtures are built from expression strings via the
`scalar_*` constructors, which keeps fixture definitions printable.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .coeffs import compile_expr
from .errors import BadGrid, ConfigError, NonFiniteCoefficient


@dataclass(frozen=True)
class TimeGrid:
    """Uniform partition of [0, T] into N steps (N+1 nodes)."""

    nodes: np.ndarray

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=float)
        object.__setattr__(self, "nodes", nodes)
        if nodes.ndim != 1 or nodes.size < 3:
            raise BadGrid("grid needs at least 3 nodes (N >= 2)")
        if nodes[0] != 0.0:
            raise BadGrid("grid must start at t = 0")
        diffs = np.diff(nodes)
        if not (diffs > 0).all():
            raise BadGrid("grid nodes must be strictly increasing")
        horizon = nodes[-1]
        if horizon <= 0:
            raise BadGrid("horizon must be positive")
        # uniform spacing only (v1)
        if np.abs(diffs - horizon / (nodes.size - 1)).max() > 1e-12 * horizon:
            raise BadGrid("non-uniform grids are not supported")

    @property
    def horizon(self) -> float:
        return float(self.nodes[-1])

    @property
    def n_steps(self) -> int:
        return self.nodes.size - 1

    @property
    def dt(self) -> float:
        return self.horizon / self.n_steps


def build_grid(horizon: float, steps: int) -> TimeGrid:
    """Return the uniform grid with node[k] = k * horizon / steps."""
    if horizon <= 0:
        raise BadGrid(f"horizon must be positive, got {horizon}")
    if steps < 2:
        raise BadGrid(f"need at least 2 steps, got {steps}")
    k = np.arange(steps + 1, dtype=float)
    return TimeGrid(nodes=k * (horizon / steps))


@dataclass(frozen=True)
class SdeModel:
    """Forward SDE coefficients with their state Jacobians."""

    dim_x: int
    dim_w: int
    b: Callable
    sigma: Callable
    jac_b: Callable
    jac_sigma: Callable
    lipschitz_bound: float


@dataclass(frozen=True)
class QuadraticGenerator:
    """Driver f(t,x,y,z) = l(t,x,y,z) + alpha * g_n(z).

    `l` is the globally Lipschitz part with partials dl_dx (M,n),
    dl_dy (M,), dl_dz (M,d); `alpha` scales the quadratic term, evaluated
    through the truncation family g_n (n = truncation_level, None for the
    plain |z|^2).
    """

    l: Callable
    dl_dx: Callable
    dl_dy: Callable
    dl_dz: Callable
    alpha: float
    lipschitz_bound: float
    truncation_level: Optional[float] = None


@dataclass(frozen=True)
class TerminalCondition:
    """Terminal data: either a function g of X_T or a direct sampler.

    kind "map": g(x: (M,n)) -> (M,), grad_g -> (M,n).
    kind "sampler": sampler(paths) -> (M,), grad_sampler(paths) -> (M,n)
    (grad_sampler optional; required only by sensitivity runs).
    """

    kind: str
    g: Optional[Callable] = None
    grad_g: Optional[Callable] = None
    sampler: Optional[Callable] = None
    grad_sampler: Optional[Callable] = None
    bound: Optional[float] = None

    def __post_init__(self):
        if self.kind not in ("map", "sampler"):
            raise ConfigError(f"unknown terminal kind {self.kind!r}")
        if self.kind == "map" and (self.g is None or self.grad_g is None):
            raise ConfigError("terminal kind 'map' needs g and grad_g")
        if self.kind == "sampler" and self.sampler is None:
            raise ConfigError("terminal kind 'sampler' needs a sampler")

    def evaluate(self, paths) -> np.ndarray:
        """Per-path terminal values xi."""
        if self.kind == "map":
            return np.asarray(self.g(paths.states[:, -1]), dtype=float).reshape(-1)
        return np.asarray(self.sampler(paths), dtype=float).reshape(-1)

    def gradient(self, paths) -> np.ndarray:
        """Per-path d xi / d x0: grad_g(X_T) contracted with the tangent J_T."""
        m = paths.states.shape[0]
        n = paths.states.shape[2]
        if self.kind == "map":
            gg = np.asarray(self.grad_g(paths.states[:, -1]), dtype=float)
            gg = gg.reshape(m, n)
            # (grad g)^T J_T, one row per path
            return np.einsum("mi,mij->mj", gg, paths.tangents[:, -1])
        if self.grad_sampler is None:
            raise ConfigError("terminal sampler has no gradient sampler")
        return np.asarray(self.grad_sampler(paths), dtype=float).reshape(m, n)


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a run needs: model triple, grid, sampling and solver knobs."""

    model: SdeModel
    generator: QuadraticGenerator
    terminal: TerminalCondition
    grid: TimeGrid
    n_paths: int
    seed: int
    x0: np.ndarray
    basis_degree: int = 3
    picard_iters: int = 3
    fd_steps: tuple = (1e-1, 1e-2, 1e-3)
    fixture: Optional[str] = None
    output_dir: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "x0", np.atleast_1d(np.asarray(self.x0, dtype=float)))
        if self.n_paths < 100:
            raise ConfigError(f"need at least 100 paths, got {self.n_paths}")
        if self.basis_degree < 0:
            raise ConfigError("basis degree must be >= 0")
        if self.picard_iters < 1:
            raise ConfigError("need at least one Picard iteration")
        if int(self.seed) < 0:
            raise ConfigError("seed must be a non-negative integer")
        if self.x0.shape != (self.model.dim_x,):
            raise ConfigError(
                f"x0 has shape {self.x0.shape}, model dim_x is {self.model.dim_x}"
            )
        if any(h == 0 for h in self.fd_steps):
            raise ConfigError("finite-difference steps must be nonzero")


# ---------------------------------------------------------------------------
# scalar (n = d = 1) constructors from expression strings


def _vectorize_scalar(fn, out_shape_tail):
    """Wrap an expression callable of (t, x-scalar) into the (M,n)-array form."""

    def wrapped(t, x):
        x = np.asarray(x, dtype=float)
        m = x.shape[0]
        val = np.asarray(fn(t=t, x=x[:, 0]), dtype=float)
        out = np.empty((m,) + out_shape_tail)
        out[...] = val.reshape((m,) + (1,) * len(out_shape_tail)) if val.ndim else val
        return out

    return wrapped


def scalar_sde(b: str, sigma: str, jac_b: str, jac_sigma: str,
               lipschitz_bound: float) -> SdeModel:
    """Build a 1-dimensional SdeModel from expression strings in (t, x)."""
    fb = compile_expr(b, ("t", "x"))
    fs = compile_expr(sigma, ("t", "x"))
    fjb = compile_expr(jac_b, ("t", "x"))
    fjs = compile_expr(jac_sigma, ("t", "x"))
    return SdeModel(
        dim_x=1,
        dim_w=1,
        b=_vectorize_scalar(fb, (1,)),
        sigma=_vectorize_scalar(fs, (1, 1)),
        jac_b=_vectorize_scalar(fjb, (1, 1)),
        jac_sigma=_vectorize_scalar(fjs, (1, 1, 1)),
        lipschitz_bound=float(lipschitz_bound),
    )


def scalar_generator(l: str, dl_dx: str, dl_dy: str, dl_dz: str, alpha: float,
                     lipschitz_bound: float,
                     truncation_level: Optional[float] = None) -> QuadraticGenerator:
    """Build a 1-dimensional QuadraticGenerator from expressions in (t,x,y,z)."""
    variables = ("t", "x", "y", "z")
    fl = compile_expr(l, variables)
    fx = compile_expr(dl_dx, variables)
    fy = compile_expr(dl_dy, variables)
    fz = compile_expr(dl_dz, variables)

    def along_paths(fn, tail):
        def wrapped(t, x, y, z):
            x = np.asarray(x, dtype=float)
            m = x.shape[0]
            val = np.asarray(
                fn(t=t, x=x[:, 0], y=np.asarray(y, float).reshape(-1),
                   z=np.asarray(z, float).reshape(m, -1)[:, 0]),
                dtype=float,
            )
            out = np.empty((m,) + tail)
            out[...] = val.reshape((m,) + (1,) * len(tail)) if val.ndim else val
            return out

        return wrapped

    return QuadraticGenerator(
        l=along_paths(fl, ()),
        dl_dx=along_paths(fx, (1,)),
        dl_dy=along_paths(fy, ()),
        dl_dz=along_paths(fz, (1,)),
        alpha=float(alpha),
        lipschitz_bound=float(lipschitz_bound),
        truncation_level=truncation_level,
    )


def scalar_terminal(g: str, grad_g: str,
                    bound: Optional[float] = None) -> TerminalCondition:
    """Build a 1-dimensional map-kind TerminalCondition from expressions in x."""
    fg = compile_expr(g, ("x",))
    fdg = compile_expr(grad_g, ("x",))

    def gfun(x):
        x = np.asarray(x, dtype=float)
        out = np.empty(x.shape[0])
        val = np.asarray(fg(x=x[:, 0]), dtype=float)
        out[...] = val
        return out

    def dgfun(x):
        x = np.asarray(x, dtype=float)
        out = np.empty((x.shape[0], 1))
        val = np.asarray(fdg(x=x[:, 0]), dtype=float)
        out[...] = val.reshape(-1, 1) if val.ndim else val
        return out

    return TerminalCondition(kind="map", g=gfun, grad_g=dgfun, bound=bound)


# ---------------------------------------------------------------------------
# validation


@dataclass(frozen=True)
class CheckResult:
    name: str
    observed: float
    bound: Optional[float]
    passed: bool
    n_probes: int


@dataclass(frozen=True)
class ValidationReport:
    entries: tuple

    @property
    def ok(self) -> bool:
        return all(e.passed for e in self.entries)

    @property
    def violations(self) -> tuple:
        return tuple(e for e in self.entries if not e.passed)

    def entry(self, name: str) -> CheckResult:
        for e in self.entries:
            if e.name == name:
                return e
        raise KeyError(name)


def _require_finite(name: str, arr: np.ndarray, probe_index_hint: str = ""):
    arr = np.asarray(arr, dtype=float)
    if not np.isfinite(arr).all():
        raise NonFiniteCoefficient(f"{name} returned a non-finite value{probe_index_hint}")
    return arr


def validate_model(model: SdeModel, gen: QuadraticGenerator,
                   term: TerminalCondition, probes: int = 100,
                   probe_seed: int = 12345) -> ValidationReport:
    """Spot-check growth/Lipschitz metadata on random probe points.

    Deterministic given (inputs, probe_seed).  Raises NonFiniteCoefficient
    if any coefficient evaluates to NaN/inf; bound violations are reported,
    not raised.
    """
    if probes < 10:
        raise ConfigError(f"need at least 10 probes, got {probes}")
    rng = np.random.default_rng(probe_seed)
    n, d = model.dim_x, model.dim_w
    t = float(rng.uniform(0.0, 1.0))
    x = rng.normal(0.0, 1.5, size=(probes, n))
    # pair each probe with a far partner and a tight partner (local slopes)
    x_far = x + rng.normal(0.0, 1.0, size=(probes, n))
    x_near = x + 1e-3 * rng.normal(0.0, 1.0, size=(probes, n))
    y = rng.normal(0.0, 1.5, size=probes)
    z = rng.normal(0.0, 1.5, size=(probes, d))

    entries = []

    def add(name, observed, bound, passed):
        entries.append(CheckResult(name, float(observed), bound, bool(passed), probes))

    bx = _require_finite("b", model.b(t, x))
    _require_finite("sigma at far probes", model.sigma(t, x_far))
    sx = _require_finite("sigma", model.sigma(t, x))
    _require_finite("jac_b", model.jac_b(t, x))
    _require_finite("jac_sigma", model.jac_sigma(t, x))

    def pair_ratios(fn, base_vals):
        ratios = []
        for other in (x_far, x_near):
            fv = _require_finite("probe pair", fn(t, other))
            num = np.linalg.norm((fv - base_vals).reshape(probes, -1), axis=1)
            den = np.linalg.norm(other - x, axis=1)
            good = den > 1e-12
            ratios.append(num[good] / den[good])
        return np.concatenate(ratios)

    c = model.lipschitz_bound
    b_ratio = pair_ratios(model.b, bx).max()
    add("b lipschitz", b_ratio, c, b_ratio <= c * (1 + 1e-9) + 1e-12)

    growth = (np.linalg.norm(sx.reshape(probes, -1), axis=1)
              / (1.0 + np.linalg.norm(x, axis=1))).max()
    add("sigma linear growth", growth, c, growth <= c * (1 + 1e-9) + 1e-12)

    lv = _require_finite("l", gen.l(t, x, y, z))
    _require_finite("dl_dx", gen.dl_dx(t, x, y, z))
    dy_max = np.abs(_require_finite("dl_dy", gen.dl_dy(t, x, y, z))).max()
    dz_max = np.abs(_require_finite("dl_dz", gen.dl_dz(t, x, y, z))).max()
    m_bound = gen.lipschitz_bound
    add("driver dl_dy bound", dy_max, m_bound,
        dy_max <= m_bound * (1 + 1e-9) + 1e-12)
    add("driver dl_dz bound", dz_max, m_bound,
        dz_max <= m_bound * (1 + 1e-9) + 1e-12)

    # quadratic excess |f - l| = alpha * g_n(z) must sit below alpha |z|^2
    s = np.linalg.norm(z, axis=1)
    level = gen.truncation_level
    if level is None:
        g_n = s ** 2
    else:
        g_n = np.where(s <= level, s ** 2, 2.0 * level * s - level ** 2)
    excess_ok = (gen.alpha * g_n <= gen.alpha * s ** 2 * (1 + 1e-12) + 1e-15).all()
    excess = float((g_n / np.maximum(s ** 2, 1e-300)).max()) if gen.alpha else 0.0
    add("driver quadratic excess", excess, 1.0, excess_ok)

    if term.kind == "map":
        gv = _require_finite("terminal g", term.g(x)).reshape(-1)
        _require_finite("terminal grad_g", term.grad_g(x))
        g_far = _require_finite("terminal g", term.g(x_far)).reshape(-1)
        g_near = _require_finite("terminal g", term.g(x_near)).reshape(-1)
        num = np.concatenate([np.abs(g_far - gv), np.abs(g_near - gv)])
        den = np.concatenate([np.linalg.norm(x_far - x, axis=1),
                              np.linalg.norm(x_near - x, axis=1)])
        good = den > 1e-12
        lip = float((num[good] / den[good]).max())
        add("terminal lipschitz estimate", lip, None, True)
        if term.bound is not None:
            all_g = np.concatenate([gv, g_far, g_near])
            worst = float(np.abs(all_g).max())
            add("terminal bound", worst, term.bound,
                worst <= term.bound * (1 + 1e-9) + 1e-12)
    return ValidationReport(entries=tuple(entries))
