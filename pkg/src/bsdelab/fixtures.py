"""Compiled-in experiment fixtures with vetted reference values.

Five scalar (n = d = 1) fixtures on [0, 1] cover the matrix the package
is tested against: linear vs quadratic driver, additive vs multiplicative
noise, exact vs quadrature reference.  Reference values carry an oracle
tag naming the derivation that produced them; quadrature references are
computed here by Gauss-Hermite summation at registration time and are
cross-checked against an independent integrator in the test suite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Dict, Optional, Union

import numpy as np

from .errors import UnknownFixture
from .model import (ExperimentConfig, QuadraticGenerator, SdeModel,
                    TerminalCondition, build_grid, scalar_generator,
                    scalar_sde, scalar_terminal)

GH_NODES = 200


def gauss_hermite_expectation(fn: Callable, mean: float = 0.0,
                              std: float = 1.0,
                              nodes: int = GH_NODES) -> float:
    """E[fn(mean + std*U)] for U standard normal, by Gauss-Hermite rule.

    Uses the probabilists' weight exp(-u^2/2); weights sum to sqrt(2*pi)
    and are normalized away.
    """
    u, w = np.polynomial.hermite_e.hermegauss(nodes)
    vals = fn(mean + std * u)
    return float(np.sum(w * vals) / math.sqrt(2.0 * math.pi))


@dataclass(frozen=True)
class Reference:
    """One reference quantity with the oracle that derived it.

    kind is "exact" for closed-form identities and "quadrature" for
    values obtained by deterministic Gauss-Hermite integration.
    """

    quantity: str
    value: Union[float, Callable]
    oracle: str
    kind: str


@dataclass(frozen=True)
class Fixture:
    """A bound (model, generator, terminal) triple plus references."""

    name: str
    model: SdeModel
    generator: QuadraticGenerator
    terminal: TerminalCondition
    x0: float
    horizon: float
    grad_bound: Optional[float]
    references: Dict[str, Reference]
    notes: str

    @property
    def closed_form(self) -> str:
        kinds = {r.kind for r in self.references.values()}
        if not kinds:
            return "none"
        return "exact" if kinds == {"exact"} else "quadrature-reference"

    def reference(self, quantity: str) -> Reference:
        try:
            return self.references[quantity]
        except KeyError:
            raise UnknownFixture(
                f"fixture {self.name!r} has no reference {quantity!r}") from None


def _additive_linear() -> Fixture:
    model = scalar_sde(b="0.0", sigma="1.0", jac_b="0.0", jac_sigma="0.0",
                       lipschitz_bound=1.0)
    gen = scalar_generator(l="0.0", dl_dx="0.0", dl_dy="0.0", dl_dz="0.0",
                           alpha=0.0, lipschitz_bound=0.0)
    term = scalar_terminal(g="x", grad_g="1.0")
    refs = {
        "y0": Reference("y0", 0.0, "martingale property of W", "exact"),
        "grad_y0": Reference("grad_y0", 1.0, "linearity of the terminal map",
                             "exact"),
        "z_const": Reference("z_const", 1.0, "integrand of xi = W_T",
                             "exact"),
        "dy_const": Reference("dy_const", 1.0,
                              "terminal map has unit slope along the flow",
                              "exact"),
        "y_map": Reference("y_map", lambda t, x: x,
                           "martingale property of W", "exact"),
    }
    return Fixture(name="additive-linear", model=model, generator=gen,
                   terminal=term, x0=0.0, horizon=1.0, grad_bound=1.0,
                   references=refs,
                   notes="zero driver, unit noise, identity terminal")


def _gbm_linear() -> Fixture:
    mu, sig, rate = 0.05, 0.2, 0.1
    model = scalar_sde(b="0.05*x", sigma="0.2*x", jac_b="0.05",
                       jac_sigma="0.2", lipschitz_bound=0.25)
    gen = scalar_generator(l="-0.1*y", dl_dx="0.0", dl_dy="-0.1", dl_dz="0.0",
                           alpha=0.0, lipschitz_bound=rate)
    term = scalar_terminal(g="x", grad_g="1.0")
    decay = mu - rate  # exponent of the discounted conditional mean

    def y_map(t, x):
        return x * np.exp(decay * (1.0 - t))

    def z_map(t, x):
        return sig * x * np.exp(decay * (1.0 - t))

    refs = {
        "y0": Reference("y0", math.exp(decay),
                        "discounted conditional mean of the exponential flow",
                        "exact"),
        "grad_y0": Reference("grad_y0", math.exp(decay),
                             "y0 is linear in the initial point", "exact"),
        "forward_mean": Reference("forward_mean", math.exp(mu),
                                  "mean of the exponential flow at T=1",
                                  "exact"),
        "y_map": Reference("y_map", y_map,
                           "discounted conditional mean of the exponential flow",
                           "exact"),
        "z_map": Reference("z_map", z_map,
                           "chain rule through sigma(x) = 0.2 x", "exact"),
    }
    return Fixture(name="gbm-linear", model=model, generator=gen,
                   terminal=term, x0=1.0, horizon=1.0, grad_bound=None,
                   references=refs,
                   notes="multiplicative noise, linear discounting driver")


def _cole_hopf_bm() -> Fixture:
    alpha = 0.5
    model = scalar_sde(b="0.0", sigma="1.0", jac_b="0.0", jac_sigma="0.0",
                       lipschitz_bound=1.0)
    gen = scalar_generator(l="0.0", dl_dx="0.0", dl_dy="0.0", dl_dz="0.0",
                           alpha=alpha, lipschitz_bound=0.0)
    term = scalar_terminal(g="x", grad_g="1.0")

    def y_map(t, x):
        return x + alpha * (1.0 - t)

    refs = {
        # log E[exp(W_T)|F_t] = W_t + (T-t)/2, so Y_t = W_t + alpha (T-t)
        "y0": Reference("y0", alpha, "Gaussian moment generating function",
                        "exact"),
        "grad_y0": Reference("grad_y0", 1.0,
                             "the transform shifts by a constant", "exact"),
        "z_const": Reference("z_const", 1.0,
                             "Gaussian moment generating function", "exact"),
        "dy_const": Reference("dy_const", 1.0,
                              "the transform shifts by a constant", "exact"),
        "y_map": Reference("y_map", y_map,
                           "Gaussian moment generating function", "exact"),
    }
    return Fixture(name="cole-hopf-bm", model=model, generator=gen,
                   terminal=term, x0=0.0, horizon=1.0, grad_bound=1.0,
                   references=refs,
                   notes="pure quadratic driver with Brownian terminal")


def _tanh_quadratic() -> Fixture:
    alpha, x0 = 0.5, 0.2
    model = scalar_sde(b="0.0", sigma="1.0", jac_b="0.0", jac_sigma="0.0",
                       lipschitz_bound=1.0)
    gen = scalar_generator(l="0.0", dl_dx="0.0", dl_dy="0.0", dl_dz="0.0",
                           alpha=alpha, lipschitz_bound=0.0)
    term = scalar_terminal(g="tanh(x)", grad_g="1 - tanh(x)**2", bound=1.0)
    # with 2*alpha = 1: Y_0 = log E[exp(tanh(x0 + W_1))] and the
    # initial-point derivative tilts the average by the same exponential
    denom = gauss_hermite_expectation(lambda u: np.exp(np.tanh(x0 + u)))
    num = gauss_hermite_expectation(
        lambda u: np.exp(np.tanh(x0 + u)) * (1.0 - np.tanh(x0 + u) ** 2))
    refs = {
        "y0": Reference("y0", math.log(denom),
                        "Gauss-Hermite quadrature of the exponential transform",
                        "quadrature"),
        "grad_y0": Reference("grad_y0", num / denom,
                             "Gauss-Hermite quadrature of the tilted gradient",
                             "quadrature"),
    }
    return Fixture(name="tanh-quadratic", model=model, generator=gen,
                   terminal=term, x0=x0, horizon=1.0, grad_bound=1.0,
                   references=refs,
                   notes="bounded smooth terminal, quadratic driver")


def _fbsde_tanh() -> Fixture:
    alpha, x0, mu, sig = 0.5, 1.0, 0.05, 0.2
    model = scalar_sde(b="0.05*x", sigma="0.2*x", jac_b="0.05",
                       jac_sigma="0.2", lipschitz_bound=0.25)
    gen = scalar_generator(l="0.0", dl_dx="0.0", dl_dy="0.0", dl_dz="0.0",
                           alpha=alpha, lipschitz_bound=0.0)
    term = scalar_terminal(g="tanh(x)", grad_g="1 - tanh(x)**2", bound=1.0)
    drift = mu - 0.5 * sig ** 2

    def x_T(u):
        return x0 * np.exp(drift + sig * u)

    denom = gauss_hermite_expectation(lambda u: np.exp(np.tanh(x_T(u))))
    num = gauss_hermite_expectation(
        lambda u: np.exp(np.tanh(x_T(u)))
        * (1.0 - np.tanh(x_T(u)) ** 2) * x_T(u) / x0)
    refs = {
        "y0": Reference("y0", math.log(denom),
                        "Gauss-Hermite quadrature of the exponential transform",
                        "quadrature"),
        "grad_y0": Reference("grad_y0", num / denom,
                             "Gauss-Hermite quadrature of the tilted gradient "
                             "against the exponential flow derivative",
                             "quadrature"),
    }
    return Fixture(name="fbsde-tanh", model=model, generator=gen,
                   terminal=term, x0=x0, horizon=1.0, grad_bound=1.0,
                   references=refs,
                   notes="multiplicative forward flow under a quadratic driver")


_REGISTRY: Dict[str, Fixture] = {
    f.name: f for f in (
        _additive_linear(),
        _gbm_linear(),
        _cole_hopf_bm(),
        _tanh_quadratic(),
        _fbsde_tanh(),
    )
}


def fixture_names() -> tuple:
    return tuple(_REGISTRY)


def get_fixture(name: str) -> Fixture:
    try:
        return _REGISTRY[name]
    except KeyError:
        known = ", ".join(sorted(_REGISTRY))
        raise UnknownFixture(f"unknown fixture {name!r}; known: {known}") from None


def config_for_fixture(name: str, n_paths: int = 20000, steps: int = 50,
                       seed: int = 1234, basis_degree: int = 3,
                       picard_iters: int = 3,
                       fd_steps: tuple = (1e-1, 1e-2, 1e-3),
                       truncation_level: Optional[float] = None,
                       output_dir: Optional[str] = None) -> ExperimentConfig:
    """Materialize an ExperimentConfig for a registered fixture."""
    fx = get_fixture(name)
    gen = fx.generator
    if truncation_level is not None:
        gen = replace(gen, truncation_level=truncation_level)
    return ExperimentConfig(model=fx.model, generator=gen,
                            terminal=fx.terminal,
                            grid=build_grid(fx.horizon, steps),
                            n_paths=n_paths, seed=seed,
                            x0=np.array([fx.x0]),
                            basis_degree=basis_degree,
                            picard_iters=picard_iters, fd_steps=fd_steps,
                            fixture=name, output_dir=output_dir)
