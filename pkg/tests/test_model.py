"""Grids, coefficient containers, the expression compiler, metadata checks."""

import numpy as np
import pytest
from types import SimpleNamespace

from bsdelab.coeffs import compile_expr
from bsdelab.errors import BadGrid, ConfigError, NonFiniteCoefficient
from bsdelab.fixtures import fixture_names, get_fixture
from bsdelab.model import (ExperimentConfig, TerminalCondition, TimeGrid,
                           build_grid, scalar_generator, scalar_sde,
                           scalar_terminal, validate_model)


def test_build_grid_basic():
    grid = build_grid(1.0, 50)
    assert grid.n_steps == 50
    assert grid.horizon == 1.0
    assert abs(grid.dt - 0.02) < 1e-15
    assert grid.nodes[0] == 0.0
    assert grid.nodes[-1] == 1.0
    assert np.allclose(np.diff(grid.nodes), 0.02)


def test_build_grid_rejects_bad_inputs():
    with pytest.raises(BadGrid):
        build_grid(0.0, 50)
    with pytest.raises(BadGrid):
        build_grid(-1.0, 50)
    with pytest.raises(BadGrid):
        build_grid(1.0, 1)


def test_time_grid_validation():
    with pytest.raises(BadGrid):
        TimeGrid(nodes=np.array([0.0, 1.0]))          # too few nodes
    with pytest.raises(BadGrid):
        TimeGrid(nodes=np.array([0.1, 0.5, 1.0]))     # must start at 0
    with pytest.raises(BadGrid):
        TimeGrid(nodes=np.array([0.0, 0.6, 0.5]))     # not increasing
    with pytest.raises(BadGrid):
        TimeGrid(nodes=np.array([0.0, 0.1, 0.3, 1.0]))  # non-uniform


def test_compile_expr_vectorizes():
    fn = compile_expr("0.2*x + sin(t)", ("t", "x"))
    x = np.linspace(-2.0, 2.0, 7)
    got = fn(t=0.3, x=x)
    assert np.allclose(got, 0.2 * x + np.sin(0.3))
    assert fn.source == "0.2*x + sin(t)"


def test_compile_expr_constants_and_power():
    fn = compile_expr("e**(-x**2/2) / sqrt(2*pi)", ("x",))
    assert abs(fn(x=0.0) - 1.0 / np.sqrt(2 * np.pi)) < 1e-15


@pytest.mark.parametrize("bad", [
    "__import__('os')",
    "x.real",
    "x[0]",
    "(lambda: 1)()",
    "'abc'",
    "x if x else 0",
    "floor(x)",
    "w + 1",
    "exp(x, 2)",
])
def test_compile_expr_rejects_unsafe(bad):
    with pytest.raises(ConfigError):
        compile_expr(bad, ("t", "x"))


def test_compile_expr_rejects_syntax_error():
    with pytest.raises(ConfigError):
        compile_expr("1 +", ("x",))


def test_scalar_sde_shapes():
    model = scalar_sde(b="0.05*x", sigma="0.2*x", jac_b="0.05",
                       jac_sigma="0.2", lipschitz_bound=0.25)
    x = np.linspace(0.5, 1.5, 8).reshape(-1, 1)
    assert model.b(0.0, x).shape == (8, 1)
    assert model.sigma(0.0, x).shape == (8, 1, 1)
    assert model.jac_b(0.0, x).shape == (8, 1, 1)
    assert model.jac_sigma(0.0, x).shape == (8, 1, 1, 1)
    assert np.allclose(model.b(0.0, x)[:, 0], 0.05 * x[:, 0])
    assert np.allclose(model.sigma(0.0, x)[:, 0, 0], 0.2 * x[:, 0])


def test_scalar_generator_shapes():
    gen = scalar_generator(l="-0.1*y + 0.3*z", dl_dx="0.0", dl_dy="-0.1",
                           dl_dz="0.3", alpha=0.0, lipschitz_bound=0.3)
    x = np.zeros((6, 1))
    y = np.arange(6.0)
    z = np.ones((6, 1))
    lv = gen.l(0.0, x, y, z)
    assert lv.shape == (6,)
    assert np.allclose(lv, -0.1 * y + 0.3)
    assert gen.dl_dx(0.0, x, y, z).shape == (6, 1)
    assert gen.dl_dy(0.0, x, y, z).shape == (6,)
    assert gen.dl_dz(0.0, x, y, z).shape == (6, 1)


def test_terminal_kind_validation():
    with pytest.raises(ConfigError):
        TerminalCondition(kind="weird")
    with pytest.raises(ConfigError):
        TerminalCondition(kind="map", g=lambda x: x[:, 0])  # no grad_g
    with pytest.raises(ConfigError):
        TerminalCondition(kind="sampler")


def test_terminal_gradient_contracts_tangent():
    term = scalar_terminal(g="x**2", grad_g="2*x")
    states = np.zeros((5, 3, 1))
    states[:, -1, 0] = np.linspace(0.5, 2.5, 5)
    tangents = np.zeros((5, 3, 1, 1))
    tangents[:, -1, 0, 0] = np.linspace(1.0, 3.0, 5)
    paths = SimpleNamespace(states=states, tangents=tangents)
    got = term.gradient(paths)
    want = 2.0 * states[:, -1, 0] * tangents[:, -1, 0, 0]
    assert got.shape == (5, 1)
    assert np.allclose(got[:, 0], want)


def test_sampler_gradient_requires_grad_sampler():
    term = TerminalCondition(kind="sampler",
                             sampler=lambda p: p.states[:, -1, 0])
    paths = SimpleNamespace(states=np.zeros((4, 2, 1)),
                            tangents=np.zeros((4, 2, 1, 1)))
    with pytest.raises(ConfigError):
        term.gradient(paths)


def _tiny_config(**overrides):
    fx = get_fixture("additive-linear")
    kwargs = dict(model=fx.model, generator=fx.generator, terminal=fx.terminal,
                  grid=build_grid(1.0, 10), n_paths=200, seed=1,
                  x0=np.array([0.0]))
    kwargs.update(overrides)
    return ExperimentConfig(**kwargs)


def test_experiment_config_validation():
    _tiny_config()  # fine as-is
    with pytest.raises(ConfigError):
        _tiny_config(n_paths=50)
    with pytest.raises(ConfigError):
        _tiny_config(basis_degree=-1)
    with pytest.raises(ConfigError):
        _tiny_config(picard_iters=0)
    with pytest.raises(ConfigError):
        _tiny_config(seed=-3)
    with pytest.raises(ConfigError):
        _tiny_config(x0=np.array([0.0, 1.0]))
    with pytest.raises(ConfigError):
        _tiny_config(fd_steps=(0.1, 0.0))


@pytest.mark.parametrize("name", fixture_names())
def test_registry_fixtures_validate(name):
    fx = get_fixture(name)
    report = validate_model(fx.model, fx.generator, fx.terminal)
    assert report.ok, [e.name for e in report.violations]
    names = {e.name for e in report.entries}
    assert {"b lipschitz", "sigma linear growth", "driver dl_dy bound",
            "driver dl_dz bound", "driver quadratic excess"} <= names


def test_validate_reports_violations_without_raising():
    model = scalar_sde(b="2*x", sigma="1.0", jac_b="2.0", jac_sigma="0.0",
                       lipschitz_bound=0.1)  # understated on purpose
    fx = get_fixture("additive-linear")
    report = validate_model(model, fx.generator, fx.terminal)
    assert not report.ok
    bad = report.entry("b lipschitz")
    assert not bad.passed
    assert bad.observed > bad.bound


def test_validate_nonfinite_coefficient_raises():
    model = scalar_sde(b="log(x)", sigma="1.0", jac_b="1/x", jac_sigma="0.0",
                       lipschitz_bound=1.0)  # NaN on negative probes
    fx = get_fixture("additive-linear")
    with np.errstate(invalid="ignore", divide="ignore"):
        with pytest.raises(NonFiniteCoefficient):
            validate_model(model, fx.generator, fx.terminal)


def test_validate_probe_floor():
    fx = get_fixture("additive-linear")
    with pytest.raises(ConfigError):
        validate_model(fx.model, fx.generator, fx.terminal, probes=5)


def test_validate_entry_lookup():
    fx = get_fixture("gbm-linear")
    report = validate_model(fx.model, fx.generator, fx.terminal)
    entry = report.entry("sigma linear growth")
    assert entry.passed
    with pytest.raises(KeyError):
        report.entry("not a check")


def test_terminal_bound_checked_when_given():
    fx = get_fixture("tanh-quadratic")
    report = validate_model(fx.model, fx.generator, fx.terminal)
    entry = report.entry("terminal bound")
    assert entry.passed
    assert entry.observed <= 1.0 + 1e-9
