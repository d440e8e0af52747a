"""Malliavin derivatives: forward slices, BSDE route, trace identity."""

import numpy as np
import pytest

from conftest import rel_l2

from bsdelab.bsde import RegressionBasis, Truncation, solve_lsmc
from bsdelab.errors import (ConfigError, MissingDiagonal, ShapeMismatch,
                            SingularVariation)
from bsdelab.fixtures import config_for_fixture
from bsdelab.forward import simulate, simulate_brownian, simulate_sde
from bsdelab.malliavin import (MalliavinDerivative, dtheta_forward,
                               malliavin_derivative,
                               representation_from_variational, trace_check)
from bsdelab.model import (SdeModel, TerminalCondition, build_grid,
                           scalar_sde)
from bsdelab.sensitivity import solve_variational_bsde


def _solved(name, n_paths, seed, steps=50):
    config = config_for_fixture(name, n_paths=n_paths, steps=steps, seed=seed)
    paths = simulate(config)
    basis = RegressionBasis(1, config.basis_degree)
    sol = solve_lsmc(config.generator, config.terminal, paths, basis,
                     picard_iters=config.picard_iters)
    return config, paths, basis, sol


def test_dtheta_forward_additive(bm_paths, bm_config):
    slice_ = dtheta_forward(bm_paths, bm_config.model, theta=10)
    assert slice_.shape == (bm_paths.n_paths, 51, 1)
    assert np.all(slice_[:, :10] == 0.0)
    assert np.allclose(slice_[:, 10:], 1.0, atol=1e-14)


def test_dtheta_forward_gbm_scales_with_state():
    config = config_for_fixture("gbm-linear", n_paths=500, steps=50, seed=61)
    paths = simulate(config)
    theta = 20
    slice_ = dtheta_forward(paths, config.model, theta=theta)
    # J_k J_theta^{-1} sigma(X_theta) = 0.2 X_k along the lognormal flow
    want = 0.2 * paths.states[:, theta:, 0]
    assert np.allclose(slice_[:, theta:, 0], want, rtol=1e-10)
    assert np.all(slice_[:, :theta] == 0.0)


def test_dtheta_forward_singular_variation():
    # jac_b = -1/dt kills the tangent after one step
    model = scalar_sde(b="-50*x", sigma="1.0", jac_b="-50.0", jac_sigma="0.0",
                       lipschitz_bound=50.0)
    grid = build_grid(1.0, 50)
    dw = simulate_brownian(seed=2, n_paths=100, grid=grid, dim_w=1)
    paths = simulate_sde(model, np.array([1.0]), grid, dw)
    with pytest.raises(SingularVariation, match="path"):
        dtheta_forward(paths, model, theta=1)


def test_multidimensional_noise_rejected():
    model = SdeModel(
        dim_x=2, dim_w=2,
        b=lambda t, x: np.zeros_like(x),
        sigma=lambda t, x: np.tile(np.eye(2), (x.shape[0], 1, 1)),
        jac_b=lambda t, x: np.zeros((x.shape[0], 2, 2)),
        jac_sigma=lambda t, x: np.zeros((x.shape[0], 2, 2, 2)),
        lipschitz_bound=1.0,
    )
    grid = build_grid(1.0, 10)
    dw = simulate_brownian(seed=1, n_paths=200, grid=grid, dim_w=2)
    paths = simulate_sde(model, np.zeros(2), grid, dw)
    with pytest.raises(ShapeMismatch):
        dtheta_forward(paths, model, theta=0)


def test_sampler_terminal_rejected(bm_paths, basis3, bm_config):
    term = TerminalCondition(kind="sampler",
                             sampler=lambda p: p.states[:, -1, 0])
    base = solve_lsmc(bm_config.generator, term, bm_paths, basis3)
    with pytest.raises(ConfigError):
        malliavin_derivative(base, bm_paths, bm_config.model,
                             bm_config.generator, term, basis3,
                             theta_nodes=(0, 10))


def test_additive_trace_identity():
    config, paths, basis, sol = _solved("additive-linear", 4000, 67)
    mall = malliavin_derivative(sol, paths, config.model, config.generator,
                                config.terminal, basis,
                                theta_nodes=(0, 10, 25, 40))
    assert mall.source == "bsde"
    assert not mall.advisory_dz
    assert mall.dy.shape == (4000, 4, 51)
    report = trace_check(sol, mall)
    assert report.per_node.shape == (4,)
    assert report.aggregate <= 0.05, report.per_node
    # D_theta Y is constant 1 for xi = W_T
    diag = mall.diagonal()
    assert abs(diag.mean() - 1.0) < 0.05


def test_zeros_before_theta():
    config, paths, basis, sol = _solved("tanh-quadratic", 1000, 71, steps=20)
    mall = malliavin_derivative(sol, paths, config.model, config.generator,
                                config.terminal, basis, theta_nodes=(5, 12))
    assert np.all(mall.dx[:, 0, :5] == 0.0)
    assert np.all(mall.dy[:, 0, :5] == 0.0)
    assert np.all(mall.dz[:, 0, :5] == 0.0)
    assert np.all(mall.dy[:, 1, :12] == 0.0)
    assert np.any(mall.dy[:, 0, 5:] != 0.0)


def test_representation_route_agrees_with_bsde_route():
    config, paths, basis, sol = _solved("tanh-quadratic", 4000, 73)
    theta_nodes = (0, 10, 25, 40)
    mall = malliavin_derivative(sol, paths, config.model, config.generator,
                                config.terminal, basis,
                                theta_nodes=theta_nodes)
    varsol = solve_variational_bsde(sol, paths, config.generator,
                                    config.terminal, basis=basis)
    rep = representation_from_variational(varsol, paths, config.model,
                                          theta_nodes)
    assert rep.source == "representation"
    assert rep.advisory_dz
    assert np.allclose(rep.dx, mall.dx, atol=1e-12)
    err = rel_l2(mall.dy, rep.dy)
    assert err <= 0.05, err


def test_truncation_level_above_sample_range_is_inert():
    config, paths, basis, sol = _solved("tanh-quadratic", 1000, 79, steps=20)
    level = 1.1 * float(np.abs(sol.z).max())
    plain = malliavin_derivative(sol, paths, config.model, config.generator,
                                 config.terminal, basis, theta_nodes=(0, 10))
    capped = malliavin_derivative(sol, paths, config.model, config.generator,
                                  config.terminal, basis, theta_nodes=(0, 10),
                                  trunc=Truncation(level))
    assert np.array_equal(plain.dy, capped.dy)
    assert np.array_equal(plain.dz, capped.dz)


def test_trace_check_missing_diagonal(bm_paths, basis3, bm_config):
    sol = solve_lsmc(bm_config.generator, bm_config.terminal, bm_paths, basis3)
    m, n1 = bm_paths.n_paths, bm_paths.grid.n_steps + 1
    empty = MalliavinDerivative(theta_nodes=(),
                                dx=np.zeros((m, 0, n1, 1)),
                                dy=np.zeros((m, 0, n1)),
                                dz=np.zeros((m, 0, n1, 1)),
                                source="bsde")
    with pytest.raises(MissingDiagonal):
        trace_check(sol, empty)


def test_trace_check_flags_bound_violations():
    config, paths, basis, sol = _solved("additive-linear", 1000, 83, steps=20)
    mall = malliavin_derivative(sol, paths, config.model, config.generator,
                                config.terminal, basis, theta_nodes=(0, 10))
    # Z sits near 1, so a zero bound must flag every probed node
    report = trace_check(sol, mall, dxi_bound=0.0, slack=0.0)
    assert report.flagged_nodes == (0, 10)
    assert report.dxi_bound == 0.0
    # a generous bound flags nothing
    relaxed = trace_check(sol, mall, dxi_bound=1.0,
                          slack=float(np.abs(sol.z).max()))
    assert relaxed.flagged_nodes == ()


def test_empty_theta_nodes_rejected():
    config, paths, basis, sol = _solved("additive-linear", 1000, 89, steps=20)
    with pytest.raises(ShapeMismatch):
        malliavin_derivative(sol, paths, config.model, config.generator,
                             config.terminal, basis, theta_nodes=())
