"""Variational BSDE, difference quotients, convergence and stability."""

import numpy as np
import pytest

from bsdelab.bsde import (RegressionBasis, Truncation, martingale_standard_error,
                          solve_lsmc)
from bsdelab.errors import InsufficientHs, ShapeMismatch
from bsdelab.fixtures import config_for_fixture, get_fixture
from bsdelab.forward import simulate
from bsdelab.model import (ExperimentConfig, build_grid, scalar_generator,
                           scalar_sde, scalar_terminal)
from bsdelab.sensitivity import (convergence_study,
                                 finite_difference_sensitivity,
                                 linearized_coefficients,
                                 solve_variational_bsde, stability_diagnostic)

TANH_GRAD_Y0 = 0.5277138789533355      # quadratic driver, x0 = 0.2
TANH_GRAD_Y0_LINEAR = 0.5984790825580252  # same terminal, alpha = 0


def _solve(config, n_paths=None):
    paths = simulate(config)
    basis = RegressionBasis(config.model.dim_x, config.basis_degree)
    sol = solve_lsmc(config.generator, config.terminal, paths, basis,
                     picard_iters=config.picard_iters)
    return paths, basis, sol


def test_linearized_coefficients_untruncated():
    config = config_for_fixture("tanh-quadratic", n_paths=1000, steps=20, seed=3)
    paths, basis, base = _solve(config)
    gen = config.generator
    l_part, h, dlx = linearized_coefficients(base, paths, gen)
    # terminal row of the driver array is unused and left at zero
    assert np.array_equal(h[:, :-1], gen.alpha * 2.0 * base.z[:, :-1])
    assert np.all(h[:, -1] == 0.0)
    assert np.all(dlx == 0.0)  # the driver has no x dependence
    # the l part is linear in (U, V) with zero partials here
    got = l_part(5, 0.25, np.ones(paths.n_paths), np.ones((paths.n_paths, 1)))
    assert np.allclose(got, 0.0)


def test_linearized_coefficients_alpha_zero():
    config = config_for_fixture("additive-linear", n_paths=1000, steps=20, seed=3)
    paths, basis, base = _solve(config)
    l_part, h, dlx = linearized_coefficients(base, paths, config.generator)
    assert h is None


def test_linearized_coefficients_respect_truncation():
    config = config_for_fixture("cole-hopf-bm", n_paths=1000, steps=20, seed=3)
    paths = simulate(config)
    basis = RegressionBasis(1, 3)
    trunc = Truncation(0.3)
    base = solve_lsmc(config.generator, config.terminal, paths, basis,
                      trunc=trunc)
    _, h, _ = linearized_coefficients(base, paths, config.generator,
                                      trunc=trunc)
    # slope of the truncated quadratic term is capped at 2 alpha n
    assert np.abs(h).max() <= 2.0 * config.generator.alpha * 0.3 * (1 + 1e-12)


def test_variational_zero_for_constant_terminal(bm_paths, basis3, bm_config):
    term = scalar_terminal(g="1.0 + 0*x", grad_g="0.0", bound=1.0)
    base = solve_lsmc(bm_config.generator, term, bm_paths, basis3)
    varsol = solve_variational_bsde(base, bm_paths, bm_config.generator, term,
                                    basis=basis3)
    assert np.abs(varsol.grad_y).max() < 1e-12
    assert np.abs(varsol.grad_z).max() < 1e-12


def test_variational_terminal_row():
    config = config_for_fixture("tanh-quadratic", n_paths=1000, steps=20, seed=5)
    paths, basis, base = _solve(config)
    varsol = solve_variational_bsde(base, paths, config.generator,
                                    config.terminal, basis=basis)
    want = config.terminal.gradient(paths)
    assert np.array_equal(varsol.grad_y[:, -1, :], want)
    assert "per_axis" in varsol.diagnostics


def test_variational_gradient_linear_case():
    # alpha = 0 turns the variational BSDE into a plain linear one whose
    # node-0 value is E[tanh'(0.2 + W_1)]
    model = scalar_sde(b="0.0", sigma="1.0", jac_b="0.0", jac_sigma="0.0",
                       lipschitz_bound=1.0)
    gen = scalar_generator(l="0.0", dl_dx="0.0", dl_dy="0.0", dl_dz="0.0",
                           alpha=0.0, lipschitz_bound=0.0)
    term = scalar_terminal(g="tanh(x)", grad_g="1 - tanh(x)**2", bound=1.0)
    config = ExperimentConfig(model=model, generator=gen, terminal=term,
                              grid=build_grid(1.0, 50), n_paths=20000,
                              seed=23, x0=np.array([0.2]))
    paths, basis, base = _solve(config)
    varsol = solve_variational_bsde(base, paths, gen, term, basis=basis)
    se = martingale_standard_error(varsol.grad_z[:, :, :, 0], paths)
    err = abs(varsol.grad_y0(0) - TANH_GRAD_Y0_LINEAR)
    assert err <= 3 * se + 1e-4, (err, se)


def test_variational_gradient_quadratic_case():
    config = config_for_fixture("tanh-quadratic", n_paths=20000, steps=50,
                                seed=29)
    paths, basis, base = _solve(config)
    varsol = solve_variational_bsde(base, paths, config.generator,
                                    config.terminal, basis=basis)
    ref = get_fixture("tanh-quadratic").reference("grad_y0").value
    assert abs(ref - TANH_GRAD_Y0) < 1e-12
    se = martingale_standard_error(varsol.grad_z[:, :, :, 0], paths)
    err = abs(varsol.grad_y0(0) - ref)
    assert err <= 3 * se + 1e-3, (err, se)


def test_difference_quotient_terminal_row():
    config = config_for_fixture("tanh-quadratic", n_paths=1000, steps=20, seed=9)
    dq = finite_difference_sensitivity(config, h=1e-2)
    assert dq.h == 1e-2
    assert not dq.central
    assert np.array_equal(dq.u[:, -1], dq.zeta)
    # terminal row is the raw quotient of terminal values
    paths = simulate(config)
    from bsdelab.forward import shift_initial
    bumped = shift_initial(config, axis=0, h=1e-2,
                           increments=paths.increments)
    want = (config.terminal.evaluate(bumped)
            - config.terminal.evaluate(paths)) / 1e-2
    assert np.allclose(dq.zeta, want, atol=1e-12)


def test_central_quotient_cuts_first_order_bias():
    config = config_for_fixture("tanh-quadratic", n_paths=5000, steps=50,
                                seed=13)
    h = 0.3
    forward = finite_difference_sensitivity(config, h=h)
    central = finite_difference_sensitivity(config, h=h, central=True)
    assert central.central
    err_f = abs(forward.u[:, 0].mean() - TANH_GRAD_Y0)
    err_c = abs(central.u[:, 0].mean() - TANH_GRAD_Y0)
    assert err_c < err_f, (err_c, err_f)


def test_convergence_study_ladder():
    config = config_for_fixture("tanh-quadratic", n_paths=4000, steps=50,
                                seed=41)
    report = convergence_study(config, hs=(1e-1, 1e-2, 1e-3))
    assert report.passed
    assert 0.6 <= report.slope <= 1.4
    assert report.r_squared > 0.9
    sups = [row.e_sup for row in report.rows]
    assert sups[0] > sups[1] > sups[2]
    assert all(row.n_paths == 4000 for row in report.rows)
    assert report.exponent_p == 1.0


def test_convergence_study_rejects_thin_ladders():
    config = config_for_fixture("tanh-quadratic", n_paths=500, steps=10, seed=1)
    with pytest.raises(InsufficientHs):
        convergence_study(config, hs=(1e-1, 1e-2))        # too few
    with pytest.raises(InsufficientHs):
        convergence_study(config, hs=(1e-1, 5e-2, 2e-2))  # under two decades
    with pytest.raises(InsufficientHs):
        convergence_study(config, hs=(1e-1, 1e-2, 0.0))   # zero step
    with pytest.raises(InsufficientHs):
        convergence_study(config, hs=(1e-1, -1e-1, 1e-2))  # duplicates in |h|


def test_convergence_slope_stable_in_p():
    config = config_for_fixture("tanh-quadratic", n_paths=2000, steps=20,
                                seed=43)
    first = convergence_study(config, hs=(1e-1, 1e-2, 1e-3), exponent_p=1.0)
    second = convergence_study(config, hs=(1e-1, 1e-2, 1e-3), exponent_p=2.0)
    # the root-error order should not depend on the moment used to pool paths
    assert abs(first.slope - second.slope) < 0.15
    assert second.exponent_p == 2.0


def test_stability_scaling_linear_fixture():
    config = config_for_fixture("additive-linear", n_paths=4000, steps=50,
                                seed=47)
    report = stability_diagnostic(config, epsilons=(0.0, 0.05, 0.1))
    assert report.rows[0].epsilon == 0.0
    assert report.rows[0].norm_y == 0.0
    assert report.rows[0].norm_z == 0.0
    # the zero-denominator pair is skipped; the (0.05, 0.1) pair doubles
    assert len(report.ratios) == 1
    eps_ratio, y_ratio, z_ratio = report.ratios[0]
    assert abs(eps_ratio - 2.0) < 1e-12
    assert 1.9 < y_ratio < 2.1
    assert 1.9 < z_ratio < 2.1


def test_stability_scaling_quadratic_fixture():
    config = config_for_fixture("tanh-quadratic", n_paths=4000, steps=50,
                                seed=53)
    report = stability_diagnostic(config, epsilons=(0.05, 0.1))
    _, y_ratio, _ = report.ratios[0]
    assert 1.5 < y_ratio < 2.5


def test_stability_validation():
    config = config_for_fixture("additive-linear", n_paths=200, steps=10, seed=1)
    with pytest.raises(ShapeMismatch):
        stability_diagnostic(config, epsilons=(0.1,))
    with pytest.raises(ShapeMismatch):
        stability_diagnostic(config, epsilons=(-0.1, 0.1))
