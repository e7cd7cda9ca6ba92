import math
import warnings

import numpy as np
import pytest

from fracsource.control import (
    CONTROL_SIGN,
    assemble_gramian,
    assemble_lambda,
    build_control_family,
    lambda_column_fem,
    omega_overlaps,
    predicted_residuals,
    projection_matrix,
    select_epsilon,
    solve_hum,
    spectral_final_state,
    terminal_dataset,
    verify_null_control,
    warn_if_uncontrollable,
)
from fracsource.dynamics import TimeGrid
from fracsource.errors import ConfigError, EpsilonSelectionError, ValidityWarning
from fracsource.mesh_fem import make_mask


def _hum(desk, tau, n, eps):
    L = assemble_lambda(desk.basis, assemble_gramian(desk.basis, desk.mask, tau))
    return solve_hum(L, eps, terminal_dataset(n, tau, desk.basis), desk.basis, tau)


def test_overlaps_full_domain_is_identity(desk):
    # omega = Omega: the trapezoid on nodes with zero boundary values vs the consistent mass
    full = make_mask(desk.mesh, -1.0, 1.0)
    O = omega_overlaps(desk.basis, full)
    err = np.abs(O - np.eye(desk.basis.n_star))
    # second-order consistent: error grows like (mu_n h)^2
    assert np.max(err[:5, :5]) < 5e-3
    assert np.max(err) < 0.1


def test_gramian_closed_form_entries(desk):
    b = desk.basis
    tau = 0.3
    g = assemble_gramian(b, desk.mask, tau)
    assert np.allclose(g.G, g.G.T)
    assert np.linalg.eigvalsh(g.G)[0] > -1e-14
    n, m = 2, 5
    ls = b.lambdas[n - 1] + b.lambdas[m - 1]
    assert g.G[n - 1, m - 1] == pytest.approx(g.overlaps[n - 1, m - 1] * (1 - math.exp(-ls * tau)) / ls, rel=1e-13)
    assert np.all(assemble_gramian(b, desk.mask, 0.0).G == 0)
    with pytest.raises(ConfigError):
        assemble_gramian(b, desk.mask, -1.0)


def test_projection_matrix_close_to_mass_projection(desk):
    b = desk.basis
    P = projection_matrix(b)
    exact = b.mass.matvec(b.modes)
    rel = np.linalg.norm(P - exact, axis=0) / np.linalg.norm(exact, axis=0)
    assert np.all(rel[:5] < 2e-3) and np.all(rel < 0.05)
    # the two rules differ by h/12 times the second difference
    padded = np.pad(b.modes, ((1, 1), (0, 0)))
    assert np.allclose(P - exact, -b.mesh.h / 12 * (padded[:-2] - 2 * padded[1:-1] + padded[2:]), atol=1e-15)


def test_hum_residual_and_sign(desk):
    tau, n = 0.5, 6
    sol = _hum(desk, tau, n, 1e4)
    assert sol.residual < 1e-10
    assert np.isfinite(sol.condition) and sol.condition > 1
    c = CONTROL_SIGN * sol.modal
    free = math.exp(-desk.basis.lambdas[n - 1] * tau)
    controlled = verify_null_control(c, n, tau, desk.basis, desk.mask, method="spectral")
    flipped = verify_null_control(-c, n, tau, desk.basis, desk.mask, method="spectral")
    assert controlled < 0.2 * free < flipped


def test_final_state_matches_penalized_prediction(desk):
    tau, n = 0.5, 6
    sol = _hum(desk, tau, n, 1e2)
    final = spectral_final_state(CONTROL_SIGN * sol.modal, n, tau, desk.basis, desk.mask)
    predicted = desk.basis.modes.T @ desk.basis.mass.matvec(sol.final_state)
    assert np.linalg.norm(final - predicted) < 1e-2 * np.linalg.norm(predicted)


def test_state_norm_non_increasing_in_eps(desk):
    norms = []
    for eps in (1e2, 1e3, 1e4, 1e5):
        sol = _hum(desk, 0.5, 6, eps)
        norms.append(np.sqrt(sol.final_state @ desk.basis.mass.matvec(sol.final_state)))
    assert np.all(np.diff(norms) <= 0)


def test_fem_verification_agrees_with_spectral(desk):
    tau, n = 0.5, 3
    c = CONTROL_SIGN * _hum(desk, tau, n, 1e3).modal
    fem = verify_null_control(c, n, tau, desk.basis, desk.mask, desk.stiffness, steps=1000)
    spec = verify_null_control(c, n, tau, desk.basis, desk.mask, method="spectral")
    free = math.exp(-desk.basis.lambdas[n - 1] * tau)
    assert fem < 0.2 * free
    assert fem == pytest.approx(spec, rel=0.5)
    with pytest.raises(ConfigError):
        verify_null_control(c, n, tau, desk.basis, desk.mask)
    with pytest.raises(ConfigError):
        verify_null_control(c, n, tau, desk.basis, desk.mask, desk.stiffness, method="exact")


def test_lambda_column_fem_close_to_modal(desk):
    tau, j = 0.5, 64
    L = assemble_lambda(desk.basis, assemble_gramian(desk.basis, desk.mask, tau))
    fem = lambda_column_fem(j, desk.basis, desk.mask, tau, desk.stiffness, steps=1000)
    assert np.linalg.norm(L[:, j] - fem) < 0.05 * np.linalg.norm(fem)


def test_control_family_support_and_horizon(desk):
    grid = TimeGrid(1.0, 100, 10)
    fam = build_control_family(desk.basis, desk.mask, grid, 1e4, (1, 3))
    assert fam.coeffs.shape == (11, 2, desk.basis.n_star)
    assert np.all(fam.coeffs[0] == 0)
    assert np.max(fam.residuals) < 1e-10
    ell = 4
    h = fam.values(desk.basis, ell, 3, grid.t, on_mask=False)
    outside = np.setdiff1d(np.arange(desk.mesh.N), desk.mask.indices)
    assert np.all(h[outside] == 0)
    assert np.all(h[:, grid.t > grid.taus[ell] + 1e-12] == 0)
    assert np.any(h[:, grid.t <= grid.taus[ell]] != 0)
    assert fam.values(desk.basis, ell, 1, grid.t).shape == (desk.mask.size, grid.M + 1)
    with pytest.raises(ConfigError):
        fam.mode_position(2)
    with pytest.raises(ConfigError):
        build_control_family(desk.basis, desk.mask, grid, 1e4, (0,))


def test_uncontrollable_warning():
    with pytest.warns(ValidityWarning):
        assert warn_if_uncontrollable(0.5)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert not warn_if_uncontrollable(0.75)


def test_hum_rejects_bad_eps(desk):
    with pytest.raises(ConfigError):
        _hum(desk, 0.5, 1, 0.0)


def test_select_epsilon_meets_criterion_minimally(desk):
    choice = select_epsilon(desk.basis, desk.mask, desk.grid, 10)
    tau = desk.grid.taus[1]
    assert choice.threshold == pytest.approx(0.01 * 1.5)
    worst = np.max(predicted_residuals(desk.basis, desk.mask, tau, choice.eps, 10))
    assert worst < choice.threshold
    assert worst == pytest.approx(choice.achieved)
    below = np.max(predicted_residuals(desk.basis, desk.mask, tau, 10 ** (choice.exponent - 0.1), 10))
    assert below >= choice.threshold
    assert round(choice.exponent * 10) == choice.exponent * 10


def test_select_epsilon_gives_up(desk):
    with pytest.raises(EpsilonSelectionError):
        select_epsilon(desk.basis, desk.mask, desk.grid, 10, lo_exp=1, hi_exp=2, fraction=1e-12)
    with pytest.raises(ConfigError):
        select_epsilon(desk.basis, desk.mask, desk.grid, 0)
