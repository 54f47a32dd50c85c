import json

import numpy as np
import pytest
from scipy import linalg, optimize

from manyiv.exceptions import CalibrationError, ConfigurationError, DataError
from manyiv.nkpc_dgp import (
    DgpCalibration,
    concentration_observed,
    concentration_oracle,
    concentration_report,
    inverse_sqrt,
    load_calibrations,
    make_xi,
    psi_matrix,
    simulate_dataset,
    simulate_var,
    solve_inflation_row,
    stationary_covariance,
    table1_calibrations,
    write_concentration_csv,
)
from reference_values import MU2


def fixed_point_residual(calib, a):
    g, lam = calib.gamma_f, calib.lam
    a2 = np.array([calib.a21, calib.a22, calib.a23])
    a3 = np.array([calib.a31, calib.a32, calib.a33])
    num = (lam + g * a[1]) * a2 + g * a[2] * a3
    num[0] += 1 - g
    return num / (1 - g * a[0]) - a


# ---------------------------------------------------------------- inflation row


def test_row_examples():
    np.testing.assert_allclose(solve_inflation_row(DgpCalibration(gamma_f=0.0, lam=0.0)), [1, 0, 0])
    c = DgpCalibration(gamma_f=0.0, lam=0.3, a21=0.2, a22=0.4, a23=0.1)
    np.testing.assert_allclose(solve_inflation_row(c), [1 + 0.3 * 0.2, 0.3 * 0.4, 0.3 * 0.1], atol=1e-14)
    # a unit root in inflation is a valid row but not a stationary design
    with pytest.raises(CalibrationError):
        psi_matrix(DgpCalibration(gamma_f=0.0, lam=0.0))


def test_row_matches_root_finder_on_random_calibrations(rng):
    checked = 0
    while checked < 20:
        c = DgpCalibration(gamma_f=rng.uniform(0.2, 0.9), lam=rng.uniform(0, 0.3),
                           a21=rng.uniform(0, 0.5), a22=rng.uniform(0, 0.6),
                           a23=rng.uniform(0, 0.5), a33=rng.uniform(0.2, 0.8))
        try:
            a = solve_inflation_row(c)
            Psi = psi_matrix(c)
        except CalibrationError:
            continue
        ref = optimize.root(lambda x: fixed_point_residual(c, x), np.zeros(3), tol=1e-14).x
        np.testing.assert_allclose(a, ref, atol=1e-9)
        assert np.abs(fixed_point_residual(c, a)).max() < 1e-12
        assert np.abs(np.linalg.eigvals(Psi)).max() < 1
        checked += 1


def test_table_rows_are_stationary_fixed_points():
    for c in table1_calibrations():
        a = solve_inflation_row(c)
        assert np.abs(fixed_point_residual(c, a)).max() < 1e-12
        assert np.abs(np.linalg.eigvals(psi_matrix(c))).max() < 1


# ---------------------------------------------------------------- Lyapunov


def test_lyapunov_examples():
    Omega = np.array([[2.0, 0.5], [0.5, 1.0]])
    np.testing.assert_allclose(stationary_covariance(np.zeros((2, 2)), Omega), Omega)
    assert stationary_covariance([[0.7]], [[0.4]])[0, 0] == pytest.approx(0.78431, abs=1e-5)
    np.testing.assert_allclose(stationary_covariance(0.5 * np.eye(3), np.eye(3)), 4 / 3 * np.eye(3))
    with pytest.raises(CalibrationError):
        stationary_covariance([[1.0]], [[1.0]])


def test_lyapunov_matches_scipy(rng):
    for _ in range(20):
        A = rng.standard_normal((3, 3))
        Psi = 0.9 * A / np.abs(np.linalg.eigvals(A)).max()
        B = rng.standard_normal((3, 3))
        Omega = B @ B.T + 0.1 * np.eye(3)
        G = stationary_covariance(Psi, Omega)
        np.testing.assert_allclose(G, linalg.solve_discrete_lyapunov(Psi, Omega), rtol=1e-9, atol=1e-9)
        assert np.abs(G - Psi @ G @ Psi.T - Omega).max() < 1e-10


# ---------------------------------------------------------------- loadings and concentration


def test_make_xi():
    np.testing.assert_array_equal(make_xi(10, 0.0), np.zeros(10))
    xi = make_xi(200, 0.05)
    assert xi[0] == pytest.approx(0.19560, abs=1e-5)
    logs = np.log((np.arange(2, 202) ** 2) / (200 * np.arange(1, 201)))
    same_sign = np.sign(logs[:-1]) == np.sign(logs[1:])
    assert np.all(xi[:-1][same_sign] * xi[1:][same_sign] <= 0)


@pytest.mark.parametrize("cell", sorted(MU2))
def test_concentration_golden(cell):
    a23, a21, a22 = cell
    rep = concentration_report(DgpCalibration(a21=a21, a22=a22, a23=a23))
    assert rep.mu2_O == pytest.approx(MU2[cell][0], abs=0.01)
    assert rep.mu2_E == pytest.approx(MU2[cell][1], abs=0.01)
    assert rep.mu2_O >= rep.mu2_E - 1e-9


def test_report_invariants():
    c = DgpCalibration(a21=0.2, a22=0.45, a23=0.2)
    rep, mu2_E = concentration_observed(c)
    _, mu2_O = concentration_oracle(c)
    assert rep.mu2_O == mu2_O and rep.mu2_E == mu2_E
    assert np.abs(rep.Gamma - rep.Psi @ rep.Gamma @ rep.Psi.T - c.Omega).max() < 1e-10
    for S in (rep.Sigma, rep.Sigma_t):
        assert np.allclose(S, S.T) and np.linalg.eigvalsh(S)[0] > 0
    assert rep.Gamma_t.shape == (202, 202) and rep.M_t.shape == (2, 202)
    again = concentration_report(c)
    assert again.mu2_O == rep.mu2_O and again.mu2_E == rep.mu2_E


def test_inverse_sqrt(rng):
    B = rng.standard_normal((4, 4))
    S = B @ B.T + np.eye(4)
    Si = inverse_sqrt(S)
    np.testing.assert_allclose(Si @ S @ Si, np.eye(4), atol=1e-10)
    with pytest.raises(CalibrationError):
        inverse_sqrt(np.diag([1.0, -1.0]))


# ---------------------------------------------------------------- simulation


@pytest.fixture(scope="module")
def long_run():
    c = DgpCalibration(a21=0.45, a22=0.45, a23=0.45)
    R, u = simulate_var(c, np.random.default_rng(99), 1_000_000)
    return c, R, u


def test_long_run_covariance(long_run):
    c, R, _ = long_run
    G = stationary_covariance(psi_matrix(c), c.Omega)
    emp = np.cov(R, rowvar=False)
    assert np.abs(np.diag(emp) / np.diag(G) - 1).max() < 0.01
    assert np.abs(emp - G).max() < 0.01 * np.abs(G).max()


def test_structural_residual_identity(long_run):
    c, R, u = long_run
    a1 = solve_inflation_row(c)
    g, lam = c.gamma_f, c.lam
    pi, s = R[:, 0], R[:, 1]
    eps = pi[1:] - g * R[1:] @ a1 - (1 - g) * pi[:-1] - lam * s[1:]
    w = np.array([1.0, 0.0, 0.0]) - g * a1 - lam * np.array([0.0, 1.0, 0.0])
    np.testing.assert_allclose(eps, u[1:] @ w, atol=1e-10)
    for j in range(3):
        assert abs(np.corrcoef(eps, R[:-1, j])[0, 1]) < 0.01


def test_zero_innovations_are_degenerate():
    c = DgpCalibration(omega11=0, omega12=0, omega22=0, omega33=0)
    R, _ = simulate_var(c, 0, 10)
    np.testing.assert_array_equal(R, 0.0)
    with pytest.raises(DataError):
        simulate_dataset(c, 0)


def test_dataset_layout_and_determinism():
    c = DgpCalibration(a23=0.2)
    p = simulate_dataset(c, np.random.default_rng(4))
    q = simulate_dataset(c, np.random.default_rng(4))
    assert (p.n_obs, p.k, p.p1, p.p2) == (100, 202, 2, 1)
    assert p.labels[:2] == ["pi.-1", "s.-1"] and p.labels[-1] == "Q200.-1"
    assert p.oracle.shape == (100, 3)
    for name in ("y", "Y", "X", "Z", "oracle"):
        np.testing.assert_array_equal(getattr(p, name), getattr(q, name))
    # y = pi_t - pi_{t-1} and Y_1 = pi_{t+1} - pi_{t-1}; the oracle keeps pi_{t-1} unscaled
    pi_lag = p.oracle[:, 0]
    np.testing.assert_allclose((p.y + pi_lag)[:-1], pi_lag[1:], atol=1e-12)
    np.testing.assert_allclose(p.Y[:-2, 0], pi_lag[2:] - pi_lag[:-2], atol=1e-12)
    np.testing.assert_array_equal(p.X, 1.0)
    np.testing.assert_allclose(p.Z[:, 0], (pi_lag - pi_lag.mean()) / pi_lag.std(), atol=1e-12)


# ---------------------------------------------------------------- calibration files


def test_calibration_round_trip(tmp_path):
    c = DgpCalibration(a21=0.2, lam=0.1)
    d = c.to_dict()
    assert d["lambda"] == 0.1 and DgpCalibration.from_dict(d) == c
    with pytest.raises(ConfigurationError):
        DgpCalibration.from_dict({"bogus": 1})
    with pytest.raises(ConfigurationError):
        DgpCalibration(omega11=-1.0)
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"base": {"T": 50}, "cells": [{"a23": 0.2}, {"a21": 0.45}]}))
    cs = load_calibrations(path)
    assert [x.cell() for x in cs] == [(0.2, 0.0, 0.0), (0.0, 0.45, 0.0)] and cs[0].T == 50
    path.write_text(json.dumps({"table1": True}))
    assert len(load_calibrations(path)) == 27
    path.write_text("{")
    with pytest.raises(ConfigurationError):
        load_calibrations(path)


def test_concentration_csv(tmp_path):
    out = write_concentration_csv(table1_calibrations()[:3], tmp_path / "mu.csv")
    lines = out.read_text().splitlines()
    assert lines[0] == "a23,a21,a22,mu2_O,mu2_E"
    assert lines[1] == "0.0,0.0,0.0,0.000,0.000"
    assert lines[2].endswith("4.082,4.082")
