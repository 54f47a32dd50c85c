"""Simulation design for the hybrid New Keynesian Phillips curve.

``R_t = (pi_t, s_t, f_t)`` follows a VAR(1) ``R_t = Psi R_{t-1} + u_t``
whose inflation row is backed out of the restricted NKPC
``pi_t = gamma_f E_t pi_{t+1} + (1 - gamma_f) pi_{t-1} + lambda s_t + eps_t``.
A wide panel ``Q_t = xi f_t + noise`` of noisy factor proxies supplies the
many instruments. The module also computes the concentration parameters of
the infeasible (oracle) and observable first stages.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from manyiv._validation import as_generator
from manyiv.dataset import EstimationProblem, standardize_columns
from manyiv.exceptions import CalibrationError, ConfigurationError, DataError

__all__ = [
    "ConcentrationReport",
    "DgpCalibration",
    "TABLE1_LEVELS",
    "concentration_observed",
    "concentration_oracle",
    "concentration_report",
    "inverse_sqrt",
    "load_calibrations",
    "make_xi",
    "psi_matrix",
    "selection_matrices",
    "simulate_dataset",
    "simulate_var",
    "solve_inflation_row",
    "spectral_radius",
    "stationary_covariance",
    "table1_calibrations",
    "write_concentration_csv",
]

TABLE1_LEVELS = (0.0, 0.2, 0.45)
MAX_ITER = 10_000


@dataclass(frozen=True)
class DgpCalibration:
    """Every parameter of the simulation design.

    The factor innovation variance ``omega33`` defaults to 1.0; with this
    value the concentration parameters of all 27 design cells match the
    reference values to three decimals.
    """

    gamma_f: float = 0.8
    lam: float = 0.05
    T: int = 100
    a21: float = 0.0
    a22: float = 0.0
    a23: float = 0.0
    a31: float = 0.0
    a32: float = 0.0
    a33: float = 0.7
    omega11: float = 0.07
    omega12: float = 0.03
    omega22: float = 0.7
    omega33: float = 1.0
    m: int = 200
    tau: float = 0.05
    burn_in: int = 200
    seed: int = 0

    def __post_init__(self):
        for name in ("T", "m", "burn_in", "seed"):
            value = getattr(self, name)
            if isinstance(value, bool) or int(value) != value or value < 0:
                raise ConfigurationError(f"{name} must be a nonnegative integer, got {value!r}")
            object.__setattr__(self, name, int(value))
        if self.T < 2 or self.m < 1:
            raise ConfigurationError("need T >= 2 and m >= 1")
        w = np.linalg.eigvalsh(self.Omega)
        if w[0] < -1e-12 * max(1.0, w[-1]):
            raise ConfigurationError("Omega must be positive semidefinite")

    @property
    def Omega(self):
        return np.array([
            [self.omega11, self.omega12, 0.0],
            [self.omega12, self.omega22, 0.0],
            [0.0, 0.0, self.omega33],
        ])

    @property
    def theta(self):
        """True ``(gamma_f, lambda)``."""
        return np.array([self.gamma_f, self.lam])

    def cell(self):
        return (self.a23, self.a21, self.a22)

    def to_dict(self):
        out = asdict(self)
        out["lambda"] = out.pop("lam")
        return out

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        if "lambda" in data:
            data["lam"] = data.pop("lambda")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigurationError(f"unknown calibration keys: {unknown}")
        return cls(**data)


def spectral_radius(A):
    return float(np.max(np.abs(np.linalg.eigvals(A))))


def solve_inflation_row(calib: DgpCalibration, *, max_iter=MAX_ITER, tol=1e-15):
    """First row ``(a11, a12, a13)`` of ``Psi`` consistent with rational expectations.

    Substituting ``E_t pi_{t+1} = a1' R_t`` into the NKPC gives three fixed
    point equations, iterated from zero (with damping if plain iteration
    stalls). Stationarity of the full ``Psi`` is checked by
    :func:`psi_matrix`, not here.

    Raises
    ------
    CalibrationError
        No fixed point with residual below ``1e-12`` within ``max_iter``.
    """
    g, lam = calib.gamma_f, calib.lam
    a2 = np.array([calib.a21, calib.a22, calib.a23])
    a3 = np.array([calib.a31, calib.a32, calib.a33])

    def update(a):
        d = 1.0 - g * a[0]
        if d == 0.0:
            raise CalibrationError("fixed-point denominator 1 - gamma_f * a11 vanished")
        b = lam + g * a[1]
        num = b * a2 + g * a[2] * a3
        num[0] += 1.0 - g
        return num / d

    last = None
    for damping in (1.0, 0.5, 0.1):
        a = np.zeros(3)
        for _ in range(max_iter):
            new = (1.0 - damping) * a + damping * update(a)
            if not np.all(np.isfinite(new)):
                break
            if np.max(np.abs(new - a)) <= tol:
                a = new
                break
            a = new
        if np.all(np.isfinite(a)):
            res = np.max(np.abs(update(a) - a))
            last = res
            if res < 1e-12:
                return a
    raise CalibrationError(f"inflation row did not converge (last residual {last})")


def psi_matrix(calib: DgpCalibration):
    """Full ``Psi``; raises :class:`CalibrationError` unless it is stationary."""
    a1 = solve_inflation_row(calib)
    Psi = np.vstack([a1, [calib.a21, calib.a22, calib.a23], [calib.a31, calib.a32, calib.a33]])
    rho = spectral_radius(Psi)
    if not rho < 1.0:
        raise CalibrationError(f"solved Psi is not stationary (spectral radius {rho:.6f})")
    return Psi


def stationary_covariance(Psi, Omega):
    """``Gamma`` solving ``Gamma = Psi Gamma Psi' + Omega`` via the vec/Kronecker system."""
    Psi = np.asarray(Psi, dtype=float)
    Omega = np.asarray(Omega, dtype=float)
    n = Psi.shape[0]
    rho = spectral_radius(Psi)
    if not rho < 1.0:
        raise CalibrationError(f"spectral radius {rho:.6f} >= 1: no stationary covariance")
    vec = np.linalg.solve(np.eye(n * n) - np.kron(Psi, Psi), Omega.reshape(-1, order="F"))
    Gamma = vec.reshape(n, n, order="F")
    return 0.5 * (Gamma + Gamma.T)


def inverse_sqrt(S, name="matrix"):
    """Symmetric positive definite inverse square root via ``eigh``."""
    w, V = np.linalg.eigh(0.5 * (S + S.T))
    if not w[0] > 0:
        raise CalibrationError(f"{name} is not positive definite (min eigenvalue {w[0]:.3e})")
    return (V * w**-0.5) @ V.T


def make_xi(m, tau):
    """Factor loadings ``xi_q = tau (-1)^q log((q+1)^2 / (m q))`` for ``q = 1..m``."""
    q = np.arange(1, int(m) + 1, dtype=float)
    return tau * (-1.0) ** q * np.log((q + 1.0) ** 2 / (m * q))


def selection_matrices():
    """``E1``, ``E2``, ``E3`` mapping ``R`` into the two first-stage equations."""
    E1 = np.array([[1.0, 0, 0], [0, 0, 0]])
    E2 = np.array([[0.0, 0, 0], [0, 1, 0]])
    E3 = np.array([[-1.0, 0, 0], [0, 0, 0]])
    return E1, E2, E3


@dataclass
class ConcentrationReport:
    """Intermediate matrices and concentration parameters of one calibration."""

    Psi: np.ndarray
    Gamma: np.ndarray
    D: np.ndarray
    Sigma: np.ndarray
    C: np.ndarray
    mu2_O: float
    Xi: np.ndarray | None = field(default=None, repr=False)
    F: np.ndarray | None = field(default=None, repr=False)
    Gamma_t: np.ndarray | None = field(default=None, repr=False)
    M_t: np.ndarray | None = field(default=None, repr=False)
    Sigma_t: np.ndarray | None = None
    C_t: np.ndarray | None = None
    mu2_E: float | None = None


def concentration_oracle(calib: DgpCalibration):
    """Oracle first stage: instruments ``R_{t-1}`` (factor observed).

    Returns
    -------
    report : ConcentrationReport
        Tilde fields left empty.
    mu2_O : float
    """
    Psi = psi_matrix(calib)
    Omega = calib.Omega
    Gamma = stationary_covariance(Psi, Omega)
    E1, E2, E3 = selection_matrices()
    D = E1 @ Psi @ Psi + E2 @ Psi + E3
    A = E1 @ Psi + E2
    Sigma = A @ Omega @ A.T + E1 @ Omega @ E1.T
    Si = inverse_sqrt(Sigma, "Sigma")
    C = calib.T * Si @ D @ Gamma @ D.T @ Si
    C = 0.5 * (C + C.T)
    mu2 = float(np.linalg.eigvalsh(C)[0])
    return ConcentrationReport(Psi, Gamma, D, Sigma, C, mu2), mu2


def concentration_observed(calib: DgpCalibration):
    """Observable first stage: the factor is replaced by its noisy proxies ``Q``.

    Returns
    -------
    report : ConcentrationReport
    mu2_E : float
    """
    rep, _ = concentration_oracle(calib)
    m = calib.m
    Xi = np.zeros((m + 2, 3))
    Xi[0, 0] = 1.0
    Xi[1, 1] = 1.0
    Xi[2:, 2] = make_xi(m, calib.tau)
    F = np.zeros((m + 2, m + 2))
    F[2:, 2:] = np.eye(m)
    Gamma_t = Xi @ rep.Gamma @ Xi.T + F
    try:
        M_t = np.linalg.solve(Gamma_t, Xi @ rep.Gamma @ rep.D.T).T
    except np.linalg.LinAlgError as exc:
        raise CalibrationError("Gamma tilde is singular") from exc
    R = rep.D - M_t @ Xi
    Sigma_t = R @ rep.Gamma @ R.T + rep.Sigma + M_t @ F @ M_t.T
    Si = inverse_sqrt(Sigma_t, "Sigma tilde")
    C_t = calib.T * Si @ M_t @ Gamma_t @ M_t.T @ Si
    C_t = 0.5 * (C_t + C_t.T)
    mu2_E = float(np.linalg.eigvalsh(C_t)[0])
    rep.Xi, rep.F, rep.Gamma_t, rep.M_t = Xi, F, Gamma_t, M_t
    rep.Sigma_t, rep.C_t, rep.mu2_E = Sigma_t, C_t, mu2_E
    return rep, mu2_E


def concentration_report(calib: DgpCalibration):
    """Both concentration parameters in one report."""
    return concentration_observed(calib)[0]


def table1_calibrations(base: DgpCalibration | None = None, levels=TABLE1_LEVELS):
    """The 27 design cells, ordered by ``a23`` panel, then ``a21``, then ``a22``."""
    base = base or DgpCalibration()
    return [replace(base, a23=a23, a21=a21, a22=a22)
            for a23 in levels for a21 in levels for a22 in levels]


def load_calibrations(path):
    """Read calibrations from JSON.

    Accepted layouts: one key-value object; a list of objects; or
    ``{"base": {...}, "cells": [{...}, ...]}`` where each cell overrides the
    base; or ``{"base": {...}, "table1": true}`` for the full design.
    """
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: invalid JSON ({exc})") from exc
    if isinstance(doc, list):
        return [DgpCalibration.from_dict(d) for d in doc]
    if not isinstance(doc, dict):
        raise ConfigurationError(f"{path}: expected an object or a list")
    if "base" in doc or "cells" in doc or "table1" in doc:
        base = DgpCalibration.from_dict(doc.get("base", {}))
        out = []
        if doc.get("table1"):
            out.extend(table1_calibrations(base))
        for cell in doc.get("cells", []):
            out.append(DgpCalibration.from_dict({**base.to_dict(), **cell}))
        if not out:
            out.append(base)
        return out
    return [DgpCalibration.from_dict(doc)]


def write_concentration_csv(calibs, path):
    """One row per calibration: ``a23, a21, a22, mu2_O, mu2_E``."""
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["a23", "a21", "a22", "mu2_O", "mu2_E"])
        for calib in calibs:
            rep = concentration_report(calib)
            w.writerow([calib.a23, calib.a21, calib.a22, f"{round(rep.mu2_O, 3) + 0.0:.3f}", f"{round(rep.mu2_E, 3) + 0.0:.3f}"])
    os.replace(tmp, path)
    return path


def _sqrt_psd(Omega):
    w, V = np.linalg.eigh(Omega)
    return V * np.sqrt(np.clip(w, 0.0, None))


def simulate_var(calib: DgpCalibration, rng, n_periods):
    """Simulate ``R_t`` from a zero state, discarding ``burn_in`` periods.

    Returns
    -------
    R : ndarray of shape (n_periods, 3)
    u : ndarray of shape (n_periods, 3)
        The innovations of the returned periods.
    """
    rng = as_generator(rng)
    Psi = psi_matrix(calib)
    n = calib.burn_in + n_periods
    u = rng.standard_normal((n, 3)) @ _sqrt_psd(calib.Omega).T
    R = np.zeros((n, 3))
    prev = np.zeros(3)
    for t in range(n):
        prev = Psi @ prev + u[t]
        R[t] = prev
    return R[calib.burn_in :], u[calib.burn_in :]


def simulate_dataset(calib: DgpCalibration, rng=None) -> EstimationProblem:
    """Simulate one dataset of ``T`` usable observations.

    The problem has dependent variable ``pi_t - pi_{t-1}``, endogenous
    regressors ``(pi_{t+1} - pi_{t-1}, s_t)`` (so ``theta = (gamma_f,
    lambda)``), a constant as the only exogenous covariate and standardised
    candidate instruments ``(pi_{t-1}, s_{t-1}, Q_{t-1})``. The oracle set
    ``(pi_{t-1}, s_{t-1}, f_{t-1})`` is kept separately.
    """
    rng = as_generator(calib.seed if rng is None else rng)
    T = calib.T
    R, _ = simulate_var(calib, rng, T + 2)
    xi = make_xi(calib.m, calib.tau)
    Q = np.outer(R[:, 2], xi) + rng.standard_normal((T + 2, calib.m))
    pi, s, f = R[:, 0], R[:, 1], R[:, 2]
    t = np.arange(1, T + 1)
    if np.ptp(pi[t - 1]) == 0.0:
        raise DataError("simulated inflation is constant; the design is degenerate")
    y = pi[t] - pi[t - 1]
    Y = np.column_stack([pi[t + 1] - pi[t - 1], s[t]])
    X = np.ones((T, 1))
    labels = ["pi.-1", "s.-1"] + [f"Q{q}.-1" for q in range(1, calib.m + 1)]
    Z = standardize_columns(np.column_stack([pi[t - 1], s[t - 1], Q[t - 1]]), labels)[0]
    oracle = np.column_stack([pi[t - 1], s[t - 1], f[t - 1]])
    return EstimationProblem(
        y=y, Y=Y, X=X, Z=Z, labels=labels, endog_names=("pi_lead", "s"),
        exog_names=("const",), oracle=oracle, oracle_labels=("pi.-1", "s.-1", "f.-1"),
        metadata={"cell": list(calib.cell())},
    )
