"""Stock-Wright S statistic (CUE objective) with HAC weighting.

The moment conditions are linear in every coefficient, so for residuals
``u_t(d) = a_t - b_t'd`` the HAC matrix of ``Z_t u_t(d)`` is a quadratic form
in ``c = (1, -d)``. :class:`LinearCUE` precomputes the stacked long-run
covariance once and then evaluates the objective and its gradient in
``O(k^2)`` per point, which keeps concentration and the overidentification
search cheap enough for Monte Carlo work.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, special
from sklearn.base import BaseEstimator

from manyiv._validation import as_matrix, as_vector, check_alpha
from manyiv.dataset import EstimationProblem
from manyiv.exceptions import ConfigurationError, ConvergenceError, DataError, SingularityError
from manyiv.hac import DEFAULT_LAG, hac_covariance

__all__ = [
    "LinearCUE",
    "SStatConfig",
    "STest",
    "TestResult",
    "chi_square_quantile",
    "concentrated_s",
    "inverse_weight",
    "moment_instruments",
    "robust_overid",
    "s_objective",
    "s_statistic",
    "s_test",
]

EIGEN_FLOOR = 1e-12


@dataclass(frozen=True)
class SStatConfig:
    """Settings of the S test.

    Parameters
    ----------
    hac_lag : int, default=4
        Bartlett truncation lag of the weight matrix.
    alpha : float, default=0.1
    concentrate : tuple of str or None, default=None
        Exogenous coefficients minimised out of the objective; ``None``
        concentrates every column of ``X``. Columns not concentrated are
        held at zero.
    df_adjustment : {"all", "intercept"}, default="all"
        Which concentrated coefficients lower the chi-square degrees of
        freedom below the number of moment conditions. ``"all"`` gives the
        textbook ``K - p2``, which equals the number of selected instruments
        when every column of ``X`` is also an instrument; ``"intercept"``
        only discounts constant columns, a conservative bound.
    tol : float, default=1e-7
        Gradient tolerance of the local optimiser.
    max_iter : int, default=500
    overid_grid : tuple of (start, stop, step) triples, optional
        Starting lattice for the overidentification search over ``theta``.
    overid_starts : int, default=3
        Number of lattice points polished by local search.
    centered : bool, default=True
        Centre moments inside the HAC estimator.
    """

    hac_lag: int = DEFAULT_LAG
    alpha: float = 0.1
    concentrate: tuple | None = None
    df_adjustment: str = "all"
    tol: float = 1e-7
    max_iter: int = 500
    overid_grid: tuple | None = ((-0.5, 1.5, 0.1), (-0.5, 1.0, 0.1))
    overid_starts: int = 3
    centered: bool = True

    def __post_init__(self):
        check_alpha(self.alpha)
        if isinstance(self.hac_lag, bool) or int(self.hac_lag) != self.hac_lag or self.hac_lag < 0:
            raise ConfigurationError(f"hac_lag must be a nonnegative integer, got {self.hac_lag!r}")
        if self.df_adjustment not in ("intercept", "all"):
            raise ConfigurationError(f"unknown df_adjustment {self.df_adjustment!r}")
        if not self.tol > 0:
            raise ConfigurationError("tol must be positive")
        if self.concentrate is not None:
            object.__setattr__(self, "concentrate", tuple(self.concentrate))


@dataclass
class TestResult:
    """Outcome of a hypothesis test; ``reject`` is ``statistic > critical_value``."""

    statistic: float
    critical_value: float
    alpha: float
    df_or_method: object
    extras: dict = field(default_factory=dict)

    __test__ = False  # not a pytest class

    @property
    def reject(self):
        return bool(self.statistic > self.critical_value)

    def as_dict(self):
        return {
            "statistic": self.statistic,
            "critical_value": self.critical_value,
            "reject": self.reject,
            "alpha": self.alpha,
            "df_or_method": self.df_or_method,
        }


# ---------------------------------------------------------------------------
# core objective
# ---------------------------------------------------------------------------


def inverse_weight(S):
    """Inverse of a symmetric PSD matrix via ``eigh`` with a relative floor.

    Raises
    ------
    SingularityError
        When the smallest eigenvalue is below ``1e-12`` times the largest.
    """
    w, V = np.linalg.eigh(S)
    top = w[-1]
    if not top > 0 or w[0] < EIGEN_FLOOR * top:
        cond = np.inf if w[0] <= 0 else top / w[0]
        raise SingularityError("HAC weight matrix is numerically singular", condition_number=cond)
    return (V / w) @ V.T


def s_objective(Zs, eps, hac_lag=DEFAULT_LAG, *, centered=True):
    """``T * g' W g`` with ``g = Z's eps / T`` and ``W`` the inverse HAC."""
    Zs = as_matrix(Zs, "Zs")
    eps = as_vector(eps, "eps")
    if Zs.shape[0] != eps.shape[0]:
        raise DataError(f"Zs has {Zs.shape[0]} rows but eps has {eps.shape[0]}")
    m = Zs * eps[:, None]
    g = m.mean(axis=0)
    if not np.any(g):
        return 0.0
    W = inverse_weight(hac_covariance(m, hac_lag, centered=centered))
    return float(max(Zs.shape[0] * g @ W @ g, 0.0))


class LinearCUE:
    """CUE objective for moments ``Z_t (a_t - b_t'd)``.

    Parameters
    ----------
    Z : ndarray of shape (T, K)
    a : ndarray of shape (T,)
    B : ndarray of shape (T, d)
    hac_lag : int
    """

    def __init__(self, Z, a, B, hac_lag=DEFAULT_LAG, centered=True):
        Z = as_matrix(Z, "Z")
        U = np.column_stack([as_vector(a, "a"), as_matrix(B, "B", allow_empty=True)])
        self.T, self.K = Z.shape
        self.n = U.shape[1]
        V = (Z[:, None, :] * U[:, :, None]).reshape(self.T, self.n * self.K)
        self.G = V.mean(axis=0).reshape(self.n, self.K).T  # K x n
        big = hac_covariance(V, hac_lag, centered=centered)
        self.H = big.reshape(self.n, self.K, self.n, self.K).transpose(0, 2, 1, 3).copy()

    def _coef(self, d):
        return np.concatenate([[1.0], -np.atleast_1d(np.asarray(d, dtype=float))])

    def value(self, d):
        c = self._coef(d)
        g = self.G @ c
        H = np.einsum("i,j,ijkl->kl", c, c, self.H)
        return float(max(self.T * g @ inverse_weight(H) @ g, 0.0))

    def value_and_grad(self, d):
        c = self._coef(d)
        g = self.G @ c
        Hc = np.einsum("j,ijkl->ikl", c, self.H)
        H = np.einsum("i,ikl->kl", c, Hc)
        q = inverse_weight(H) @ g
        val = self.T * g @ q
        grad_c = 2.0 * self.G.T @ q - 2.0 * np.einsum("k,ikl,l->i", q, Hc, q)
        return float(max(val, 0.0)), -self.T * grad_c[1:]

    def values(self, D):
        """Objective at every row of ``D`` (shape ``(m, d)``); singular points give ``inf``."""
        D = np.atleast_2d(np.asarray(D, dtype=float))
        C = np.column_stack([np.ones(D.shape[0]), -D])
        g = C @ self.G.T
        H = np.einsum("mi,mj,ijkl->mkl", C, C, self.H)
        w, V = np.linalg.eigh(H)
        ok = (w[:, -1] > 0) & (w[:, 0] >= EIGEN_FLOOR * w[:, -1])
        w = np.where(ok[:, None], w, 1.0)
        proj = np.einsum("mkl,mk->ml", V, g)
        out = self.T * np.sum(proj**2 / w, axis=1)
        return np.where(ok, np.maximum(out, 0.0), np.inf)

    def minimize(self, start, tol=1e-8, max_iter=500):
        """Local minimisation with BFGS, falling back to Nelder-Mead.

        Returns
        -------
        value : float
        argmin : ndarray
        """
        start = np.atleast_1d(np.asarray(start, dtype=float))
        if start.size == 0:
            return self.value(start), start
        trace = []
        best_val, best = np.inf, start
        try:
            res = optimize.minimize(self.value_and_grad, start, jac=True, method="BFGS",
                                    options={"gtol": tol, "maxiter": max_iter})
            trace.append(("BFGS", res.status, res.fun, res.message))
            # precision loss right at a stationary point is the usual outcome
            if res.success or np.linalg.norm(res.jac) < 1e-3 * max(1.0, abs(res.fun)):
                return float(res.fun), res.x
            if np.isfinite(res.fun):
                best_val, best = float(res.fun), res.x
        except SingularityError as exc:
            trace.append(("BFGS", "singular", np.nan, str(exc)))

        def safe(d):
            try:
                return self.value(d)
            except SingularityError:
                return np.inf

        budget = 1000 * start.size
        res = optimize.minimize(safe, best, method="Nelder-Mead",
                                options={"xatol": 1e-8, "fatol": 1e-10,
                                         "maxiter": budget, "maxfev": budget})
        trace.append(("Nelder-Mead", res.status, res.fun, res.message))
        if not res.success or not np.isfinite(res.fun):
            raise ConvergenceError("CUE minimisation did not converge", trace=trace)
        if best_val < res.fun:
            return best_val, best
        return float(res.fun), res.x


# ---------------------------------------------------------------------------
# problem-level helpers
# ---------------------------------------------------------------------------


def moment_instruments(problem: EstimationProblem, selected=None):
    """Instrument matrix ``[X, Z_s]`` used in the S moments (``Z_s`` if ``p2 = 0``)."""
    Zs = problem.Z if selected is None else problem.Z[:, list(selected)]
    if problem.p2:
        return np.column_stack([problem.X, Zs])
    return Zs


def _concentrated_columns(problem, config):
    if config.concentrate is None:
        return list(range(problem.p2))
    names = list(problem.exog_names)
    unknown = [c for c in config.concentrate if c not in names]
    if unknown:
        raise ConfigurationError(f"unknown exogenous coefficients {unknown}; have {names}")
    return [names.index(c) for c in config.concentrate]


def _degrees_of_freedom(problem, K, conc, config):
    if config.df_adjustment == "all":
        reduce = len(conc)
    else:
        X = problem.X
        reduce = sum(1 for j in conc if np.ptp(X[:, j]) == 0.0)
    return K - reduce


def _theta(problem, theta0):
    theta0 = np.atleast_1d(np.asarray(theta0, dtype=float))
    if theta0.shape != (problem.p1,):
        raise DataError(f"theta0 must have {problem.p1} entries, got shape {theta0.shape}")
    return theta0


def s_statistic(problem: EstimationProblem, theta0, *, selected=None, beta_x=None,
                config: SStatConfig | None = None):
    """S statistic at ``theta0`` with the exogenous coefficients fixed.

    ``beta_x`` defaults to zero, which is the natural value for a partialled
    problem. Instruments are :func:`moment_instruments`.
    """
    config = config or SStatConfig()
    eps = problem.residual(_theta(problem, theta0))
    if problem.p2:
        b = np.zeros(problem.p2) if beta_x is None else np.asarray(beta_x, dtype=float).ravel()
        eps = eps - problem.X @ b
    return s_objective(moment_instruments(problem, selected), eps, config.hac_lag,
                       centered=config.centered)


def _plugin_beta(problem, eps, conc):
    """Least-squares (= 2SLS, since X instruments itself) start for ``beta_X``."""
    Xc = problem.X[:, conc]
    return np.linalg.lstsq(Xc, eps, rcond=None)[0]


def concentrated_s(problem: EstimationProblem, theta0, config: SStatConfig | None = None,
                   *, selected=None):
    """Minimum of the S statistic over the concentrated exogenous coefficients.

    Returns
    -------
    value : float
    beta : ndarray
        Minimiser, indexed like the concentrated columns of ``X``.
    """
    config = config or SStatConfig()
    theta0 = _theta(problem, theta0)
    conc = _concentrated_columns(problem, config) if problem.p2 else []
    if not conc:
        return s_statistic(problem, theta0, selected=selected, config=config), np.zeros(0)
    eps = problem.residual(theta0)
    Zs = moment_instruments(problem, selected)
    cue = LinearCUE(Zs, eps, problem.X[:, conc], config.hac_lag, config.centered)
    start = _plugin_beta(problem, eps, conc)
    value, beta = cue.minimize(start, config.tol, config.max_iter)
    return value, beta


def chi_square_quantile(df, p):
    """Quantile of the chi-square distribution by bracketing inversion.

    Solves ``P(df/2, x/2) = p`` for the regularised lower incomplete gamma
    ``P`` with ``brentq`` to an absolute tolerance well below ``1e-8``.
    """
    if isinstance(df, bool) or int(df) != df or df < 1:
        raise ConfigurationError(f"df must be a positive integer, got {df!r}")
    if not 0.0 < p < 1.0:
        raise ConfigurationError(f"p must lie in (0, 1), got {p!r}")
    a = 0.5 * df

    def f(x):
        return special.gammainc(a, 0.5 * x) - p

    hi = max(2.0 * df, 1.0)
    while f(hi) < 0:
        hi *= 2.0
    return float(optimize.brentq(f, 0.0, hi, xtol=1e-12, rtol=4 * np.finfo(float).eps, maxiter=500))


def s_test(problem: EstimationProblem, theta0, config: SStatConfig | None = None, *, selected=None):
    """S test of ``H0: theta = theta0`` against the chi-square bound."""
    config = config or SStatConfig()
    theta0 = _theta(problem, theta0)
    conc = _concentrated_columns(problem, config) if problem.p2 else []
    value, beta = concentrated_s(problem, theta0, config, selected=selected)
    K = moment_instruments(problem, selected).shape[1]
    df = _degrees_of_freedom(problem, K, conc, config)
    if df < 1:
        raise ConfigurationError(f"no degrees of freedom left (K={K})")
    crit = chi_square_quantile(df, 1.0 - config.alpha)
    names = [problem.exog_names[j] for j in conc]
    return TestResult(value, crit, config.alpha, df,
                      {"beta_x": dict(zip(names, map(float, beta))), "n_moments": K})


def _lattice(grid):
    axes = [np.arange(lo, hi + 0.5 * st, st) for lo, hi, st in grid]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.column_stack([m.ravel() for m in mesh])


def robust_overid(problem: EstimationProblem, config: SStatConfig | None = None, *, selected=None):
    """Weak-identification-robust overidentification test.

    The S statistic is minimised jointly over ``theta`` and the concentrated
    exogenous coefficients and compared with the same chi-square bound as
    :func:`s_test`. The search starts from a lattice over ``theta`` (with
    ``beta_X`` at its least-squares value) plus the 2SLS estimate, and the
    best starts are polished by local search.
    """
    config = config or SStatConfig()
    conc = _concentrated_columns(problem, config) if problem.p2 else []
    Zs = moment_instruments(problem, selected)
    K = Zs.shape[1]
    df = _degrees_of_freedom(problem, K, conc, config)
    if df < 1:
        raise ConfigurationError(f"no degrees of freedom left (K={K})")
    crit = chi_square_quantile(df, 1.0 - config.alpha)
    p1, nc = problem.p1, len(conc)
    Xc = problem.X[:, conc]
    B = np.column_stack([problem.Y, Xc])
    if K <= p1 + nc:
        # exactly (or under) identified: the moments can be set to zero
        return TestResult(0.0, crit, config.alpha, df, {"identified": "exact", "n_moments": K})
    cue = LinearCUE(Zs, problem.y, B, config.hac_lag, config.centered)

    # 2SLS start
    P = Zs @ np.linalg.lstsq(Zs, B, rcond=None)[0]
    starts = [np.linalg.lstsq(P, problem.y, rcond=None)[0]]
    if config.overid_grid is not None and len(config.overid_grid) == p1:
        thetas = _lattice(config.overid_grid)
        resid = problem.y[None, :] - thetas @ problem.Y.T
        if nc:
            betas = np.linalg.lstsq(Xc, resid.T, rcond=None)[0].T
            D = np.column_stack([thetas, betas])
        else:
            D = thetas
        vals = cue.values(D)
        order = np.argsort(vals, kind="stable")[: config.overid_starts]
        starts.extend(D[i] for i in order if np.isfinite(vals[i]))

    best_val, best_d, failures = np.inf, None, []
    for start in starts:
        try:
            val, d = cue.minimize(start, config.tol, config.max_iter)
        except (ConvergenceError, SingularityError) as exc:
            failures.append(str(exc))
            continue
        if val < best_val:
            best_val, best_d = val, d
    if best_d is None:
        raise ConvergenceError("overidentification search failed from every start", trace=failures)
    names = [problem.exog_names[j] for j in conc]
    extras = {"theta": best_d[:p1].tolist(),
              "beta_x": dict(zip(names, map(float, best_d[p1:]))), "n_moments": K}
    return TestResult(best_val, crit, config.alpha, df, extras)


class STest(BaseEstimator):
    """Estimator wrapper around the S test with a fixed instrument selection.

    ``fit`` stores the problem and computes the CUE estimate (the minimiser
    of the S statistic); :meth:`test` evaluates ``H0: theta = theta0``.

    Parameters
    ----------
    alpha, hac_lag, concentrate, df_adjustment :
        See :class:`SStatConfig`.
    selected : sequence of int, optional
        Columns of ``Z`` used as excluded instruments (default all).

    Attributes
    ----------
    coef_ : ndarray of shape (p1,)
        CUE estimate of ``theta``.
    overid_ : TestResult
    """

    def __init__(self, alpha=0.1, hac_lag=DEFAULT_LAG, concentrate=None,
                 df_adjustment="all", selected=None):
        self.alpha = alpha
        self.hac_lag = hac_lag
        self.concentrate = concentrate
        self.df_adjustment = df_adjustment
        self.selected = selected

    def _config(self):
        return SStatConfig(hac_lag=self.hac_lag, alpha=self.alpha, concentrate=self.concentrate,
                           df_adjustment=self.df_adjustment)

    def fit(self, problem: EstimationProblem, y=None):
        if not isinstance(problem, EstimationProblem):
            raise DataError("STest.fit expects an EstimationProblem")
        self.problem_ = problem
        self.overid_ = robust_overid(problem, self._config(), selected=self.selected)
        theta = self.overid_.extras.get("theta")
        self.coef_ = np.asarray(theta) if theta is not None else np.full(problem.p1, np.nan)
        return self

    def test(self, theta0):
        from sklearn.utils.validation import check_is_fitted

        check_is_fitted(self, "problem_")
        return s_test(self.problem_, theta0, self._config(), selected=self.selected)
