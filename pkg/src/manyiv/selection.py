"""Ad-hoc instrument selection: random draws, crude thresholding and LASSO.

All selectors return sorted, duplicate-free 0-based column indices. For
``p1`` endogenous variables each procedure picks ``floor(k_s / p1)``
instruments per variable and returns the union, which may be smaller than
``k_s`` when the per-variable choices overlap (it is not topped up).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.feature_selection import SelectorMixin
from sklearn.utils.validation import check_is_fitted

from manyiv._validation import as_generator, as_matrix, as_vector, check_positive_int
from manyiv.dataset import EstimationProblem, standardize_columns
from manyiv.exceptions import ConfigurationError, ConvergenceError, DataError

__all__ = [
    "CrudeThresholdSelector",
    "LassoFit",
    "LassoPathSelector",
    "RandomSelector",
    "SelectionSpec",
    "lasso_coordinate_descent",
    "lasso_path_select",
    "penalty_grid",
    "select_crude_threshold",
    "select_instruments",
    "select_lasso",
    "select_random",
]

METHODS = ("random", "crude_threshold", "lasso")
KKT_TOL = 1e-6


@dataclass(frozen=True)
class SelectionSpec:
    """Which selector to run and how many instruments to keep.

    Parameters
    ----------
    method : {"random", "crude_threshold", "lasso"}
    k_s : int, default=4
        Target number of selected instruments.
    seed : int, default=0
        Seed for ``random``.
    """

    method: str = "crude_threshold"
    k_s: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigurationError(f"unknown selection method {self.method!r}; use one of {METHODS}")
        check_positive_int(self.k_s, "k_s")

    def budget(self, p1):
        """Per-endogenous-variable budget ``floor(k_s / p1)``."""
        b = self.k_s // p1
        if b < 1:
            raise ConfigurationError(f"k_s={self.k_s} gives an empty budget for p1={p1}")
        return b


@dataclass
class LassoFit:
    """LASSO solution at one penalty.

    ``coef`` minimises ``||y - Z coef||^2 + penalty * ||coef||_1``.
    """

    coef: np.ndarray
    penalty: float
    active: list = field(default_factory=list)
    kkt_violation: float = 0.0
    n_sweeps: int = 0


def _check_k(k, k_s):
    if k_s > k:
        raise ConfigurationError(f"k_s={k_s} exceeds the number of instruments k={k}")


def select_random(k, spec: SelectionSpec, rng=None):
    """Uniform draw of ``k_s`` of ``k`` indices without replacement, sorted.

    ``rng`` defaults to a generator seeded with ``spec.seed``.
    """
    k = check_positive_int(k, "k")
    _check_k(k, spec.k_s)
    rng = as_generator(spec.seed if rng is None else rng)
    return np.sort(rng.choice(k, size=spec.k_s, replace=False))


def _standardize_y(Y):
    Y = as_matrix(Y, "Y")
    sd = Y.std(axis=0)
    if np.any(sd == 0):
        raise DataError("an endogenous variable has zero variance")
    return (Y - Y.mean(axis=0)) / sd


def select_crude_threshold(Y, Z, spec: SelectionSpec, labels=None, *, absolute=False):
    """Top ``floor(k_s/p1)`` instruments by ``corr(Y_r, Z_j)`` for each ``r``, united.

    Instruments are sorted in descending order of their sample correlation
    with each endogenous variable, so strongly negatively correlated columns
    rank last. ``absolute=True`` ranks by ``|corr|`` instead. Ties are
    resolved in favour of the lower column index.
    """
    Ys = _standardize_y(Y)
    Zs = standardize_columns(Z, labels)[0]
    if Ys.shape[0] != Zs.shape[0]:
        raise DataError("Y and Z have different numbers of rows")
    _check_k(Zs.shape[1], spec.k_s)
    budget = spec.budget(Ys.shape[1])
    corr = Zs.T @ Ys / Ys.shape[0]  # k x p1
    if absolute:
        corr = np.abs(corr)
    chosen = set()
    for r in range(Ys.shape[1]):
        chosen.update(np.argsort(-corr[:, r], kind="stable")[:budget].tolist())
    return np.array(sorted(chosen), dtype=int)


def penalty_grid(Z, y, n_points=100, ratio=1e-3):
    """Geometric grid from ``2 max_j |Z_j'y|`` down by ``ratio``."""
    lam_max = 2.0 * np.max(np.abs(Z.T @ y))
    return lam_max * np.geomspace(1.0, ratio, n_points)


def lasso_coordinate_descent(Z, y, penalty, coef=None, *, max_sweeps=10_000, tol=1e-9):
    """Cyclic coordinate descent for ``||y - Z b||^2 + penalty ||b||_1``.

    Sweeps the current active set to convergence, then confirms with a full
    sweep; stops when a full sweep changes no coefficient by more than ``tol``.

    Returns
    -------
    LassoFit
    """
    Z = as_matrix(Z, "Z")
    y = as_vector(y, "y")
    k = Z.shape[1]
    b = np.zeros(k) if coef is None else np.array(coef, dtype=float)
    col_sq = np.einsum("tj,tj->j", Z, Z)
    if np.any(col_sq == 0):
        raise DataError("zero column in Z")
    half = 0.5 * penalty
    r = y - Z @ b
    sweeps = 0

    def sweep(idx):
        nonlocal r
        delta_max = 0.0
        for j in idx:
            zj = Z[:, j]
            rho = zj @ r + col_sq[j] * b[j]
            new = np.sign(rho) * max(abs(rho) - half, 0.0) / col_sq[j]
            d = new - b[j]
            if d != 0.0:
                r = r - d * zj
                b[j] = new
                delta_max = max(delta_max, abs(d))
        return delta_max

    while True:
        full = sweep(range(k))
        sweeps += 1
        if full <= tol:
            break
        while sweeps < max_sweeps:
            active = np.flatnonzero(b)
            sweeps += 1
            if sweep(active) <= tol:
                break
        if sweeps >= max_sweeps:
            raise ConvergenceError(
                f"coordinate descent did not converge in {max_sweeps} sweeps",
                trace=[("penalty", penalty), ("last_change", full)],
            )
    grad = Z.T @ (y - Z @ b)
    active = np.flatnonzero(b).tolist()
    inactive = np.ones(k, dtype=bool)
    inactive[active] = False
    viol = np.abs(grad[inactive]) - half
    viol_active = np.abs(2.0 * grad[active] - penalty * np.sign(b[active])) / 2.0
    worst = max(viol.max(initial=0.0), viol_active.max(initial=0.0), 0.0)
    return LassoFit(b, float(penalty), active, float(worst), sweeps)


def lasso_path_select(y, Z, budget, *, n_points=100, ratio=1e-3, max_sweeps=10_000, tol=1e-9):
    """Walk the LASSO path until at least ``budget`` coefficients are nonzero.

    ``y`` and the columns of ``Z`` are standardised first. Returns the first
    grid point whose active set has ``budget`` or more members, truncated to
    the ``budget`` largest ``|coef|`` when the path jumps past it.

    Returns
    -------
    indices : ndarray of int
    fit : LassoFit
        Fit at the selected penalty (before truncation).
    """
    Zs = standardize_columns(Z)[0]
    ys = _standardize_y(y)[:, 0]
    budget = check_positive_int(budget, "budget")
    if budget > min(Zs.shape):
        raise ConfigurationError(f"budget={budget} exceeds min(T, k)={min(Zs.shape)}")
    coef = np.zeros(Zs.shape[1])
    fit = None
    for lam in penalty_grid(Zs, ys, n_points, ratio):
        fit = lasso_coordinate_descent(Zs, ys, lam, coef, max_sweeps=max_sweeps, tol=tol)
        coef = fit.coef
        if len(fit.active) >= budget:
            break
    mags = np.abs(fit.coef)
    order = np.lexsort((np.arange(mags.size), -mags))
    keep = [j for j in order[:budget] if mags[j] > 0]
    return np.array(sorted(keep), dtype=int), fit


def select_lasso(Y, Z, spec: SelectionSpec, **kwargs):
    """Union over endogenous variables of :func:`lasso_path_select`."""
    Y = as_matrix(Y, "Y")
    Z = as_matrix(Z, "Z")
    _check_k(Z.shape[1], spec.k_s)
    budget = spec.budget(Y.shape[1])
    chosen = set()
    for r in range(Y.shape[1]):
        idx, _ = lasso_path_select(Y[:, r], Z, budget, **kwargs)
        chosen.update(idx.tolist())
    return np.array(sorted(chosen), dtype=int)


def select_instruments(problem: EstimationProblem, spec: SelectionSpec, rng=None):
    """Run the selector named by ``spec`` on ``problem`` (``Y`` against ``Z``)."""
    if spec.k_s < problem.p1:
        raise ConfigurationError(f"k_s={spec.k_s} is smaller than p1={problem.p1}")
    if spec.method == "random":
        return select_random(problem.k, spec, rng)
    if spec.method == "crude_threshold":
        return select_crude_threshold(problem.Y, problem.Z, spec, problem.labels)
    return select_lasso(problem.Y, problem.Z, spec)


class _BaseSelector(SelectorMixin, BaseEstimator):
    def _get_support_mask(self):
        check_is_fitted(self, "indices_")
        mask = np.zeros(self.n_features_in_, dtype=bool)
        mask[self.indices_] = True
        return mask


class CrudeThresholdSelector(_BaseSelector):
    """Select instruments by their correlation with the targets ``y``.

    Parameters
    ----------
    k_s : int, default=4
    absolute : bool, default=False
        Rank by absolute rather than signed correlation.

    Attributes
    ----------
    indices_ : ndarray of int
    """

    def __init__(self, k_s=4, absolute=False):
        self.k_s = k_s
        self.absolute = absolute

    def fit(self, X, y):
        X = as_matrix(X, "X")
        self.indices_ = select_crude_threshold(y, X, SelectionSpec("crude_threshold", self.k_s),
                                               absolute=self.absolute)
        self.n_features_in_ = X.shape[1]
        return self


class LassoPathSelector(_BaseSelector):
    """Select instruments along the LASSO path of each target column.

    Parameters
    ----------
    k_s : int, default=4
    """

    def __init__(self, k_s=4):
        self.k_s = k_s

    def fit(self, X, y):
        X = as_matrix(X, "X")
        self.indices_ = select_lasso(y, X, SelectionSpec("lasso", self.k_s))
        self.n_features_in_ = X.shape[1]
        return self


class RandomSelector(_BaseSelector):
    """Uniformly random instrument subset.

    Parameters
    ----------
    k_s : int, default=4
    random_state : int, Generator or None
    """

    def __init__(self, k_s=4, random_state=None):
        self.k_s = k_s
        self.random_state = random_state

    def fit(self, X, y=None):
        X = as_matrix(X, "X")
        rng = as_generator(self.random_state)
        self.indices_ = select_random(X.shape[1], SelectionSpec("random", self.k_s), rng)
        self.n_features_in_ = X.shape[1]
        return self
