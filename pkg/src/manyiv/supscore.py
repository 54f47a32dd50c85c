"""Sup Score test with a block multiplier bootstrap for dependent data.

The statistic is the largest absolute normalised score across all
instruments, ``R = max_j |T^-1/2 Z_j' eps0|``. Its critical value comes from
multiplying demeaned block sums of the score contributions by Gaussian
weights.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from manyiv._validation import as_generator, as_matrix, as_vector, check_alpha, check_positive_int, substream
from manyiv.dataset import EstimationProblem, standardize_columns
from manyiv.exceptions import ConfigurationError, DataError

__all__ = [
    "SupScoreBatch",
    "SupScoreConfig",
    "SupScoreOutcome",
    "SupScoreTest",
    "block_sums",
    "bootstrap_critical_value",
    "order_statistic_index",
    "sup_score_statistic",
    "sup_score_test",
    "write_bootstrap_draws",
]


@dataclass(frozen=True)
class SupScoreConfig:
    """Settings of the Sup Score test.

    Parameters
    ----------
    block_length : int, default=4
        ``b_T``; the number of blocks is ``l_T = floor(T / b_T)``.
    bootstrap_draws : int, default=500
        ``B``.
    alpha : float, default=0.1
    seed : int, default=0
        Seed of the multiplier draws.
    keep_draws : bool, default=False
        Retain the ``B`` bootstrap statistics on the outcome.
    """

    block_length: int = 4
    bootstrap_draws: int = 500
    alpha: float = 0.1
    seed: int = 0
    keep_draws: bool = False

    def __post_init__(self):
        check_positive_int(self.block_length, "block_length")
        check_positive_int(self.bootstrap_draws, "bootstrap_draws")
        check_alpha(self.alpha)
        if isinstance(self.seed, bool) or int(self.seed) != self.seed or self.seed < 0:
            raise ConfigurationError(f"seed must be a nonnegative integer, got {self.seed!r}")


@dataclass
class SupScoreOutcome:
    """Result of one Sup Score test."""

    statistic: float
    critical_value: float
    alpha: float
    argmax_index: int
    argmax_label: str | None = None
    bootstrap_draws: np.ndarray | None = field(default=None, repr=False)

    @property
    def reject(self):
        return bool(self.statistic > self.critical_value)

    def as_dict(self):
        return {
            "statistic": self.statistic,
            "critical_value": self.critical_value,
            "reject": self.reject,
            "alpha": self.alpha,
            "argmax_label": self.argmax_label,
        }


def _check_pair(Z, eps0):
    Z = as_matrix(Z, "Z")
    eps0 = as_vector(eps0, "eps0")
    if Z.shape[0] != eps0.shape[0]:
        raise DataError(f"Z has {Z.shape[0]} rows but eps0 has {eps0.shape[0]}")
    return Z, eps0


def sup_score_statistic(Z, eps0):
    """``max_j |Z_j' eps0| / sqrt(T)`` and the (0-based) maximising column.

    Ties go to the lowest column index.
    """
    Z, eps0 = _check_pair(Z, eps0)
    scores = np.abs(Z.T @ eps0) / math.sqrt(Z.shape[0])
    j = int(np.argmax(scores))
    return float(scores[j]), j


def block_sums(Z, eps0, block_length):
    """Demeaned block sums ``A_tj`` of the products ``Z_tj eps0_t``.

    Each of the ``l_T = floor(T / b_T)`` consecutive blocks contributes its
    sum minus the full-sample mean of the products (the mean runs over all
    ``T`` observations, including a trailing incomplete block).

    Returns
    -------
    ndarray of shape (l_T, k)
    """
    Z, eps0 = _check_pair(Z, eps0)
    T = Z.shape[0]
    b = check_positive_int(block_length, "block_length")
    if b > T:
        raise ConfigurationError(f"block_length={b} exceeds T={T}")
    prod = Z * eps0[:, None]
    n_blocks = T // b
    sums = prod[: n_blocks * b].reshape(n_blocks, b, -1).sum(axis=1)
    return sums - prod.mean(axis=0)


def order_statistic_index(alpha, B):
    """0-based position of the ``ceil((1 - alpha) B)``-th order statistic."""
    return max(int(math.ceil((1.0 - alpha) * B - 1e-12)), 1) - 1


def _multipliers(rng, B, n_blocks):
    return as_generator(rng).standard_normal((B, n_blocks))


def bootstrap_critical_value(A, alpha, B, rng, n_obs, *, return_draws=False):
    """Multiplier-bootstrap critical value.

    Parameters
    ----------
    A : ndarray of shape (l_T, k)
        Block sums from :func:`block_sums`.
    alpha : float
    B : int
        Number of multiplier draws.
    rng : Generator, SeedSequence or int
    n_obs : int
        Sample size ``T`` used in the ``T^-1/2`` normalisation.
    return_draws : bool, default=False
        Also return the ``B`` bootstrap statistics.

    Returns
    -------
    float, or (float, ndarray) when ``return_draws`` is true
    """
    A = as_matrix(A, "A")
    alpha = check_alpha(alpha)
    B = check_positive_int(B, "B")
    n_obs = check_positive_int(n_obs, "n_obs")
    E = _multipliers(rng, B, A.shape[0])
    draws = np.max(np.abs(E @ A), axis=1) / math.sqrt(n_obs)
    crit = float(np.partition(draws, order_statistic_index(alpha, B))[order_statistic_index(alpha, B)])
    if return_draws:
        return crit, draws
    return crit


def _prepare(problem: EstimationProblem):
    if problem.p2 and not problem.partialled:
        problem = problem.to_partialled()
    Z = problem.Z
    if Z.shape[1] == 0:
        raise DataError("Sup Score test needs at least one instrument")
    means = np.abs(Z.mean(axis=0)).max()
    sds = np.sqrt(np.mean((Z - Z.mean(axis=0)) ** 2, axis=0))
    if means > 1e-8 or np.abs(sds - 1.0).max() > 1e-8:
        Z = standardize_columns(Z, problem.labels)[0]
    return problem, Z


def sup_score_test(problem: EstimationProblem, theta0, config: SupScoreConfig | None = None):
    """Sup Score test of ``H0: theta = theta0``.

    A problem that has not been partialled is projected on ``M_X`` first,
    and instruments are standardised when they are not already.
    """
    config = config or SupScoreConfig()
    return SupScoreBatch(problem, config).test(theta0)


class SupScoreBatch:
    """Sup Score tests of many hypotheses on one dataset.

    Residuals are linear in ``theta``, so scores and block sums for any
    ``theta0`` are linear combinations of precomputed pieces. Every
    hypothesis uses the same multiplier draws (derived from
    ``config.seed``), which makes confidence sets nested in ``alpha``.
    """

    def __init__(self, problem: EstimationProblem, config: SupScoreConfig | None = None):
        self.config = config or SupScoreConfig()
        problem, Z = _prepare(problem)
        self.problem = problem
        T = problem.n_obs
        if self.config.block_length > T:
            raise ConfigurationError(f"block_length={self.config.block_length} exceeds T={T}")
        self.T = T
        self.labels = problem.labels
        U = np.column_stack([problem.y, problem.Y])  # eps0 = U @ (1, -theta)
        self._scores = Z.T @ U / math.sqrt(T)  # k x (1 + p1)
        self._blocks = np.stack([block_sums(Z, U[:, i], self.config.block_length)
                                 for i in range(U.shape[1])])  # (1+p1, l_T, k)
        E = _multipliers(substream(self.config.seed), self.config.bootstrap_draws,
                         self._blocks.shape[1])
        self._boot = np.einsum("bl,ilk->ibk", E, self._blocks) / math.sqrt(T)

    def _coef(self, theta0):
        theta0 = np.atleast_1d(np.asarray(theta0, dtype=float))
        if theta0.shape != (self.problem.p1,):
            raise DataError(f"theta0 must have {self.problem.p1} entries")
        return np.concatenate([[1.0], -theta0])

    def test(self, theta0, alpha=None):
        alpha = self.config.alpha if alpha is None else check_alpha(alpha)
        c = self._coef(theta0)
        scores = np.abs(self._scores @ c)
        j = int(np.argmax(scores))
        draws = np.max(np.abs(np.tensordot(c, self._boot, axes=1)), axis=1)
        pos = order_statistic_index(alpha, draws.shape[0])
        crit = float(np.partition(draws, pos)[pos])
        return SupScoreOutcome(float(scores[j]), crit, alpha, j, self.labels[j],
                               draws if self.config.keep_draws else None)

    def test_many(self, thetas, alpha=None, chunk=256):
        """Vectorised tests; returns ``(statistic, critical_value, argmax)`` arrays."""
        alpha = self.config.alpha if alpha is None else check_alpha(alpha)
        thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
        C = np.column_stack([np.ones(len(thetas)), -thetas])
        stat = np.empty(len(C))
        crit = np.empty(len(C))
        arg = np.empty(len(C), dtype=int)
        B = self._boot.shape[1]
        pos = order_statistic_index(alpha, B)
        for lo in range(0, len(C), chunk):
            Cc = C[lo : lo + chunk]
            sc = np.abs(Cc @ self._scores.T)
            arg[lo : lo + chunk] = np.argmax(sc, axis=1)
            stat[lo : lo + chunk] = sc[np.arange(len(Cc)), arg[lo : lo + chunk]]
            draws = np.max(np.abs(np.einsum("mi,ibk->mbk", Cc, self._boot)), axis=2)
            crit[lo : lo + chunk] = np.partition(draws, pos, axis=1)[:, pos]
        return stat, crit, arg


def write_bootstrap_draws(outcome: SupScoreOutcome, path):
    """Write the retained bootstrap statistics, one row per replicate."""
    if outcome.bootstrap_draws is None:
        raise ConfigurationError("outcome has no retained draws (set keep_draws=True)")
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["replicate", "L"])
        for i, v in enumerate(outcome.bootstrap_draws):
            w.writerow([i, repr(float(v))])
    os.replace(tmp, path)
    return path


class SupScoreTest(BaseEstimator):
    """Estimator-style wrapper: ``fit`` a problem, then ``test`` hypotheses.

    Parameters
    ----------
    block_length, bootstrap_draws, alpha, seed :
        See :class:`SupScoreConfig`.
    """

    def __init__(self, block_length=4, bootstrap_draws=500, alpha=0.1, seed=0):
        self.block_length = block_length
        self.bootstrap_draws = bootstrap_draws
        self.alpha = alpha
        self.seed = seed

    def fit(self, problem: EstimationProblem, y=None):
        config = SupScoreConfig(self.block_length, self.bootstrap_draws, self.alpha, self.seed)
        self.batch_ = SupScoreBatch(problem, config)
        self.n_features_in_ = problem.k
        return self

    def test(self, theta0):
        check_is_fitted(self, "batch_")
        return self.batch_.test(theta0)

    def predict(self, thetas):
        """Reject flags for each row of ``thetas``."""
        check_is_fitted(self, "batch_")
        stat, crit, _ = self.batch_.test_many(thetas)
        return stat > crit
