"""Newey-West (Bartlett kernel) long-run covariance of moment contributions."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from manyiv._validation import as_matrix
from manyiv.exceptions import ConfigurationError, DataError

__all__ = ["MomentMatrix", "bartlett_weights", "hac_covariance", "hac_covariance_batch"]

DEFAULT_LAG = 4


def bartlett_weights(lag_length):
    """Weights ``1 - l/(L+1)`` for ``l = 1..L``."""
    L = int(lag_length)
    return 1.0 - np.arange(1, L + 1) / (L + 1.0)


@dataclass(frozen=True)
class MomentMatrix:
    """Per-period moment contributions ``m_t`` (rows) and a HAC lag length."""

    values: np.ndarray
    lag_length: int = DEFAULT_LAG

    def __post_init__(self):
        values = as_matrix(self.values, "moments")
        if isinstance(self.lag_length, bool) or int(self.lag_length) != self.lag_length or self.lag_length < 0:
            raise ConfigurationError(f"lag_length must be a nonnegative integer, got {self.lag_length!r}")
        if self.lag_length >= values.shape[0]:
            raise ConfigurationError(
                f"lag_length={self.lag_length} must be smaller than T={values.shape[0]}"
            )
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "lag_length", int(self.lag_length))


def hac_covariance(m, lag_length=None, *, centered=True):
    """Newey-West estimate of the long-run covariance of ``m``.

    Parameters
    ----------
    m : MomentMatrix or array-like of shape (T, k)
    lag_length : int, optional
        Bartlett truncation lag ``L``; overrides the one stored on a
        :class:`MomentMatrix`. Defaults to 4.
    centered : bool, default=True
        Subtract the column means before forming autocovariances. The
        uncentred variant is kept for sensitivity checks.

    Returns
    -------
    ndarray of shape (k, k)
        ``G_0 + sum_l w_l (G_l + G_l')`` with ``G_l = T^-1 sum_t m_t m_{t-l}'``.
    """
    if isinstance(m, MomentMatrix):
        mm = m if lag_length is None else MomentMatrix(m.values, lag_length)
    else:
        mm = MomentMatrix(m, DEFAULT_LAG if lag_length is None else lag_length)
    x = mm.values
    if centered:
        x = x - x.mean(axis=0)
    T = x.shape[0]
    S = x.T @ x / T
    for lag, w in enumerate(bartlett_weights(mm.lag_length), start=1):
        G = x[lag:].T @ x[:-lag] / T
        S += w * (G + G.T)
    return 0.5 * (S + S.T)


def hac_covariance_batch(m, lag_length=DEFAULT_LAG, *, centered=True):
    """Vectorised :func:`hac_covariance` over a leading batch axis.

    Parameters
    ----------
    m : ndarray of shape (n, T, k)

    Returns
    -------
    ndarray of shape (n, k, k)
    """
    x = np.asarray(m, dtype=float)
    if x.ndim != 3:
        raise DataError(f"expected a 3-D array, got shape {x.shape}")
    T = x.shape[1]
    if not 0 <= lag_length < T:
        raise ConfigurationError(f"lag_length={lag_length} must lie in [0, T={T})")
    if centered:
        x = x - x.mean(axis=1, keepdims=True)
    S = np.einsum("ntk,ntj->nkj", x, x) / T
    for lag, w in enumerate(bartlett_weights(lag_length), start=1):
        G = np.einsum("ntk,ntj->nkj", x[:, lag:], x[:, :-lag]) / T
        S += w * (G + np.swapaxes(G, 1, 2))
    return 0.5 * (S + np.swapaxes(S, 1, 2))
