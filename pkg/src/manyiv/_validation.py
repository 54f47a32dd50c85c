"""Input validation and RNG helpers shared across modules."""

from __future__ import annotations

import numbers

import numpy as np
from sklearn.utils import check_array

from manyiv.exceptions import ConfigurationError, DataError


def as_matrix(a, name="array", *, allow_empty=False):
    """Return ``a`` as a finite 2-D float64 array (1-D input becomes a column)."""
    arr = np.asarray(a, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise DataError(f"{name} must be 1-D or 2-D, got shape {arr.shape}")
    if arr.shape[1] == 0 and allow_empty:
        return arr
    try:
        return check_array(arr, ensure_2d=True, dtype=np.float64, ensure_min_samples=1,
                           ensure_min_features=0 if allow_empty else 1)
    except ValueError as exc:
        raise DataError(f"{name}: {exc}") from exc


def as_vector(a, name="vector"):
    """Return ``a`` as a finite 1-D float64 array; ``(n, 1)`` input is flattened."""
    arr = np.asarray(a, dtype=float)
    if arr.ndim == 2 and arr.shape[1] == 1:
        arr = arr[:, 0]
    if arr.ndim != 1:
        raise DataError(f"{name} must be a vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{name} contains non-finite values")
    return arr


def check_same_rows(**arrays):
    rows = {k: v.shape[0] for k, v in arrays.items() if v is not None}
    if len(set(rows.values())) > 1:
        raise DataError(f"row counts differ: {rows}")


def check_alpha(alpha):
    if not isinstance(alpha, numbers.Real) or not 0.0 < float(alpha) < 1.0:
        raise ConfigurationError(f"alpha must lie in (0, 1), got {alpha!r}")
    return float(alpha)


def check_positive_int(value, name, *, minimum=1):
    if isinstance(value, bool) or not isinstance(value, numbers.Integral) or value < minimum:
        raise ConfigurationError(f"{name} must be an integer >= {minimum}, got {value!r}")
    return int(value)


def seed_sequence(seed, *path):
    """Deterministic substream ``path`` of the master ``seed``.

    ``seed_sequence(s, i, j)`` is independent of how many other substreams are
    created, so results never depend on scheduling or worker count.
    """
    if isinstance(seed, np.random.SeedSequence):
        base_entropy, base_key = seed.entropy, tuple(seed.spawn_key)
    else:
        base_entropy, base_key = (0 if seed is None else int(seed)), ()
    return np.random.SeedSequence(base_entropy, spawn_key=base_key + tuple(int(p) for p in path))


def substream(seed, *path):
    """``numpy.random.Generator`` for substream ``path`` of ``seed``."""
    return np.random.default_rng(seed_sequence(seed, *path))


def as_generator(random_state):
    """Coerce ``None``/int/SeedSequence/Generator into a Generator."""
    if isinstance(random_state, np.random.Generator):
        return random_state
    if isinstance(random_state, np.random.SeedSequence):
        return np.random.default_rng(random_state)
    return np.random.default_rng(random_state)
