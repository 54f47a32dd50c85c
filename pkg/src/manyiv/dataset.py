"""Macro panel ingestion and construction of the IV design.

Raw quarterly series are transformed (``N``/``G``/``D``/``GG`` codes), lagged
into an instrument matrix, partialled with respect to the included exogenous
covariates and standardised, giving an :class:`EstimationProblem`.
"""

from __future__ import annotations

import csv
import enum
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import pandas as pd
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from manyiv._validation import as_matrix, as_vector, check_positive_int
from manyiv.exceptions import (
    AlignmentError,
    DataError,
    DegenerateInstrumentError,
    DomainError,
    InsufficientDataError,
    SingularityError,
)

__all__ = [
    "ColumnStandardizer",
    "EmpiricalConfig",
    "EstimationProblem",
    "ExogenousPartialler",
    "RawSeries",
    "TransformCode",
    "align_panel",
    "annihilator",
    "apply_transform",
    "assemble_empirical_design",
    "build_lag_matrix",
    "lag_label",
    "parse_quarter",
    "partial_out",
    "read_panel_csv",
    "read_panel_dir",
    "read_transform_map",
    "standardize_columns",
    "write_design_bundle",
]

ORTHOGONALITY_TOL = 1e-8
GG_SCALE = 0.1226


class TransformCode(str, enum.Enum):
    """Stationarity transform applied to a raw series."""

    N = "N"
    G = "G"
    D = "D"
    GG = "GG"


def lag_label(code, lag):
    """Instrument label ``CODE.-lag``."""
    return f"{code}.-{int(lag)}"


def parse_quarter(value):
    """Parse ``1974Q2``, ``1974-Q2`` or an ISO date into a quarterly ``pd.Period``."""
    if isinstance(value, pd.Period):
        return value.asfreq("Q")
    text = str(value).strip()
    compact = text.upper().replace("-Q", "Q").replace(" ", "")
    if "Q" in compact:
        try:
            return pd.Period(compact, freq="Q")
        except ValueError as exc:
            raise DataError(f"unparseable quarter {value!r}") from exc
    try:
        return pd.Timestamp(text).to_period("Q")
    except ValueError as exc:
        raise DataError(f"unparseable date {value!r}") from exc


@dataclass(frozen=True)
class RawSeries:
    """One quarterly time series.

    Parameters
    ----------
    code : str
        Series mnemonic (FRED code).
    dates : sequence
        Quarter labels; anything :func:`parse_quarter` accepts.
    values : sequence of float
        Observations, same length as ``dates``.
    """

    code: str
    dates: pd.PeriodIndex
    values: np.ndarray

    def __post_init__(self):
        dates = pd.PeriodIndex([parse_quarter(d) for d in self.dates], freq="Q")
        values = np.asarray(self.values, dtype=float).ravel()
        if len(dates) != len(values):
            raise DataError(f"{self.code}: {len(dates)} dates but {len(values)} values")
        if len(dates) > 1:
            steps = np.diff(dates.asi8)
            if np.any(steps <= 0):
                raise DataError(f"{self.code}: dates are not strictly increasing")
            if np.any(steps != 1):
                first_gap = dates[1:][steps != 1][0]
                raise DataError(f"{self.code}: gap in quarterly dates before {first_gap}")
        if not np.all(np.isfinite(values)):
            bad = dates[~np.isfinite(values)][0]
            raise DataError(f"{self.code}: missing or non-finite value at {bad}")
        object.__setattr__(self, "dates", dates)
        object.__setattr__(self, "values", values)

    def __len__(self):
        return len(self.values)

    def to_series(self):
        return pd.Series(self.values, index=self.dates, name=self.code)

    def window(self, start=None, end=None):
        """Sub-series restricted to ``[start, end]`` (inclusive)."""
        mask = np.ones(len(self), dtype=bool)
        if start is not None:
            mask &= self.dates >= parse_quarter(start)
        if end is not None:
            mask &= self.dates <= parse_quarter(end)
        return RawSeries(self.code, self.dates[mask], self.values[mask])


def apply_transform(series: RawSeries, code) -> RawSeries:
    """Apply a stationarity transform.

    ``N`` leaves the series unchanged, ``G`` is
    ``100 * (log f_t - log f_{t-1})``, ``D`` the first difference and ``GG``
    ``0.1226 * 100 * log(f_t / 100)``. ``G`` and ``D`` drop the first date.
    """
    code = TransformCode(code)
    f = series.values
    if code in (TransformCode.G, TransformCode.GG):
        bad = np.flatnonzero(f <= 0)
        if bad.size:
            raise DomainError(
                f"{series.code}: transform {code.value} needs positive values, "
                f"got {f[bad[0]]!r} at {series.dates[bad[0]]}"
            )
    if code in (TransformCode.G, TransformCode.D) and len(f) < 2:
        raise InsufficientDataError(
            f"{series.code}: transform {code.value} needs at least 2 observations"
        )
    if code is TransformCode.N:
        return series
    if code is TransformCode.G:
        return RawSeries(series.code, series.dates[1:], 100.0 * np.diff(np.log(f)))
    if code is TransformCode.D:
        return RawSeries(series.code, series.dates[1:], np.diff(f))
    return RawSeries(series.code, series.dates, GG_SCALE * 100.0 * np.log(f / 100.0))


def align_panel(panel: Sequence[RawSeries]) -> list[RawSeries]:
    """Trim every series to the common date span shared by the whole panel."""
    if not panel:
        raise DataError("empty panel")
    start = max(s.dates[0] for s in panel)
    end = min(s.dates[-1] for s in panel)
    if start > end:
        raise AlignmentError("series do not overlap: " + ", ".join(s.code for s in panel))
    return [s.window(start, end) for s in panel]


def build_lag_matrix(panel: Sequence[RawSeries], lags: int, *, return_dates=False):
    """Stack lags ``1..lags`` of every series.

    Columns are ordered series-major, lag-minor and labelled ``CODE.-lag``.
    Rows are the dates at which every lag exists, so an ``n``-long panel
    yields ``n - lags`` rows.

    Returns
    -------
    matrix : ndarray of shape (n - lags, len(panel) * lags)
    labels : list of str
    dates : PeriodIndex, only when ``return_dates`` is true
    """
    lags = check_positive_int(lags, "lags")
    if not panel:
        raise DataError("empty panel")
    ref = panel[0].dates
    offending = [s.code for s in panel if not s.dates.equals(ref)]
    if offending:
        raise AlignmentError("series not aligned with " + panel[0].code + ": " + ", ".join(offending))
    n = len(ref)
    if n <= lags:
        raise InsufficientDataError(f"{n} observations cannot support {lags} lags")
    cols, labels = [], []
    for s in panel:
        for lag in range(1, lags + 1):
            cols.append(s.values[lags - lag : n - lag])
            labels.append(lag_label(s.code, lag))
    matrix = np.column_stack(cols)
    if return_dates:
        return matrix, labels, ref[lags:]
    return matrix, labels


def standardize_columns(M, labels=None):
    """Centre and scale columns to mean 0 and standard deviation 1 (divisor T).

    Returns
    -------
    matrix, means, sds : ndarray
    """
    M = as_matrix(M, "M")
    means = M.mean(axis=0)
    centred = M - means
    sds = np.sqrt(np.mean(centred**2, axis=0))
    scale = np.maximum(np.abs(means), 1.0)
    degenerate = np.flatnonzero(sds <= 1e-12 * scale)
    if degenerate.size:
        j = int(degenerate[0])
        name = labels[j] if labels is not None else f"column {j}"
        raise DegenerateInstrumentError(f"zero in-sample variance in {name}")
    return centred / sds, means, sds


def _qr_basis(X, name="X"):
    X = as_matrix(X, name)
    q, r = np.linalg.qr(X)
    diag = np.abs(np.diag(r))
    if diag.size and diag.min() <= 1e-10 * max(diag.max(), 1.0):
        cond = diag.max() / diag.min() if diag.min() > 0 else np.inf
        raise SingularityError(f"{name} does not have full column rank", condition_number=cond)
    return q


def partial_out(target, X):
    """Residuals of ``target`` after projection on the columns of ``X``.

    Equals ``M_X @ target`` with ``M_X = I - X (X'X)^{-1} X'``. A 1-D target
    returns a 1-D result.
    """
    vector = np.ndim(target) == 1
    A = as_matrix(target, "target", allow_empty=True)
    if A.shape[1] == 0:
        return A
    q = _qr_basis(X)
    if q.shape[0] != A.shape[0]:
        raise DataError(f"target has {A.shape[0]} rows but X has {q.shape[0]}")
    out = A - q @ (q.T @ A)
    return out[:, 0] if vector else out


def annihilator(X):
    """The matrix ``M_X``."""
    q = _qr_basis(X)
    return np.eye(q.shape[0]) - q @ q.T


@dataclass
class EstimationProblem:
    """Linear IV design ``y = Y theta + X beta + eps`` with instruments ``Z``.

    ``Z`` holds the excluded instruments only. When ``partialled`` is true,
    ``y``, ``Y`` and ``Z`` have already been multiplied by ``M_X``.
    ``oracle`` optionally stores a low-dimensional infeasible instrument set
    (simulation only).
    """

    y: np.ndarray
    Y: np.ndarray
    X: np.ndarray
    Z: np.ndarray
    labels: list
    partialled: bool = False
    endog_names: tuple = ()
    exog_names: tuple = ()
    oracle: np.ndarray | None = None
    oracle_labels: tuple = ()
    dates: pd.PeriodIndex | None = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.y = as_vector(self.y, "y")
        self.Y = as_matrix(self.Y, "Y")
        self.X = as_matrix(self.X, "X", allow_empty=True)
        self.Z = as_matrix(self.Z, "Z", allow_empty=True)
        T = self.y.shape[0]
        shapes = {"Y": self.Y.shape[0], "X": self.X.shape[0], "Z": self.Z.shape[0]}
        if self.X.shape[1] == 0:
            shapes.pop("X")
        bad = {k: v for k, v in shapes.items() if v != T}
        if bad:
            raise DataError(f"row counts differ from len(y)={T}: {bad}")
        self.labels = [str(lab) for lab in self.labels]
        if len(self.labels) != self.Z.shape[1]:
            raise DataError(f"{len(self.labels)} labels for {self.Z.shape[1]} instruments")
        if len(set(self.labels)) != len(self.labels):
            raise DataError("instrument labels are not unique")
        # X instruments itself, so the order condition only involves p1
        if self.k < self.p1:
            raise InsufficientDataError(f"k={self.k} excluded instruments but p1={self.p1}")
        if not self.endog_names:
            self.endog_names = tuple(f"Y{r}" for r in range(self.p1))
        if not self.exog_names:
            self.exog_names = tuple(f"X{r}" for r in range(self.p2))
        if self.oracle is not None:
            self.oracle = as_matrix(self.oracle, "oracle")
            if not self.oracle_labels:
                self.oracle_labels = tuple(f"oracle{j}" for j in range(self.oracle.shape[1]))
        if self.partialled and self.p2:
            err = self.orthogonality_error()
            if err > ORTHOGONALITY_TOL:
                raise DataError(f"partialled flag set but max |cos(X, .)| = {err:.2e}")

    @property
    def n_obs(self):
        return self.y.shape[0]

    @property
    def k(self):
        return self.Z.shape[1]

    @property
    def p1(self):
        return self.Y.shape[1]

    @property
    def p2(self):
        return self.X.shape[1]

    def orthogonality_error(self):
        """Largest absolute cosine between a column of X and y, Y or Z."""
        if not self.p2:
            return 0.0
        A = np.column_stack([self.y, self.Y, self.Z])
        num = np.abs(self.X.T @ A)
        den = np.outer(np.linalg.norm(self.X, axis=0), np.linalg.norm(A, axis=0))
        den[den == 0] = 1.0
        return float(np.max(num / den))

    def residual(self, theta0):
        """``y - Y theta0`` (the exogenous part is left in place)."""
        theta0 = np.asarray(theta0, dtype=float).ravel()
        if theta0.shape[0] != self.p1:
            raise DataError(f"theta0 has {theta0.shape[0]} entries, expected p1={self.p1}")
        return self.y - self.Y @ theta0

    def to_partialled(self, standardize=True):
        """Copy with ``M_X`` applied to ``y``, ``Y`` and ``Z`` (and Z standardised)."""
        if self.partialled or not self.p2:
            return self
        y = partial_out(self.y, self.X)
        Y = partial_out(self.Y, self.X)
        Z = partial_out(self.Z, self.X) if self.k else self.Z
        oracle = partial_out(self.oracle, self.X) if self.oracle is not None else None
        if standardize and self.k:
            Z = standardize_columns(Z, self.labels)[0]
        if standardize and oracle is not None:
            oracle = standardize_columns(oracle, list(self.oracle_labels))[0]
        return replace(self, y=y, Y=Y, Z=Z, oracle=oracle, partialled=True,
                       metadata=dict(self.metadata))

    def subset(self, columns):
        """Problem restricted to instrument columns ``columns`` (0-based)."""
        columns = list(columns)
        return replace(self, Z=self.Z[:, columns], labels=[self.labels[j] for j in columns],
                       metadata=dict(self.metadata))


@dataclass(frozen=True)
class EmpiricalConfig:
    """Configuration of the empirical hybrid-NKPC design.

    ``transforms`` maps every code to its transform; ``instruments`` defaults
    to every code in the panel. The sample window refers to the dates of the
    dependent variable; lags and the lead are read from outside the window
    when the panel covers them.
    """

    transforms: Mapping[str, TransformCode]
    dependent: str = "GDPDEF"
    forcing: str = "PRS85006173"
    instruments: tuple | None = None
    lags: int = 4
    start: str | None = "1974Q2"
    end: str | None = "2018Q4"
    standardize: bool = True
    exclude_dependent_lag: bool = True


def assemble_empirical_design(config: EmpiricalConfig, panel) -> EstimationProblem:
    """Build the partialled, standardised hybrid-NKPC problem.

    ``y = M_X pi``, ``Y = M_X [pi_{+1}, s]`` (so ``theta = (gamma_f, lambda)``), ``X = [1, pi_{-1}]`` and
    ``Z = M_X Z~`` standardised, where ``Z~`` holds lags ``1..lags`` of every
    instrument series except the lag-1 dependent variable (already in X).

    Parameters
    ----------
    config : EmpiricalConfig
    panel : mapping code -> RawSeries, or sequence of RawSeries
    """
    if not isinstance(panel, Mapping):
        panel = {s.code: s for s in panel}
    codes = list(config.instruments) if config.instruments is not None else list(panel)
    needed = [config.dependent, config.forcing, *codes]
    missing = sorted({c for c in needed if c not in panel})
    if missing:
        raise DataError("missing series: " + ", ".join(missing))
    no_code = sorted({c for c in needed if c not in config.transforms})
    if no_code:
        raise DataError("no transform code for: " + ", ".join(no_code))
    if not codes:
        raise InsufficientDataError("empty instrument list (k < p1 + p2)")

    transformed = {c: apply_transform(panel[c], config.transforms[c]) for c in dict.fromkeys(needed)}
    aligned = align_panel([transformed[c] for c in codes])
    lagged, labels, lag_dates = build_lag_matrix(aligned, config.lags, return_dates=True)
    frame = pd.DataFrame(lagged, index=lag_dates, columns=labels)

    pi = transformed[config.dependent].to_series()
    s = transformed[config.forcing].to_series()
    full = pd.period_range(min(pi.index[0], s.index[0], lag_dates[0]),
                           max(pi.index[-1], s.index[-1], lag_dates[-1]), freq="Q")
    pi, s = pi.reindex(full), s.reindex(full)
    core = pd.DataFrame({"pi": pi, "s": s, "pi_lead": pi.shift(-1), "pi_lag": pi.shift(1)})
    data = core.join(frame, how="inner")
    if config.start is not None:
        data = data[data.index >= parse_quarter(config.start)]
    if config.end is not None:
        data = data[data.index <= parse_quarter(config.end)]
    data = data.dropna()
    if data.empty:
        raise InsufficientDataError("sample window contains no usable observations")
    if config.exclude_dependent_lag:
        dup = lag_label(config.dependent, 1)
        labels = [lab for lab in labels if lab != dup]
    T = len(data)
    if T <= len(labels) and T < 3:
        raise InsufficientDataError(f"only {T} usable observations")

    X = np.column_stack([np.ones(T), data["pi_lag"].to_numpy()])
    y = partial_out(data["pi"].to_numpy(), X)
    Y = partial_out(data[["pi_lead", "s"]].to_numpy(), X)
    Z = partial_out(data[labels].to_numpy(), X)
    meta = {"sd_divisor": "T", "window": [str(data.index[0]), str(data.index[-1])]}
    if config.standardize:
        Z, means, sds = standardize_columns(Z, labels)
        meta["instrument_sds"] = sds.tolist()
    return EstimationProblem(
        y=y, Y=Y, X=X, Z=Z, labels=labels, partialled=True,
        endog_names=("pi_lead", "s"), exog_names=("const", "pi_lag"),
        dates=data.index, metadata=meta,
    )


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------


def read_panel_csv(path) -> dict[str, RawSeries]:
    """Read series from a long (date, code, value) or wide (date, CODE...) CSV."""
    frame = pd.read_csv(path, encoding="utf-8", dtype=str)
    cols = [c.strip() for c in frame.columns]
    frame.columns = cols
    lower = [c.lower() for c in cols]
    if len(cols) < 2 or lower[0] not in ("date", "dates", "period", "observation_date"):
        raise DataError(f"{path}: first column must be a date column, got {cols[:1]}")
    if sorted(lower) == ["code", "date", "value"]:
        frame.columns = lower
        out = {}
        for code, grp in frame.groupby("code", sort=False):
            grp = grp.assign(_p=[parse_quarter(d) for d in grp["date"]]).sort_values("_p")
            out[str(code)] = RawSeries(str(code), list(grp["_p"]), _to_float(grp["value"], path))
        return out
    dates = [parse_quarter(d) for d in frame[cols[0]]]
    out = {}
    for code in cols[1:]:
        values = _to_float(frame[code], path)
        keep = np.isfinite(values)
        # leading/trailing blanks only; internal gaps are rejected by RawSeries
        idx = np.flatnonzero(keep)
        if idx.size == 0:
            raise DataError(f"{path}: series {code} has no observations")
        sl = slice(idx[0], idx[-1] + 1)
        out[code] = RawSeries(code, dates[sl], values[sl])
    return out


def _to_float(col, path):
    vals = pd.to_numeric(col.replace({"": np.nan, ".": np.nan}), errors="coerce")
    return vals.to_numpy(dtype=float)


def read_transform_map(path) -> dict[str, TransformCode]:
    """Two-column CSV ``code,transform``."""
    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.reader(fh):
            if not row or row[0].strip().lower() in ("code", ""):
                continue
            if len(row) < 2:
                raise DataError(f"{path}: malformed row {row}")
            try:
                out[row[0].strip()] = TransformCode(row[1].strip().upper())
            except ValueError as exc:
                raise DataError(f"{path}: unknown transform {row[1]!r} for {row[0]}") from exc
    return out


def read_panel_dir(data_dir, transform_file="transforms.csv"):
    """Load every series CSV in ``data_dir`` plus its transform map."""
    data_dir = Path(data_dir)
    tpath = data_dir / transform_file
    if not tpath.exists():
        raise DataError(f"{tpath} not found")
    panel = {}
    for path in sorted(data_dir.glob("*.csv")):
        if path.name == transform_file:
            continue
        for code, series in read_panel_csv(path).items():
            if code in panel:
                raise DataError(f"series {code} defined twice")
            panel[code] = series
    return panel, read_transform_map(tpath)


def write_design_bundle(problem: EstimationProblem, out_dir):
    """Write ``y.csv``, ``Y.csv``, ``X.csv``, ``Z.csv`` and ``labels.csv``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    index = [str(d) for d in problem.dates] if problem.dates is not None else range(problem.n_obs)
    parts = {
        "y.csv": pd.DataFrame({"y": problem.y}, index=index),
        "Y.csv": pd.DataFrame(problem.Y, index=index, columns=list(problem.endog_names)),
        "X.csv": pd.DataFrame(problem.X, index=index, columns=list(problem.exog_names)),
        "Z.csv": pd.DataFrame(problem.Z, index=index, columns=problem.labels),
    }
    written = []
    for name, frame in parts.items():
        path = out_dir / name
        _atomic_csv(frame, path, index_label="date")
        written.append(path)
    lab = out_dir / "labels.csv"
    _atomic_csv(pd.DataFrame({"label": problem.labels}), lab, index=False)
    written.append(lab)
    return written


def _atomic_csv(frame, path, **kwargs):
    tmp = Path(str(path) + ".tmp")
    frame.to_csv(tmp, lineterminator="\r\n", **kwargs)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# estimator-API wrappers
# ---------------------------------------------------------------------------


class ColumnStandardizer(TransformerMixin, BaseEstimator):
    """Standardise columns with in-sample mean and divisor-T standard deviation.

    Unlike ``StandardScaler`` a zero-variance column is an error, because an
    instrument with no variation cannot be standardised.

    Attributes
    ----------
    mean_ : ndarray of shape (n_features,)
    scale_ : ndarray of shape (n_features,)
    """

    def fit(self, X, y=None):
        _, self.mean_, self.scale_ = standardize_columns(X)
        self.n_features_in_ = self.mean_.shape[0]
        return self

    def transform(self, X):
        check_is_fitted(self, "scale_")
        X = as_matrix(X, "X")
        if X.shape[1] != self.n_features_in_:
            raise DataError(f"expected {self.n_features_in_} columns, got {X.shape[1]}")
        return (X - self.mean_) / self.scale_


class ExogenousPartialler(TransformerMixin, BaseEstimator):
    """Project out exogenous covariates: ``transform(A) = M_X A``.

    Parameters
    ----------
    exog : array-like of shape (n_samples, p2)
        The covariates ``X``; an intercept is prepended when
        ``add_intercept`` is true.
    add_intercept : bool, default=False
    """

    def __init__(self, exog=None, add_intercept=False):
        self.exog = exog
        self.add_intercept = add_intercept

    def _design(self, n):
        parts = []
        if self.add_intercept:
            parts.append(np.ones((n, 1)))
        if self.exog is not None:
            parts.append(as_matrix(self.exog, "exog"))
        if not parts:
            raise DataError("nothing to partial out")
        return np.column_stack(parts)

    def fit(self, X, y=None):
        X = as_matrix(X, "X")
        self.exog_ = self._design(X.shape[0])
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "exog_")
        return partial_out(as_matrix(X, "X"), self.exog_)
