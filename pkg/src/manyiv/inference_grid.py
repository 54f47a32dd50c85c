"""Confidence sets by test inversion and Monte Carlo size/power campaigns."""

from __future__ import annotations

import csv
import os
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from manyiv._validation import check_alpha, check_positive_int, seed_sequence, substream
from manyiv.dataset import EstimationProblem
from manyiv.exceptions import ConfigurationError, ManyIVError, NumericalError, SingularityError
from manyiv.gmm_s import SStatConfig, TestResult, robust_overid, s_test
from manyiv.nkpc_dgp import DgpCalibration, concentration_report, simulate_dataset
from manyiv.selection import SelectionSpec, select_instruments
from manyiv.supscore import SupScoreBatch, SupScoreConfig

__all__ = [
    "CampaignResult",
    "ConfidenceGrid",
    "HypothesisGrid",
    "MethodConfig",
    "S_METHODS",
    "invert_test",
    "method_problem",
    "monte_carlo_power",
    "monte_carlo_size",
    "two_step_rejection",
    "write_confidence_grid_csv",
    "write_heatmap_csv",
    "write_table1_csv",
]

S_METHODS = ("oracle", "random", "crude_threshold", "lasso")
ALL_METHODS = S_METHODS + ("sup_score",)
MAX_FAILURE_SHARE = 0.01


@dataclass(frozen=True)
class HypothesisGrid:
    """Rectangular lattice of ``(gamma_f, lambda)`` hypotheses.

    Each range is ``(start, stop, step)`` with ``stop`` included. Points are
    enumerated row-major: ``gamma_f`` varies slowest.
    """

    gamma_range: tuple = (-0.5, 1.5, 0.01)
    lambda_range: tuple = (-0.5, 1.0, 0.01)

    def __post_init__(self):
        for name in ("gamma_range", "lambda_range"):
            lo, hi, step = map(float, getattr(self, name))
            if not step > 0 or hi < lo:
                raise ConfigurationError(f"{name} needs step > 0 and stop >= start")
            object.__setattr__(self, name, (lo, hi, step))

    @staticmethod
    def _axis(lo, hi, step):
        n = int(np.floor((hi - lo) / step + 1e-9)) + 1
        return np.round(lo + step * np.arange(n), 12)

    @property
    def gamma_values(self):
        return self._axis(*self.gamma_range)

    @property
    def lambda_values(self):
        return self._axis(*self.lambda_range)

    @property
    def shape(self):
        return (len(self.gamma_values), len(self.lambda_values))

    def points(self):
        g, lam = np.meshgrid(self.gamma_values, self.lambda_values, indexing="ij")
        return np.column_stack([g.ravel(), lam.ravel()])

    def __len__(self):
        return self.shape[0] * self.shape[1]

    @classmethod
    def from_points(cls, n_gamma, n_lambda, gamma_bounds=(-0.5, 1.5), lambda_bounds=(-0.5, 1.0)):
        """Grid with ``n_gamma x n_lambda`` equally spaced points."""
        gs = (gamma_bounds[1] - gamma_bounds[0]) / max(n_gamma - 1, 1)
        ls = (lambda_bounds[1] - lambda_bounds[0]) / max(n_lambda - 1, 1)
        return cls((gamma_bounds[0], gamma_bounds[1], gs), (lambda_bounds[0], lambda_bounds[1], ls))

    @classmethod
    def parse(cls, text):
        """``"g0:g1:gstep,l0:l1:lstep"``."""
        try:
            g, lam = text.split(",")
            return cls(tuple(map(float, g.split(":"))), tuple(map(float, lam.split(":"))))
        except ValueError as exc:
            raise ConfigurationError(f"bad grid spec {text!r}; expected g0:g1:step,l0:l1:step") from exc


@dataclass(frozen=True)
class MethodConfig:
    """A test method together with its settings.

    ``method`` is ``"sup_score"``, ``"oracle"`` (S test with the infeasible
    oracle instruments) or one of the selection procedures (S test with
    selected instruments).
    """

    method: str = "sup_score"
    k_s: int = 4
    s_config: SStatConfig = field(default_factory=SStatConfig)
    sup_config: SupScoreConfig = field(default_factory=SupScoreConfig)

    def __post_init__(self):
        if self.method not in ALL_METHODS:
            raise ConfigurationError(f"unknown method {self.method!r}; use one of {ALL_METHODS}")

    @property
    def alpha(self):
        return self.sup_config.alpha if self.method == "sup_score" else self.s_config.alpha

    def with_alpha(self, alpha):
        return replace(self, s_config=replace(self.s_config, alpha=alpha),
                       sup_config=replace(self.sup_config, alpha=alpha))


@dataclass
class ConfidenceGrid:
    """Test results over a hypothesis grid; ``mask`` marks the confidence set."""

    grid: HypothesisGrid
    method: str
    statistic: np.ndarray
    critical_value: np.ndarray
    mask: np.ndarray
    argmax_labels: list | None = None
    selected_labels: list | None = None
    errors: dict = field(default_factory=dict)

    @property
    def reject(self):
        return ~self.mask

    def argmax_counts(self):
        return Counter(self.argmax_labels or [])

    def results(self):
        """Per-point :class:`TestResult` objects."""
        out = []
        for i in range(len(self.mask)):
            extras = {"argmax_label": self.argmax_labels[i]} if self.argmax_labels else {}
            out.append(TestResult(float(self.statistic[i]), float(self.critical_value[i]),
                                  None, self.method, extras))
        return out


@dataclass
class CampaignResult:
    """Monte Carlo rejection frequencies for one method in one design cell."""

    method: str
    cell: tuple
    nrep: int
    rejections: int
    two_step_rejections: int | None
    singular: int = 0
    failures: int = 0
    alpha: float = 0.1
    mu2_O: float | None = None
    mu2_E: float | None = None
    log: list = field(default_factory=list, repr=False)

    @property
    def rf(self):
        return self.rejections / self.nrep

    @property
    def ts(self):
        return None if self.two_step_rejections is None else self.two_step_rejections / self.nrep

    @property
    def se(self):
        return float(np.sqrt(self.rf * (1.0 - self.rf) / self.nrep))

    def as_dict(self):
        return {"method": self.method, "cell": list(self.cell), "nrep": self.nrep,
                "rf": self.rf, "ts": self.ts, "se": self.se, "singular": self.singular,
                "failures": self.failures, "alpha": self.alpha,
                "mu2_O": self.mu2_O, "mu2_E": self.mu2_E}


def method_problem(problem: EstimationProblem, method):
    """The problem a method works on: partialled, with oracle instruments if asked."""
    part = problem.to_partialled()
    if method == "oracle":
        if part.oracle is None:
            raise ConfigurationError("problem carries no oracle instruments")
        return replace(part, Z=part.oracle, labels=list(part.oracle_labels))
    return part


def _selection(problem, config: MethodConfig, rng):
    if config.method == "oracle":
        return np.arange(problem.k)
    return select_instruments(problem, SelectionSpec(config.method, config.k_s), rng)


def two_step_rejection(problem: EstimationProblem, selected, theta0, alpha, config=None):
    """Reject ``theta0`` only if the robust overidentification test does not reject."""
    config = replace(config or SStatConfig(), alpha=check_alpha(alpha))
    if robust_overid(problem, config, selected=selected).reject:
        return False
    return s_test(problem, theta0, config, selected=selected).reject


def invert_test(problem: EstimationProblem, grid: HypothesisGrid, config: MethodConfig,
                *, rng=None, workers=1):
    """Evaluate a test at every grid point.

    For S-based methods the instruments are selected once, before the
    inversion. A failure at one point is recorded in ``errors`` and the point
    is treated as not rejected.
    """
    work = method_problem(problem, config.method)
    points = grid.points()
    if config.method == "sup_score":
        batch = SupScoreBatch(work, config.sup_config)
        stat, crit, arg = batch.test_many(points)
        labels = [work.labels[j] for j in arg]
        return ConfidenceGrid(grid, "sup_score", stat, crit, ~(stat > crit), labels)

    selected = _selection(work, config, rng if rng is not None else config.sup_config.seed)

    def one(i):
        try:
            res = s_test(work, points[i], config.s_config, selected=selected)
            return i, res.statistic, res.critical_value, None
        except ManyIVError as exc:
            return i, np.nan, np.nan, f"{type(exc).__name__}: {exc}"

    stat = np.full(len(points), np.nan)
    crit = np.full(len(points), np.nan)
    errors = {}
    for i, s, c, err in _map(one, range(len(points)), workers):
        stat[i], crit[i] = s, c
        if err:
            errors[i] = err
    mask = ~(stat > crit)
    return ConfidenceGrid(grid, config.method, stat, crit, mask, None,
                          [work.labels[j] for j in selected], errors)


def _map(fn, items, workers):
    if workers is None or workers <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _replication(calib, methods, seed, rep, thetas, two_step):
    """All methods on one simulated dataset; returns ``{method: record}``."""
    data = simulate_dataset(calib, substream(seed, rep, 0))
    part = data.to_partialled()
    out = {}
    for config in methods:
        rec = {"rep": rep}
        try:
            if config.method == "sup_score":
                boot_seed = int(seed_sequence(seed, rep, 2).generate_state(1)[0])
                sup = replace(config.sup_config, seed=boot_seed)
                stat, crit, _ = SupScoreBatch(part, sup).test_many(thetas)
                rec["reject"] = (stat > crit).tolist()
            else:
                work = method_problem(data, config.method) if config.method == "oracle" else part
                selected = _selection(work, config, substream(seed, rep, 1))
                rec["selected"] = [int(j) for j in selected]
                rec["reject"] = [bool(s_test(work, th, config.s_config, selected=selected).reject)
                                 for th in thetas]
                if two_step:
                    gate = robust_overid(work, config.s_config, selected=selected)
                    rec["overid_reject"] = gate.reject
                    rec["two_step"] = [r and not gate.reject for r in rec["reject"]]
        except SingularityError as exc:
            rec["singular"] = str(exc)
            rec["reject"] = [False] * len(thetas)
            if two_step and config.method != "sup_score":
                rec["two_step"] = [False] * len(thetas)
        except (NumericalError, ManyIVError) as exc:
            rec["failure"] = f"{type(exc).__name__}: {exc}"
            rec["reject"] = [False] * len(thetas)
            if two_step and config.method != "sup_score":
                rec["two_step"] = [False] * len(thetas)
        out[config.method] = rec
    return out


def _run(calib, methods, nrep, seed, thetas, two_step, workers):
    nrep = check_positive_int(nrep, "nrep")
    names = [m.method for m in methods]
    if len(set(names)) != len(names):
        raise ConfigurationError("each method may appear only once per campaign")
    logs = _map(lambda r: _replication(calib, methods, seed, r, thetas, two_step), range(nrep), workers)
    for config in methods:
        bad = sum("failure" in log[config.method] for log in logs)
        if bad > MAX_FAILURE_SHARE * nrep:
            first = next(log[config.method]["failure"] for log in logs if "failure" in log[config.method])
            raise NumericalError(f"{config.method}: {bad} of {nrep} replications failed ({first})")
    return logs


def monte_carlo_size(calib: DgpCalibration, methods, nrep, alpha=0.1, seed=0, *, workers=1):
    """Rejection frequencies at the true ``theta``.

    Every method is applied to the same simulated datasets. S-based methods
    also report the two-step frequency gated by the robust overidentification
    test.

    Parameters
    ----------
    calib : DgpCalibration
    methods : MethodConfig, str, or a sequence of them
    nrep : int
    alpha : float
    seed : int
        Master seed; replication ``r`` uses substreams of ``(seed, r)``.
    workers : int

    Returns
    -------
    dict mapping method name to CampaignResult
    """
    alpha = check_alpha(alpha)
    methods = _methods(methods, alpha)
    theta = calib.theta[None, :]
    logs = _run(calib, methods, nrep, seed, theta, True, workers)
    rep = concentration_report(calib)
    out = {}
    for config in methods:
        recs = [log[config.method] for log in logs]
        rf = sum(r["reject"][0] for r in recs)
        ts = None if config.method == "sup_score" else sum(r["two_step"][0] for r in recs)
        out[config.method] = CampaignResult(
            config.method, calib.cell(), nrep, int(rf), None if ts is None else int(ts),
            singular=sum("singular" in r for r in recs), failures=sum("failure" in r for r in recs),
            alpha=alpha, mu2_O=rep.mu2_O, mu2_E=rep.mu2_E, log=recs,
        )
    return out


def monte_carlo_power(calib: DgpCalibration, method, grid, nrep, alpha=0.1, seed=0, *, workers=1):
    """Rejection frequency at every hypothesis of ``grid``.

    ``grid`` is a :class:`HypothesisGrid` or an ``(n, 2)`` array of
    ``(gamma_f, lambda)`` points.

    Returns
    -------
    points : ndarray of shape (n, 2)
    frequency : ndarray of shape (n,)
    """
    alpha = check_alpha(alpha)
    (config,) = _methods([method], alpha)
    points = grid.points() if isinstance(grid, HypothesisGrid) else np.atleast_2d(np.asarray(grid, float))
    logs = _run(calib, [config], nrep, seed, points, False, workers)
    hits = np.sum([log[config.method]["reject"] for log in logs], axis=0)
    return points, hits / nrep


def _methods(methods, alpha):
    if isinstance(methods, (str, MethodConfig)):
        methods = [methods]
    out = []
    for m in methods:
        config = MethodConfig(m) if isinstance(m, str) else m
        out.append(config.with_alpha(alpha))
    return out


# ---------------------------------------------------------------------------
# CSV outputs
# ---------------------------------------------------------------------------


def _atomic_rows(path, header, rows):
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    os.replace(tmp, path)
    return path


def _cell_name(cell):
    a23, a21, a22 = cell
    return f"a23={a23:g};a21={a21:g};a22={a22:g}"


def write_table1_csv(results, path):
    """Table layout: one row per method and measure, one column per design cell.

    ``results`` is an iterable of :class:`CampaignResult`. The first rows
    hold the concentration parameters of each cell.
    """
    results = list(results)
    cells = list(dict.fromkeys(r.cell for r in results))
    by = {(r.method, r.cell): r for r in results}
    methods = list(dict.fromkeys(r.method for r in results))
    first = {c: next(r for r in results if r.cell == c) for c in cells}
    rows = [["mu2_O", ""] + [f"{first[c].mu2_O:.3f}" for c in cells],
            ["mu2_E", ""] + [f"{first[c].mu2_E:.3f}" for c in cells]]
    for m in methods:
        rows.append([m, "R.F."] + [f"{by[m, c].rf:.3f}" if (m, c) in by else "" for c in cells])
        if any(by[m, c].ts is not None for c in cells if (m, c) in by):
            rows.append([m, "T.S."] + [f"{by[m, c].ts:.3f}" if (m, c) in by else "" for c in cells])
    return _atomic_rows(path, ["method", "measure"] + [_cell_name(c) for c in cells], rows)


def write_heatmap_csv(points, frequency, path):
    rows = [[f"{g:.6g}", f"{lam:.6g}", f"{f:.6f}"] for (g, lam), f in zip(points, frequency)]
    return _atomic_rows(path, ["gamma_f", "lambda", "frequency"], rows)


def write_confidence_grid_csv(cg: ConfidenceGrid, path):
    pts = cg.grid.points()
    rows = []
    for i, (g, lam) in enumerate(pts):
        rows.append([f"{g:.6g}", f"{lam:.6g}", repr(float(cg.statistic[i])),
                     repr(float(cg.critical_value[i])), int(not cg.mask[i]), int(cg.mask[i]),
                     cg.argmax_labels[i] if cg.argmax_labels else "", cg.errors.get(i, "")])
    return _atomic_rows(path, ["gamma_f", "lambda", "statistic", "critical_value", "reject",
                               "in_set", "argmax_label", "error"], rows)
