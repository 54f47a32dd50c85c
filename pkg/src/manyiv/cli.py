"""Command-line interface.

Each subcommand writes its artifacts plus a ``manifest.json`` into ``--out``
and prints the manifest path on standard output. Progress goes to standard
error. Exit codes: 0 success, 2 configuration error, 3 data error,
4 numerical error.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import subprocess
import sys
import time
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from manyiv import __version__
from manyiv.dataset import EmpiricalConfig, assemble_empirical_design, read_panel_dir, write_design_bundle
from manyiv.exceptions import ConfigurationError, DataError, ManyIVError, NumericalError
from manyiv.gmm_s import SStatConfig
from manyiv.inference_grid import (
    ALL_METHODS,
    HypothesisGrid,
    MethodConfig,
    invert_test,
    monte_carlo_power,
    monte_carlo_size,
    write_confidence_grid_csv,
    write_heatmap_csv,
    write_table1_csv,
)
from manyiv.nkpc_dgp import load_calibrations, table1_calibrations, write_concentration_csv
from manyiv.selection import SelectionSpec, select_instruments
from manyiv.supscore import SupScoreConfig

COMMANDS = ("concentration", "simulate-size", "simulate-power", "empirical", "invert")
EXIT_CODES = {ConfigurationError: 2, DataError: 3, NumericalError: 4}

DEFAULTS = {
    "seed": 0,
    "nrep": 1000,
    "alpha": 0.1,
    "block_length": 4,
    "bootstrap_draws": 500,
    "method": None,
    "ks": 4,
    "hac_lag": 4,
    "grid": "-0.5:1.5:0.01,-0.5:1.0:0.01",
    "workers": None,
    "calibration": None,
    "data_dir": None,
    "out": "manyiv-out",
}


@dataclass
class RunConfig:
    """Resolved settings of one CLI invocation."""

    command: str
    out: Path
    seed: int = 0
    nrep: int = 1000
    alpha: float = 0.1
    block_length: int = 4
    bootstrap_draws: int = 500
    method: str | None = None
    ks: int = 4
    hac_lag: int = 4
    grid: str = DEFAULTS["grid"]
    workers: int = 1
    calibration: str | None = None
    data_dir: str | None = None
    extra: dict = field(default_factory=dict)

    def echo(self):
        out = {k: v for k, v in self.__dict__.items() if k != "extra"}
        out["out"] = str(self.out)
        return out


def build_parser():
    parser = argparse.ArgumentParser(
        prog="manyiv",
        description="Weak-identification-robust IV inference with many instruments.",
    )
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True
    helps = {
        "concentration": "concentration parameters of the simulation design",
        "simulate-size": "Monte Carlo rejection frequencies at the true parameter",
        "simulate-power": "Monte Carlo rejection frequencies over a hypothesis grid",
        "empirical": "assemble the empirical design, select instruments, Sup Score sweep",
        "invert": "confidence set by test inversion on the empirical design",
    }
    for name in COMMANDS:
        p = sub.add_parser(name, help=helps[name], argument_default=argparse.SUPPRESS)
        p.add_argument("--config", help="JSON file with default settings (flags win)")
        p.add_argument("--calibration", help="calibration JSON")
        p.add_argument("--data-dir", dest="data_dir", help="directory with series CSVs and transforms.csv")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int)
        p.add_argument("--nrep", type=int)
        p.add_argument("--alpha", type=float)
        p.add_argument("--block-length", dest="block_length", type=int)
        p.add_argument("--bootstrap-draws", dest="bootstrap_draws", type=int)
        p.add_argument("--method", help="comma-separated subset of " + ",".join(ALL_METHODS))
        p.add_argument("--ks", type=int, help="number of instruments to select")
        p.add_argument("--hac-lag", dest="hac_lag", type=int)
        p.add_argument("--grid", help="g0:g1:gstep,l0:l1:lstep")
        p.add_argument("--workers", type=int)
    return parser


def resolve_config(args) -> RunConfig:
    values = dict(DEFAULTS)
    flags = vars(args).copy()
    command = flags.pop("command")
    cfg_path = flags.pop("config", None)
    if cfg_path:
        try:
            with open(cfg_path, encoding="utf-8") as fh:
                doc = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"cannot read config {cfg_path}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigurationError("config file must hold a JSON object")
        doc = {k.replace("-", "_"): v for k, v in doc.items()}
        unknown = sorted(set(doc) - set(DEFAULTS))
        if unknown:
            raise ConfigurationError(f"unknown config keys: {unknown}")
        values.update(doc)
    values.update(flags)
    if values["workers"] is None:
        values["workers"] = os.cpu_count() or 1
    for path_key in ("calibration", "data_dir"):
        if values[path_key] is not None and not Path(values[path_key]).exists():
            raise ConfigurationError(f"{path_key.replace('_', '-')} {values[path_key]} does not exist")
    if command in ("empirical", "invert") and values["data_dir"] is None:
        raise ConfigurationError(f"{command} needs --data-dir")
    for key in ("nrep", "bootstrap_draws", "block_length", "ks", "workers"):
        if int(values[key]) < 1:
            raise ConfigurationError(f"--{key.replace('_', '-')} must be positive")
    if not 0 < float(values["alpha"]) < 1:
        raise ConfigurationError("--alpha must lie in (0, 1)")
    values["out"] = Path(values["out"])
    return RunConfig(command=command, **values)


def _methods(cfg, default):
    names = default if cfg.method is None else [m.strip() for m in cfg.method.split(",") if m.strip()]
    bad = [m for m in names if m not in ALL_METHODS]
    if bad:
        raise ConfigurationError(f"unknown method(s) {bad}; choose from {ALL_METHODS}")
    return [_method_config(cfg, m) for m in names]


def _method_config(cfg, name):
    return MethodConfig(
        name, cfg.ks,
        SStatConfig(hac_lag=cfg.hac_lag, alpha=cfg.alpha),
        SupScoreConfig(cfg.block_length, cfg.bootstrap_draws, cfg.alpha, cfg.seed),
    )


def _calibrations(cfg):
    if cfg.calibration is None:
        return table1_calibrations()
    return load_calibrations(cfg.calibration)


def _log(msg):
    print(msg, file=sys.stderr, flush=True)


def _atomic_json(obj, path):
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_jsonable)
        fh.write("\n")
    os.replace(tmp, path)
    return path


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not serialisable: {type(o).__name__}")


def version_string():
    """Package version plus ``git describe`` when run from a checkout."""
    try:
        desc = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True,
                              text=True, timeout=5, cwd=Path(__file__).resolve().parent)
        if desc.returncode == 0 and desc.stdout.strip():
            return f"{__version__}+g{desc.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_concentration(cfg):
    calibs = _calibrations(cfg)
    path = write_concentration_csv(calibs, cfg.out / "concentration.csv")
    return [path], {"n_calibrations": len(calibs)}


def cmd_simulate_size(cfg):
    calibs = _calibrations(cfg)
    methods = _methods(cfg, list(ALL_METHODS))
    results, logs = [], {}
    for i, calib in enumerate(calibs):
        _log(f"cell {i + 1}/{len(calibs)} (a23, a21, a22) = {calib.cell()}")
        res = monte_carlo_size(calib, methods, cfg.nrep, cfg.alpha, cfg.seed, workers=cfg.workers)
        results.extend(res.values())
        for name, r in res.items():
            logs[f"{calib.cell()}|{name}"] = r.log
    table = write_table1_csv(results, cfg.out / "table1.csv")
    summary = _atomic_json([r.as_dict() for r in results], cfg.out / "campaign.json")
    replog = cfg.out / "replications.jsonl"
    tmp = replog.with_suffix(".jsonl.tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        for key, recs in logs.items():
            for rec in recs:
                fh.write(json.dumps({"key": key, **rec}, sort_keys=True, default=_jsonable) + "\n")
    os.replace(tmp, replog)
    return [table, summary, replog], {"n_cells": len(calibs)}


def cmd_simulate_power(cfg):
    calibs = _calibrations(cfg)
    if len(calibs) != 1:
        raise ConfigurationError("simulate-power needs exactly one calibration")
    methods = _methods(cfg, ["sup_score"])
    grid = HypothesisGrid.parse(cfg.grid)
    outputs = []
    for config in methods:
        _log(f"power map for {config.method} on {len(grid)} points")
        pts, freq = monte_carlo_power(calibs[0], config, grid, cfg.nrep, cfg.alpha, cfg.seed,
                                      workers=cfg.workers)
        outputs.append(write_heatmap_csv(pts, freq, cfg.out / f"power_{config.method}.csv"))
    return outputs, {"n_points": len(grid)}


def _empirical_problem(cfg):
    panel, transforms = read_panel_dir(cfg.data_dir)
    problem = assemble_empirical_design(EmpiricalConfig(transforms=transforms), panel)
    _log(f"empirical design: T={problem.n_obs}, k={problem.k}")
    return problem


def cmd_empirical(cfg):
    problem = _empirical_problem(cfg)
    outputs = write_design_bundle(problem, cfg.out / "design")
    rows = []
    for method in ("crude_threshold", "lasso"):
        idx = select_instruments(problem, SelectionSpec(method, cfg.ks))
        rows.extend([method, problem.labels[j]] for j in idx)
    outputs.append(_write_rows(cfg.out / "selected.csv", ["method", "label"], rows))
    grid = HypothesisGrid.parse(cfg.grid)
    cg = invert_test(problem, grid, _method_config(cfg, "sup_score"))
    outputs.append(write_confidence_grid_csv(cg, cfg.out / "supscore_grid.csv"))
    counts = Counter(cg.argmax_labels).most_common()
    outputs.append(_write_rows(cfg.out / "argmax_counts.csv", ["label", "count"], counts))
    return outputs, {"T": problem.n_obs, "k": problem.k, "points_in_set": int(cg.mask.sum())}


def cmd_invert(cfg):
    problem = _empirical_problem(cfg)
    grid = HypothesisGrid.parse(cfg.grid)
    outputs, extra = [], {}
    for config in _methods(cfg, ["sup_score"]):
        _log(f"inverting {config.method} on {len(grid)} points")
        cg = invert_test(problem, grid, config, workers=cfg.workers)
        outputs.append(write_confidence_grid_csv(cg, cfg.out / f"confidence_{config.method}.csv"))
        extra[config.method] = {"points_in_set": int(cg.mask.sum()),
                                "selected": cg.selected_labels, "errors": len(cg.errors)}
    return outputs, extra


def _write_rows(path, header, rows):
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    os.replace(tmp, path)
    return Path(path)


HANDLERS = {
    "concentration": cmd_concentration,
    "simulate-size": cmd_simulate_size,
    "simulate-power": cmd_simulate_power,
    "empirical": cmd_empirical,
    "invert": cmd_invert,
}


def run(cfg: RunConfig):
    """Execute a resolved configuration; returns the manifest path."""
    cfg.out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    outputs, extra = HANDLERS[cfg.command](cfg)
    manifest = {
        "command": cfg.command,
        "config": cfg.echo(),
        "seed": cfg.seed,
        "version": version_string(),
        "wall_time_s": round(time.perf_counter() - start, 3),
        "outputs": [str(Path(p).relative_to(cfg.out)) for p in outputs],
        "summary": extra,
        "status": "ok",
    }
    return _atomic_json(manifest, cfg.out / "manifest.json")


def _exit_code(exc):
    for cls, code in EXIT_CODES.items():
        if isinstance(exc, cls):
            return code
    return 1


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    out = None
    try:
        cfg = resolve_config(args)
        out = cfg.out
        path = run(cfg)
    except ManyIVError as exc:
        code = _exit_code(exc)
        record = {"status": "error", "error_type": type(exc).__name__, "message": str(exc),
                  "exit_code": code}
        print(json.dumps(record), file=sys.stderr)
        if out is not None:
            try:
                out.mkdir(parents=True, exist_ok=True)
                _atomic_json(record, out / "error.json")
            except OSError:
                pass
        return code
    print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
