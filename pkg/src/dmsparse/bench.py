"""Seeded benchmark suites, step-size tuning and CSV output.

Experiments are described by a small ``key = value`` text file::

    # sparsity sweep
    suite = vary-s
    grid = 50, 100, 150
    trials = 10
    budget = 2
    algorithms = dm, am, niht, sp, omp
    master_seed = 1000
    output = vary_s.csv

Other keys: ``mode`` (``final`` or ``trace``), ``beta``, ``m``, ``n``, ``s``,
``snr_db``, ``size_ratio``, ``max_iters``, ``workers`` and, for the image
suite, ``image`` and ``dictionary`` paths.

Trial ``k`` of every grid point uses the problem seed ``master_seed + k``,
so all algorithms see the same problems.
"""

from __future__ import annotations

import csv
import math
import statistics
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from .probgen import ProblemSpec, make_problem, rel_mse
from .solvers import SOLVERS, SolverConfig, solve

SUITES = ("vary-s", "vary-noise", "vary-size", "image", "tune-beta")
MODES = ("final", "trace")
DEFAULT_SIZES = ((100, 250), (200, 500), (400, 1000))

#: base regime shared by the random-matrix suites
BASE_M, BASE_N, BASE_S, BASE_SNR = 400, 1000, 150, 20.0


class ConfigError(ValueError):
    """Malformed or infeasible experiment configuration."""


@dataclass(frozen=True)
class ExperimentConfig:
    """One benchmark run.

    ``grid`` holds sparsity levels for ``vary-s``, ``image`` and
    ``tune-beta`` (which takes exactly one), target SNRs in dB for
    ``vary-noise`` and ``(m, n)`` pairs for ``vary-size``.
    """

    suite: str
    grid: tuple
    trials: int = 10
    budget: float = 1.0
    algorithms: tuple = ("dm", "am", "niht", "sp", "omp")
    master_seed: int = 0
    output_path: str | None = None
    mode: str = "final"
    beta: float = -0.14
    m: int = BASE_M
    n: int = BASE_N
    snr_db: float = BASE_SNR
    s: int = BASE_S
    size_ratio: float = 1.0 / 3.0
    image: str | None = None
    dictionary: str | None = None
    workers: int = 1
    max_iters: int = 1_000_000

    def __post_init__(self):
        if self.suite not in SUITES:
            raise ConfigError(f"unknown suite {self.suite!r}; choose from {', '.join(SUITES)}")
        if self.trials < 1:
            raise ConfigError("trials must be at least 1")
        if not self.grid:
            raise ConfigError("grid must not be empty")
        if not self.algorithms:
            raise ConfigError("algorithms must not be empty")
        for alg in self.algorithms:
            if alg not in SOLVERS:
                raise ConfigError(f"unknown algorithm {alg!r}; choose from {', '.join(SOLVERS)}")
        if not self.budget > 0:
            raise ConfigError("budget must be positive")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {', '.join(MODES)}")
        if self.beta == 0 or not math.isfinite(self.beta):
            raise ConfigError("beta must be finite and nonzero")
        if self.max_iters < 1:
            raise ConfigError("max_iters must be at least 1")
        if self.workers < 1:
            raise ConfigError("workers must be at least 1")
        if not 0 <= self.master_seed < 2**63:
            raise ConfigError("master_seed must be a nonnegative 63-bit integer")
        if self.suite == "tune-beta" and len(self.grid) != 1:
            raise ConfigError("tune-beta takes a single sparsity level as its grid")
        if self.suite == "image" and (self.image is None or self.dictionary is None):
            raise ConfigError("the image suite needs 'image' and 'dictionary' paths")
        for spec in self.problem_specs():
            if not 0 < spec[0] < spec[1]:
                raise ConfigError(f"infeasible size m={spec[0]}, n={spec[1]}: need 0 < m < n")
            if not 0 < spec[2] <= spec[1]:
                raise ConfigError(f"infeasible sparsity s={spec[2]} for n={spec[1]}")

    def problem_specs(self):
        """``(m, n, s, snr_db)`` for each grid value, in grid order."""
        if self.suite in ("vary-s", "tune-beta"):
            return [(self.m, self.n, int(v), self.snr_db) for v in self.grid]
        if self.suite == "vary-noise":
            return [(self.m, self.n, self.s, float(v)) for v in self.grid]
        if self.suite == "vary-size":
            return [(m, n, max(1, round(n * self.size_ratio)), self.snr_db) for m, n in self.grid]
        return []


_INT_KEYS = {"trials", "master_seed", "m", "n", "s", "workers", "max_iters"}
_FLOAT_KEYS = {"budget", "beta", "snr_db", "size_ratio"}
_STR_KEYS = {"suite", "mode", "image", "dictionary", "output_path"}
_ALIASES = {"seed": "master_seed", "output": "output_path", "snr": "snr_db"}


def _parse_grid_value(suite, token):
    if suite == "vary-size":
        parts = token.lower().split("x")
        if len(parts) != 2:
            raise ValueError(f"size {token!r} is not of the form MxN")
        return (int(parts[0]), int(parts[1]))
    if suite == "vary-noise":
        return float(token)
    return int(token)


def parse_config(text, source="<config>"):
    """Parse ``key = value`` lines into an :class:`ExperimentConfig`."""
    raw = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        key = _ALIASES.get(key, key)
        if key in raw:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        raw[key] = (lineno, value)

    if "suite" not in raw:
        raise ConfigError(f"{source}: missing 'suite'")
    suite = raw["suite"][1]
    kwargs = {}
    for key, (lineno, value) in raw.items():
        try:
            if key == "grid":
                kwargs[key] = tuple(_parse_grid_value(suite, t.strip()) for t in value.split(",") if t.strip())
            elif key == "algorithms":
                kwargs[key] = tuple(t.strip().lower() for t in value.split(",") if t.strip())
            elif key in _INT_KEYS:
                kwargs[key] = int(value)
            elif key in _FLOAT_KEYS:
                kwargs[key] = float(value)
            elif key in _STR_KEYS:
                kwargs[key] = value
            else:
                raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"{source}:{lineno}: bad value for {key!r}: {exc}") from None
    if "grid" not in kwargs and suite == "vary-size":
        kwargs["grid"] = DEFAULT_SIZES
    if "grid" not in kwargs:
        raise ConfigError(f"{source}: missing 'grid'")
    try:
        return ExperimentConfig(**kwargs)
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from None


def load_config(path):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror or exc}") from None
    return parse_config(text, source=str(path))


# -- records ----------------------------------------------------------------


@dataclass(frozen=True)
class BenchRecord:
    suite: str
    algorithm: str
    m: int
    n: int
    s: int
    snr_db_target: float
    trial_seed: int
    elapsed_s: float
    rel_mse: float
    residual_l2: float
    terminated_by: str


FIELDS = tuple(f.name for f in fields(BenchRecord))
_INT_FIELDS = {"m", "n", "s", "trial_seed"}
_FLOAT_FIELDS = {"snr_db_target", "elapsed_s", "rel_mse", "residual_l2"}


def _fmt(value):
    if isinstance(value, float):
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return f"{value:.17g}"
    return str(value)


def _write_rows(fh, records):
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(FIELDS)
    for rec in records:
        writer.writerow([_fmt(getattr(rec, name)) for name in FIELDS])


def emit_csv(records, path):
    """Write records as CSV, header first, floats with 17 significant digits.

    ``path`` may also be an open text stream.
    """
    if hasattr(path, "write"):
        _write_rows(path, records)
        return
    try:
        with open(path, "w", newline="") as fh:
            _write_rows(fh, records)
    except OSError as exc:
        raise OSError(f"{path}: {exc.strerror or exc}") from exc


def read_csv(path):
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise OSError(f"{path}: {exc.strerror or exc}") from exc
    if not rows or tuple(rows[0]) != FIELDS:
        raise ValueError(f"{path}: unexpected header")
    out = []
    for lineno, row in enumerate(rows[1:], 2):
        if len(row) != len(FIELDS):
            raise ValueError(f"{path}:{lineno}: expected {len(FIELDS)} columns, got {len(row)}")
        values = {}
        for name, cell in zip(FIELDS, row):
            if name in _INT_FIELDS:
                values[name] = int(cell)
            elif name in _FLOAT_FIELDS:
                values[name] = float(cell)
            else:
                values[name] = cell
        out.append(BenchRecord(**values))
    return out


@dataclass(frozen=True)
class Summary:
    algorithm: str
    m: int
    n: int
    s: int
    snr_db_target: float
    count: int
    mean_rel_mse: float
    median_rel_mse: float


def summarize(records):
    """Mean and median ``rel_mse`` of the final records per algorithm and grid point."""
    groups = {}
    for rec in records:
        if rec.terminated_by == "snapshot":
            continue
        key = (rec.algorithm, rec.m, rec.n, rec.s, rec.snr_db_target)
        groups.setdefault(key, []).append(rec.rel_mse)
    return [
        Summary(*key, len(vals), statistics.fmean(vals), statistics.median(vals))
        for key, vals in groups.items()
    ]


# -- suites -----------------------------------------------------------------


def _solver_config(cfg):
    return SolverConfig(beta=cfg.beta, time_budget=cfg.budget, max_iters=cfg.max_iters)


def _run_trial(cfg, alg, spec, trial):
    m, n, s, snr = spec
    seed = cfg.master_seed + trial
    with warnings.catch_warnings():
        # generated matrices are rank deficient by construction
        warnings.simplefilter("ignore", RuntimeWarning)
        problem = make_problem(ProblemSpec(m, n, s, snr, seed))
        t0 = time.perf_counter()
        trace = solve(alg, problem, _solver_config(cfg))
        wall = time.perf_counter() - t0
    snr_target = math.inf if snr is None else float(snr)
    base = dict(suite=cfg.suite, algorithm=alg, m=m, n=n, s=s, snr_db_target=snr_target, trial_seed=seed)
    out = []
    if cfg.mode == "trace":
        for snap in trace.snapshots:
            out.append(BenchRecord(
                **base,
                elapsed_s=snap.elapsed + trace.precompute_seconds,
                rel_mse=rel_mse(snap.estimate, problem.truth),
                residual_l2=snap.residual_l2,
                terminated_by="snapshot",
            ))
    final = trace.final
    out.append(BenchRecord(
        **base,
        elapsed_s=wall,
        rel_mse=rel_mse(final.estimate, problem.truth),
        residual_l2=final.residual_l2,
        terminated_by=trace.terminated_by,
    ))
    return out


def _run_image(cfg, alg, s, trial):
    from .imaging import read_dictionary, read_pgm, reconstruct_image

    img = read_pgm(cfg.image)
    learned = read_dictionary(cfg.dictionary)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        rec = reconstruct_image(img, learned, solver=alg, cfg=_solver_config(cfg), s=s)
    orig = img.pixels.ravel()
    diff = rec.image.pixels.ravel() - orig
    return [BenchRecord(
        suite=cfg.suite,
        algorithm=alg,
        m=learned.rows,
        n=learned.cols,
        s=s,
        snr_db_target=rec.overall_snr_db,
        trial_seed=cfg.master_seed + trial,
        elapsed_s=rec.wall_seconds,
        rel_mse=float(diff @ diff) / float(orig @ orig),
        residual_l2=float(np.linalg.norm(diff)),
        terminated_by="image",
    )]


def run_suite(cfg):
    """Run every (algorithm, grid value, trial) once; records in that order."""
    if cfg.suite == "tune-beta":
        raise ConfigError("use tune_beta for the tune-beta suite")
    if cfg.suite == "image":
        jobs = [(alg, int(s), t) for alg in cfg.algorithms for s in cfg.grid for t in range(cfg.trials)]
        work = lambda job: _run_image(cfg, *job)  # noqa: E731
    else:
        specs = cfg.problem_specs()
        jobs = [(alg, spec, t) for alg in cfg.algorithms for spec in specs for t in range(cfg.trials)]
        work = lambda job: _run_trial(cfg, *job)  # noqa: E731
    if cfg.workers == 1:
        results = map(work, jobs)
    else:
        pool = ThreadPoolExecutor(max_workers=cfg.workers)
        results = pool.map(work, jobs)
    records = []
    for chunk in results:
        records.extend(chunk)
    if cfg.workers != 1:
        pool.shutdown()
    return records


# -- step-size tuning -------------------------------------------------------


def coarse_betas():
    return [round(k * 0.1, 10) for k in range(-12, 13) if k != 0]


def fine_betas(center):
    grid = (round(center + k * 0.01, 10) for k in range(-50, 51))
    return [b for b in grid if b != 0]


def tune_beta(cfg, progress=None):
    """Two-stage grid search for the DM step size.

    Coarse step 0.1 on [-1.2, 1.2], then step 0.01 within 0.5 of the
    coarse winner; zero is skipped in both. Each step size is scored by the
    mean ``rel_mse`` of DM over ``cfg.trials`` training problems. Returns
    ``(best_beta, table)`` with the table in evaluation order.
    """
    (m, n, s, snr), = cfg.problem_specs()
    problems = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        for t in range(cfg.trials):
            problem = make_problem(ProblemSpec(m, n, s, snr, cfg.master_seed + t))
            problem.dictionary.pinv
            problems.append(problem)

    table = []

    def score(beta):
        sc = replace(_solver_config(cfg), beta=beta)
        errs = [rel_mse(solve("dm", p, sc).estimate, p.truth) for p in problems]
        value = statistics.fmean(errs)
        table.append((beta, value))
        if progress is not None:
            progress(beta, value)
        return value

    best = min(coarse_betas(), key=score)
    for beta in fine_betas(best):
        score(beta)
    best_beta, _ = min(table, key=lambda row: row[1])
    return best_beta, table


def emit_beta_table(table, path):
    try:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(("beta", "mean_rel_mse"))
            for beta, value in table:
                writer.writerow((_fmt(float(beta)), _fmt(float(value))))
    except OSError as exc:
        raise OSError(f"{path}: {exc.strerror or exc}") from exc
