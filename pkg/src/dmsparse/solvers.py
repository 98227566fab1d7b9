"""Time-budgeted sparse recovery solvers.

Every solver takes a :class:`RecoveryProblem` and a :class:`SolverConfig`
and returns a :class:`SolverTrace`: a list of time-stamped s-sparse
snapshots plus the reason it stopped. Elapsed time includes building the
pseudo-inverse unless ``amortize_precompute`` is set, in which case the
dictionary's cached pseudo-inverse is reused and its cost is left out.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .linalg import Dictionary, ShapeError, SingularMatrixError, _cholesky, as_vector, pseudo_inverse
from .probgen import rel_mse
from .projections import (
    DEFAULT_BETA,
    DataFidelitySet,
    SparsitySet,
    check_beta,
    hard_threshold,
    project_fidelity,
    project_sparsity,
)
from scipy.linalg import lapack

CONVERGED = "converged"
BUDGET = "budget"
MAX_ITERS = "max_iters"

#: iterate-change tolerance for the fixed-point style baselines (AM, NIHT)
STATIONARY_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class RecoveryProblem:
    dictionary: Dictionary
    y_obs: np.ndarray
    sparsity: SparsitySet
    delta: float = 0.0
    truth: np.ndarray | None = None

    def __post_init__(self):
        y = as_vector(self.y_obs, "y_obs")
        if y.shape[0] != self.dictionary.rows:
            raise ShapeError(f"y_obs has length {y.shape[0]}, dictionary has {self.dictionary.rows} rows")
        if self.sparsity.n != self.dictionary.cols:
            raise ShapeError(f"sparsity set has n={self.sparsity.n}, dictionary has {self.dictionary.cols} columns")
        if self.delta < 0:
            raise ValueError("delta must be nonnegative")
        object.__setattr__(self, "y_obs", y)
        if self.truth is not None:
            truth = as_vector(self.truth, "truth")
            if truth.shape[0] != self.dictionary.cols:
                raise ShapeError(f"truth has length {truth.shape[0]}, expected {self.dictionary.cols}")
            object.__setattr__(self, "truth", truth)

    @property
    def s(self):
        return self.sparsity.s

    @property
    def fidelity(self):
        return DataFidelitySet(self.dictionary, self.y_obs, self.delta)


@dataclass(frozen=True)
class SolverConfig:
    """Solver settings.

    ``monitor_tol=None`` means ``1e-7 * sqrt(n)``. ``readout`` selects what
    an unconverged DM run reports: ``"average"`` hard-thresholds the
    index-weighted running mean of ``P_B(f_A(x))``, ``"current"`` reports
    ``P_A(f_B(x))`` of the current iterate. A converged run always reports
    ``P_A(f_B(x))``.

    ``set_order`` fixes which constraint plays the first set in the DM
    update. With ``"fidelity-first"`` (the default) the data-fidelity set is
    first, which is the ``"sparsity-first"`` map with ``beta`` negated; good
    step sizes are then negative, around -0.1 to -0.9.
    """

    beta: float = DEFAULT_BETA
    time_budget: float = 1.0
    max_iters: int = 1_000_000
    monitor_tol: float | None = None
    snapshot_period: int = 10
    amortize_precompute: bool = True
    readout: str = "average"
    set_order: str = "fidelity-first"

    def __post_init__(self):
        check_beta(self.beta)
        if not self.time_budget > 0:
            raise ValueError("time_budget must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")
        if self.monitor_tol is not None and self.monitor_tol < 0:
            raise ValueError("monitor_tol must be nonnegative")
        if self.snapshot_period < 1:
            raise ValueError("snapshot_period must be at least 1")
        if self.readout not in ("average", "current"):
            raise ValueError(f"unknown readout {self.readout!r}")
        if self.set_order not in ("fidelity-first", "sparsity-first"):
            raise ValueError(f"unknown set_order {self.set_order!r}")

    def tolerance(self, n):
        return 1e-7 * math.sqrt(n) if self.monitor_tol is None else self.monitor_tol


@dataclass(frozen=True, eq=False)
class Snapshot:
    elapsed: float
    iteration: int
    estimate: np.ndarray
    monitor: float | None
    residual_l2: float
    rel_mse: float | None = None


@dataclass(eq=False)
class SolverTrace:
    algorithm: str
    snapshots: list = field(default_factory=list)
    precompute_seconds: float = 0.0
    terminated_by: str = MAX_ITERS
    iterations: int = 0

    @property
    def final(self) -> Snapshot:
        return self.snapshots[-1]

    @property
    def estimate(self):
        return self.final.estimate

    @property
    def best(self) -> Snapshot:
        """Snapshot with the smallest data residual."""
        return min(self.snapshots, key=lambda snap: snap.residual_l2)

    def at(self, t):
        """Last snapshot taken at or before elapsed time ``t``."""
        chosen = None
        for snap in self.snapshots:
            if snap.elapsed <= t:
                chosen = snap
            else:
                break
        if chosen is None:
            raise LookupError(f"{self.algorithm}: no snapshot at or before t={t:g}s")
        return chosen


class _Recorder:
    """Clock plus snapshot bookkeeping shared by all solvers."""

    def __init__(self, problem, cfg, name, t0, precompute_seconds):
        self.problem = problem
        self.cfg = cfg
        self.t0 = t0
        self.trace = SolverTrace(name, precompute_seconds=precompute_seconds)
        self._Phi = problem.dictionary.matrix
        self._last_iter = -1

    def elapsed(self):
        return time.perf_counter() - self.t0

    def out_of_time(self):
        return self.elapsed() >= self.cfg.time_budget

    def snapshot(self, iteration, estimate, monitor=None):
        if iteration == self._last_iter:
            return
        self._last_iter = iteration
        s = self.problem.s
        if np.count_nonzero(estimate) > s:
            estimate = hard_threshold(estimate, s)
        estimate = np.array(estimate, dtype=np.float64)
        estimate.flags.writeable = False
        resid = float(np.linalg.norm(self._Phi @ estimate - self.problem.y_obs))
        err = None if self.problem.truth is None else rel_mse(estimate, self.problem.truth)
        elapsed = self.elapsed()
        snaps = self.trace.snapshots
        if snaps and elapsed <= snaps[-1].elapsed:
            elapsed = math.nextafter(snaps[-1].elapsed, math.inf)
        mon = None if monitor is None else float(monitor)
        snaps.append(Snapshot(elapsed, iteration, estimate, mon, resid, err))

    def finish(self, reason, iterations):
        self.trace.terminated_by = reason
        self.trace.iterations = iterations
        return self.trace


def _start(problem, cfg, needs_pinv):
    """Start the clock; returns ``(t0, pinv_matrix, precompute_seconds)``."""
    D = problem.dictionary
    if not needs_pinv:
        return time.perf_counter(), None, 0.0
    if cfg.amortize_precompute:
        P = D.pinv
        return time.perf_counter(), P.matrix, P.seconds
    t0 = time.perf_counter()
    P = pseudo_inverse(D.matrix)
    return t0, P.matrix, P.seconds


# -- Difference Map ---------------------------------------------------------


@dataclass(frozen=True, eq=False)
class DmState:
    """DM iterate with its two branch estimates ``P_A(f_B(x))`` and ``P_B(f_A(x))``."""

    x: np.ndarray
    pa_fb: np.ndarray
    pb_fa: np.ndarray

    @classmethod
    def initial(cls, x, A, B, beta):
        x = as_vector(x, "x")
        pa_fb, pb_fa = _branches(x, A, B, beta)
        return cls(x, pa_fb, pb_fa)


def _branches(x, A, B, beta):
    pa = project_sparsity(x, A)
    f_a = pa - (pa - x) / beta
    pb = project_fidelity(x, B)
    f_b = pb + (pb - x) / beta
    return project_sparsity(f_b, A), project_fidelity(f_a, B)


def dm_step(state, A, B, beta):
    """One Difference Map update ``x + beta * (P_A(f_B(x)) - P_B(f_A(x)))``.

    The branches stored in ``state`` must belong to ``state.x``; use
    :meth:`DmState.initial` to build the first state. Returns the new state
    and the monitor ``|P_A(f_B(x)) - P_B(f_A(x))|`` of the old iterate.
    """
    beta = check_beta(beta)
    if state.x.shape[0] != A.n:
        raise ShapeError(f"state has dimension {state.x.shape[0]}, sparsity set has n={A.n}")
    diff = state.pa_fb - state.pb_fa
    monitor = float(np.linalg.norm(diff))
    x_new = state.x + beta * diff
    pa_fb, pb_fa = _branches(x_new, A, B, beta)
    return DmState(x_new, pa_fb, pb_fa), monitor


def dm_solve(problem, cfg=SolverConfig()):
    """Difference Map for ``{|x|_0 <= s} ∩ {Phi x = y}``.

    Starts from the minimum-norm point ``pinv @ y`` and stops when the
    monitor drops to the tolerance, the time budget runs out, or
    ``max_iters`` is reached. The loop below is :func:`dm_step` with the
    matrix products shared between the two branches.
    """
    beta = check_beta(cfg.beta)
    if cfg.set_order == "fidelity-first":
        beta = -beta
    t0, pinv, pre = _start(problem, cfg, needs_pinv=True)
    rec = _Recorder(problem, cfg, "dm", t0, pre)
    Phi = problem.dictionary.matrix
    PhiT = np.ascontiguousarray(Phi.T)
    y = problem.y_obs
    s = problem.s
    n = Phi.shape[1]
    tol = cfg.tolerance(n)
    period = cfg.snapshot_period
    average = cfg.readout == "average"

    x = pinv @ y
    blowup = 1e8 * (1.0 + float(np.linalg.norm(x)))
    damping = 1.0
    restart_x = x.copy()
    restart_resid = math.inf
    acc = np.zeros(n)
    weight = 0.0
    inv_beta = 1.0 / beta
    rhs = np.empty((y.shape[0], 2))

    reason = MAX_ITERS
    it = 0
    while it < cfg.max_iters:
        pa = hard_threshold(x, s)
        supp = np.flatnonzero(pa)
        Phix = Phi @ x
        # Phi @ f_A without a dense product: f_A = (1 - 1/beta) P_A(x) + x / beta
        Phi_pa = PhiT[supp].T @ pa[supp]
        rhs[:, 0] = Phix - y
        rhs[:, 1] = (1.0 - inv_beta) * Phi_pa + inv_beta * Phix - y
        corr = pinv @ rhs
        f_a = pa - (pa - x) * inv_beta
        f_b = x - (1.0 + inv_beta) * corr[:, 0]
        pa_fb = hard_threshold(f_b, s)
        pb_fa = f_a - corr[:, 1]
        diff = pa_fb - pb_fa
        monitor = float(np.linalg.norm(diff))
        it += 1
        weight += it
        acc += it * pb_fa

        if monitor <= tol:
            rec.snapshot(it, pa_fb, monitor)
            reason = CONVERGED
            break

        x = x + (beta * damping) * diff
        if not np.all(np.isfinite(x)) or float(np.linalg.norm(x)) > blowup:
            x = restart_x.copy()
            damping *= 0.5
            acc[:] = 0.0
            weight = 0.0

        done = rec.out_of_time()
        if done or it % period == 0 or it == cfg.max_iters:
            est = hard_threshold(acc / weight, s) if average and weight > 0 else pa_fb
            rec.snapshot(it, est, monitor)
            resid = rec.trace.snapshots[-1].residual_l2
            if resid < restart_resid:
                restart_resid = resid
                restart_x = x.copy()
        if done:
            reason = BUDGET
            break
    return rec.finish(reason, it)


# -- baselines --------------------------------------------------------------


def am_solve(problem, cfg=SolverConfig()):
    """Alternating Map ``x <- P_A(P_B(x))`` from ``pinv @ y``."""
    t0, pinv, pre = _start(problem, cfg, needs_pinv=True)
    rec = _Recorder(problem, cfg, "am", t0, pre)
    Phi = problem.dictionary.matrix
    y = problem.y_obs
    s = problem.s
    x = hard_threshold(pinv @ y, s)
    reason = MAX_ITERS
    it = 0
    while it < cfg.max_iters:
        x_new = hard_threshold(x - pinv @ (Phi @ x - y), s)
        change = float(np.linalg.norm(x_new - x))
        x = x_new
        it += 1
        if change <= STATIONARY_TOL:
            rec.snapshot(it, x, change)
            reason = CONVERGED
            break
        done = rec.out_of_time()
        if done or it % cfg.snapshot_period == 0 or it == cfg.max_iters:
            rec.snapshot(it, x, change)
        if done:
            reason = BUDGET
            break
    return rec.finish(reason, it)


def niht_solve(problem, cfg=SolverConfig()):
    """Normalized iterative hard thresholding.

    Step ``mu = |g_S|^2 / |Phi g_S|^2`` on the current support ``S`` (the
    support of ``H_s(g)`` when the iterate is zero), shrunk when the
    support changes and the step is too long for the new support.
    """
    t0, _, pre = _start(problem, cfg, needs_pinv=False)
    rec = _Recorder(problem, cfg, "niht", t0, pre)
    Phi = problem.dictionary.matrix
    y = problem.y_obs
    s = problem.s
    n = Phi.shape[1]
    shrink, c = 2.0, 0.01
    x = np.zeros(n)
    resid = y.copy()
    reason = MAX_ITERS
    it = 0
    while it < cfg.max_iters:
        g = Phi.T @ resid
        supp = np.flatnonzero(x)
        if supp.size == 0:
            supp = np.flatnonzero(hard_threshold(g, s))
        g_s = np.zeros(n)
        g_s[supp] = g[supp]
        den = float(np.sum((Phi[:, supp] @ g[supp]) ** 2))
        num = float(g[supp] @ g[supp])
        mu = num / den if den > 0 else 1.0
        x_new = hard_threshold(x + mu * g, s)
        if not np.array_equal(np.flatnonzero(x_new), np.flatnonzero(x)) and np.any(x):
            for _ in range(60):
                step = x_new - x
                d = float(np.sum((Phi @ step) ** 2))
                if d == 0.0 or mu <= (1.0 - c) * float(step @ step) / d:
                    break
                mu /= shrink * (1.0 - c)
                x_new = hard_threshold(x + mu * g, s)
        change = float(np.linalg.norm(x_new - x))
        x = x_new
        resid = y - Phi @ x
        it += 1
        if change <= STATIONARY_TOL * (1.0 + float(np.linalg.norm(x))):
            rec.snapshot(it, x, change)
            reason = CONVERGED
            break
        done = rec.out_of_time()
        if done or it % cfg.snapshot_period == 0 or it == cfg.max_iters:
            rec.snapshot(it, x, change)
        if done:
            reason = BUDGET
            break
    return rec.finish(reason, it)


def _least_squares(Phi, supp, y):
    """Coefficients on ``supp`` minimizing ``|y - Phi[:, supp] c|`` via the Gram matrix."""
    A = Phi[:, supp]
    G = A.T @ A
    b = A.T @ y
    try:
        L = _cholesky(G)
    except SingularMatrixError:
        ridge = 1e-10 * max(float(np.trace(G)), 1.0) / G.shape[0]
        L = _cholesky(G + ridge * np.eye(G.shape[0]))
    c, _ = lapack.dpotrs(L, b, lower=1)
    return c


def sp_solve(problem, cfg=SolverConfig()):
    """Subspace Pursuit: merge, refit, prune, refit while the residual drops."""
    t0, _, pre = _start(problem, cfg, needs_pinv=False)
    rec = _Recorder(problem, cfg, "sp", t0, pre)
    Phi = problem.dictionary.matrix
    y = problem.y_obs
    s = problem.s
    n = Phi.shape[1]
    if 2 * s > n:
        raise ValueError(f"subspace pursuit needs 2s <= n, got s={s}, n={n}")

    def top(v, k):
        return np.sort(np.flatnonzero(hard_threshold(v, k)))

    supp = top(Phi.T @ y, s)
    coef = _least_squares(Phi, supp, y)
    resid = y - Phi[:, supp] @ coef
    rnorm = float(np.linalg.norm(resid))
    x = np.zeros(n)
    x[supp] = coef
    rec.snapshot(0, x, rnorm)
    reason = MAX_ITERS
    it = 0
    while it < cfg.max_iters:
        merged = np.union1d(supp, top(Phi.T @ resid, s))
        wide = np.zeros(n)
        wide[merged] = _least_squares(Phi, merged, y)
        cand = top(wide, s)
        cand_coef = _least_squares(Phi, cand, y)
        cand_resid = y - Phi[:, cand] @ cand_coef
        cand_norm = float(np.linalg.norm(cand_resid))
        it += 1
        if cand_norm >= rnorm:
            reason = CONVERGED
            break
        supp, coef, resid, rnorm = cand, cand_coef, cand_resid, cand_norm
        x = np.zeros(n)
        x[supp] = coef
        done = rec.out_of_time()
        rec.snapshot(it, x, rnorm)
        if done:
            reason = BUDGET
            break
    if reason == CONVERGED:
        rec.snapshot(it, x, rnorm)
    return rec.finish(reason, it)


def omp_solve(problem, cfg=SolverConfig()):
    """Orthogonal Matching Pursuit: one atom per iteration, least-squares refit."""
    t0, _, pre = _start(problem, cfg, needs_pinv=False)
    rec = _Recorder(problem, cfg, "omp", t0, pre)
    Phi = problem.dictionary.matrix
    y = problem.y_obs
    s = problem.s
    n = Phi.shape[1]
    supp = []
    x = np.zeros(n)
    resid = y.copy()
    reason = MAX_ITERS
    it = 0
    limit = min(s, cfg.max_iters)
    while it < limit:
        corr = np.abs(Phi.T @ resid)
        corr[supp] = -1.0
        supp.append(int(np.argmax(corr)))
        coef = _least_squares(Phi, supp, y)
        resid = y - Phi[:, supp] @ coef
        x = np.zeros(n)
        x[supp] = coef
        it += 1
        rnorm = float(np.linalg.norm(resid))
        done = rec.out_of_time()
        rec.snapshot(it, x, rnorm)
        if rnorm <= 1e-12 * (1.0 + float(np.linalg.norm(y))) or it == s:
            reason = CONVERGED
            break
        if done:
            reason = BUDGET
            break
    if not rec.trace.snapshots:
        rec.snapshot(it, x, float(np.linalg.norm(resid)))
    return rec.finish(reason, it)


SOLVERS = {
    "dm": dm_solve,
    "am": am_solve,
    "niht": niht_solve,
    "sp": sp_solve,
    "omp": omp_solve,
}


def solve(name, problem, cfg=SolverConfig()):
    try:
        fn = SOLVERS[name]
    except KeyError:
        raise ValueError(f"unknown solver {name!r}; choose from {sorted(SOLVERS)}") from None
    return fn(problem, cfg)


def with_budget(cfg, seconds):
    return replace(cfg, time_budget=seconds)
