"""Random measurement problems, noise calibration and recovery metrics.

Randomness comes from numpy's counter-based Philox generator. A problem's
master seed is split into independent streams by using the pair
``(seed, stream)`` as the Philox key, so the matrix, the signal and the
noise can each be regenerated on their own.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .linalg import Dictionary, as_vector

MATRIX_STREAM = 0
SIGNAL_STREAM = 1
NOISE_STREAM = 2


def stream_rng(seed, stream):
    """Generator for one named stream of a master seed."""
    key = np.array([int(seed) & 0xFFFFFFFFFFFFFFFF, int(stream)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


@dataclass(frozen=True)
class ProblemSpec:
    m: int
    n: int
    s: int
    target_snr_db: float | None = None
    seed: int = 0

    def __post_init__(self):
        if not (0 < self.m < self.n):
            raise ValueError(f"need 0 < m < n, got m={self.m}, n={self.n}")
        if not (0 < self.s <= self.n):
            raise ValueError(f"need 0 < s <= n, got s={self.s}, n={self.n}")
        if not (0 <= int(self.seed) < 2**64):
            raise ValueError("seed must fit in 64 unsigned bits")

    @property
    def noise_free(self):
        return self.target_snr_db is None or math.isinf(self.target_snr_db)


def gen_dictionary(spec):
    """Gaussian matrix with zero-mean, unit-norm columns (in that order).

    Zero-mean columns make the rows sum to zero, so the matrix has rank
    ``m - 1``; the pseudo-inverse takes its rank-revealing fallback.
    """
    rng = stream_rng(spec.seed, MATRIX_STREAM)
    Phi = rng.standard_normal((spec.m, spec.n))
    Phi -= Phi.mean(axis=0)
    Phi /= np.linalg.norm(Phi, axis=0)
    return Dictionary(Phi, meta={"seed": spec.seed})


def gen_sparse_signal(spec):
    rng = stream_rng(spec.seed, SIGNAL_STREAM)
    support = rng.choice(spec.n, size=spec.s, replace=False)
    values = rng.standard_normal(spec.s)
    while np.any(values == 0.0):
        zero = values == 0.0
        values[zero] = rng.standard_normal(int(zero.sum()))
    x = np.zeros(spec.n)
    x[support] = values
    return x


def calibrate_noise(y, target_snr_db, seed=0):
    """Add Gaussian noise scaled so that the realized SNR hits the target.

    Returns ``(y_tilde, eps)``. ``target_snr_db`` of ``None`` or ``inf``
    means noise free.
    """
    y = as_vector(y, "y")
    norm_y = float(np.linalg.norm(y))
    if norm_y == 0.0:
        raise ValueError("cannot calibrate noise against a zero signal")
    if target_snr_db is None or math.isinf(target_snr_db):
        if target_snr_db is not None and target_snr_db < 0:
            raise ValueError("target SNR of -inf is not meaningful")
        return y.copy(), 0.0
    eta = stream_rng(seed, NOISE_STREAM).standard_normal(y.shape[0])
    eps = norm_y / (10.0 ** (target_snr_db / 20.0) * float(np.linalg.norm(eta)))
    return y + eps * eta, eps


def rel_mse(estimate, truth):
    estimate = np.asarray(estimate, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if estimate.shape != truth.shape:
        raise ValueError(f"length mismatch: {estimate.shape} vs {truth.shape}")
    denom = float(truth @ truth)
    if denom == 0.0:
        raise ValueError("relative error against a zero truth vector")
    diff = estimate - truth
    return float(diff @ diff) / denom


def snr_db(reference, test):
    """``20 log10(|ref| / |ref - test|)``; ``inf`` for an exact match."""
    reference = np.asarray(reference, dtype=np.float64)
    test = np.asarray(test, dtype=np.float64)
    if reference.shape != test.shape:
        raise ValueError(f"length mismatch: {reference.shape} vs {test.shape}")
    err = float(np.linalg.norm(reference - test))
    if err == 0.0:
        return math.inf
    ref = float(np.linalg.norm(reference))
    if ref == 0.0:
        return -math.inf
    return 20.0 * math.log10(ref / err)


def generate(spec):
    """Build ``(dictionary, x, y_tilde, eps)`` for one seeded problem."""
    D = gen_dictionary(spec)
    x = gen_sparse_signal(spec)
    y = D.matrix @ x
    if spec.noise_free:
        return D, x, y, 0.0
    y_tilde, eps = calibrate_noise(y, spec.target_snr_db, spec.seed)
    return D, x, y_tilde, eps


def make_problem(spec):
    """Seeded :class:`~dmsparse.solvers.RecoveryProblem` with ground truth."""
    from .projections import SparsitySet
    from .solvers import RecoveryProblem

    D, x, y_tilde, eps = generate(spec)
    delta = eps**2 * spec.m
    return RecoveryProblem(D, y_tilde, SparsitySet(spec.s, spec.n), delta=delta, truth=x)
