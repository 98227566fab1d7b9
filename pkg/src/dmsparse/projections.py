"""Projections onto the sparsity set and the data-fidelity set."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .linalg import Dictionary, ShapeError, as_vector

#: step size used when none is given
DEFAULT_BETA = -0.14


def check_beta(beta):
    beta = float(beta)
    if beta == 0.0 or not np.isfinite(beta):
        raise ValueError(f"beta must be a finite nonzero number, got {beta}")
    return beta


@dataclass(frozen=True)
class SparsitySet:
    """Vectors of length ``n`` with at most ``s`` nonzeros."""

    s: int
    n: int

    def __post_init__(self):
        if not (0 < self.s <= self.n):
            raise ValueError(f"need 0 < s <= n, got s={self.s}, n={self.n}")


@dataclass(frozen=True, eq=False)
class DataFidelitySet:
    """The affine set ``{x : Phi x = y}``.

    ``delta`` (the squared residual radius of the noisy problem) is carried
    for stopping rules only; the projection ignores it.
    """

    dictionary: Dictionary
    y: np.ndarray
    delta: float = 0.0

    def __post_init__(self):
        y = as_vector(self.y, "y")
        if y.shape[0] != self.dictionary.rows:
            raise ShapeError(f"y has length {y.shape[0]}, dictionary has {self.dictionary.rows} rows")
        if self.delta < 0:
            raise ValueError("delta must be nonnegative")
        object.__setattr__(self, "y", y)


def hard_threshold(x, s):
    """Keep the ``s`` largest-magnitude entries of ``x``.

    Ties at the cutoff magnitude go to the lower index. Runs in linear time
    (selection, no full sort).
    """
    n = x.shape[0]
    out = np.zeros_like(x)
    if s >= n:
        out[:] = x
        return out
    mag = np.abs(x)
    cutoff = np.partition(mag, n - s)[n - s]
    above = mag > cutoff
    out[above] = x[above]
    short = s - int(np.count_nonzero(above))
    if short > 0:
        at = np.flatnonzero(mag == cutoff)[:short]
        out[at] = x[at]
    return out


def project_sparsity(x, A):
    x = as_vector(x, "x")
    if x.shape[0] != A.n:
        raise ShapeError(f"x has length {x.shape[0]}, sparsity set has n={A.n}")
    return hard_threshold(x, A.s)


def project_fidelity(x, B):
    """Nearest point to ``x`` on ``{Phi x = y}``: ``x - pinv (Phi x - y)``."""
    x = as_vector(x, "x")
    Phi = B.dictionary.matrix
    if x.shape[0] != Phi.shape[1]:
        raise ShapeError(f"x has length {x.shape[0]}, dictionary has {Phi.shape[1]} columns")
    return x - B.dictionary.pinv.matrix @ (Phi @ x - B.y)


def estimate_fA(x, A, beta):
    beta = check_beta(beta)
    pa = project_sparsity(x, A)
    return pa - (pa - x) / beta


def estimate_fB(x, B, beta):
    beta = check_beta(beta)
    pb = project_fidelity(x, B)
    return pb + (pb - x) / beta
