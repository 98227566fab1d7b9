"""Dense linear algebra kernels.

Matrices and vectors are plain ``float64`` numpy arrays. The pseudo-inverse
of a wide matrix is built from a Cholesky factorization of the m x m Gram
matrix, ``pinv = Phi.T @ inv(Phi @ Phi.T)``.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy.linalg import lapack

#: relative size below which a squared Cholesky pivot counts as zero
PIVOT_RTOL = 1e-12


class ShapeError(ValueError):
    """Operand dimensions do not agree."""


class SingularMatrixError(np.linalg.LinAlgError):
    """A Cholesky pivot was not positive.

    ``pivot`` is the zero-based index of the offending pivot.
    """

    def __init__(self, pivot, message=None):
        self.pivot = int(pivot)
        super().__init__(message or f"matrix is not positive definite (pivot {self.pivot})")


def as_matrix(a, name="matrix"):
    """Return ``a`` as a finite 2-D float64 array."""
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] == 0 or arr.shape[1] == 0:
        raise ShapeError(f"{name} must be a non-empty 2-D array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} has non-finite entries")
    return arr


def as_vector(v, name="vector"):
    """Return ``v`` as a finite 1-D float64 array."""
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1 or arr.shape[0] == 0:
        raise ShapeError(f"{name} must be a non-empty 1-D array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} has non-finite entries")
    return arr


def matvec(A, v):
    A = as_matrix(A, "A")
    v = as_vector(v, "v")
    if A.shape[1] != v.shape[0]:
        raise ShapeError(f"cannot multiply {A.shape[0]}x{A.shape[1]} matrix by length-{v.shape[0]} vector")
    return A @ v


def _cholesky(G):
    """Lower Cholesky factor of ``G``; raises on a non-positive or negligible pivot."""
    L, info = lapack.dpotrf(G, lower=1, clean=1)
    if info > 0:
        raise SingularMatrixError(info - 1)
    if info < 0:
        raise ValueError(f"dpotrf: illegal argument {-info}")
    d = np.diag(L) ** 2
    scale = max(float(np.max(np.diag(G))), np.finfo(float).tiny)
    small = np.flatnonzero(d <= PIVOT_RTOL * scale)
    if small.size:
        raise SingularMatrixError(small[0])
    return L


def cholesky_solve(G, B):
    """Solve ``G @ X = B`` for symmetric positive-definite ``G``.

    ``B`` may be a matrix or a vector; the result has the same shape.
    Raises :class:`SingularMatrixError` carrying the failing pivot index.
    """
    G = as_matrix(G, "G")
    B_arr = np.asarray(B, dtype=np.float64)
    if G.shape[0] != G.shape[1]:
        raise ShapeError(f"G must be square, got {G.shape}")
    if B_arr.shape[0] != G.shape[0]:
        raise ShapeError(f"B has {B_arr.shape[0]} rows, G is {G.shape[0]}x{G.shape[0]}")
    if not np.all(np.isfinite(B_arr)):
        raise ValueError("B has non-finite entries")
    if np.max(np.abs(G - G.T)) > 1e-12 * max(1.0, float(np.max(np.abs(G)))):
        raise ValueError("G is not symmetric")
    L = _cholesky(G)
    X, info = lapack.dpotrs(L, B_arr, lower=1)
    if info != 0:
        raise ValueError(f"dpotrs: illegal argument {-info}")
    return X


@dataclass(frozen=True)
class PseudoInverse:
    """Moore-Penrose pseudo-inverse of a wide matrix.

    ``matrix`` has shape ``(source_cols, source_rows)``. ``rank`` is the
    numerical rank of the source; ``matrix @ source = I`` holds only when
    it equals ``source_rows``.
    """

    matrix: np.ndarray
    source_rows: int
    source_cols: int
    seconds: float = 0.0
    rank: int | None = None

    @property
    def full_rank(self):
        return self.rank is None or self.rank == self.source_rows

    def __post_init__(self):
        if self.matrix.shape != (self.source_cols, self.source_rows):
            raise ShapeError(
                f"pseudo-inverse shape {self.matrix.shape} does not transpose "
                f"{self.source_rows}x{self.source_cols}"
            )


def _rank_revealing_gram_solve(G, B):
    """``pinv(G) @ B`` for symmetric positive semidefinite ``G``.

    Uses a pivoted Cholesky factorization ``G[p][:, p] = L L^T`` truncated at
    the numerical rank r, and ``pinv(G) = L (L^T L)^-2 L^T`` (permuted).
    Returns ``(X, rank)``.
    """
    tol = PIVOT_RTOL * max(float(np.max(np.diag(G))), np.finfo(float).tiny)
    C, piv, rank, info = lapack.dpstrf(G, tol=tol, lower=1)
    if info < 0:
        raise ValueError(f"dpstrf: illegal argument {-info}")
    if rank == 0:
        raise SingularMatrixError(0, "Gram matrix is numerically zero")
    perm = piv - 1
    L = np.tril(C)[:, :rank]
    K = L.T @ L
    Lk = _cholesky(0.5 * (K + K.T))
    Bp = B[perm]
    W = lapack.dpotrs(Lk, lapack.dpotrs(Lk, L.T @ Bp, lower=1)[0], lower=1)[0]
    X = np.empty_like(Bp)
    X[perm] = L @ W
    return X, int(rank)


def pseudo_inverse(Phi, fallback=True):
    """Pseudo-inverse ``Phi.T @ inv(Phi @ Phi.T)`` of a wide matrix.

    If the Gram matrix cannot be factored (rank deficient) and ``fallback``
    is true, a ``RuntimeWarning`` is emitted and the Moore-Penrose inverse is
    formed from a rank-revealing pivoted Cholesky factorization instead;
    with ``fallback=False`` the :class:`SingularMatrixError` propagates.
    """
    Phi = as_matrix(Phi, "Phi")
    m, n = Phi.shape
    if m >= n:
        raise ShapeError(f"expected a wide matrix (rows < cols), got {m}x{n}")
    start = time.perf_counter()
    G = Phi @ Phi.T
    if not np.all(np.isfinite(G)):
        raise FloatingPointError("Gram matrix Phi @ Phi.T overflowed")
    G = 0.5 * (G + G.T)
    rank = m
    try:
        L = _cholesky(G)
    except SingularMatrixError as exc:
        if not fallback:
            raise
        warnings.warn(
            f"Gram matrix is singular at pivot {exc.pivot}; using a rank-revealing factorization",
            RuntimeWarning,
            stacklevel=2,
        )
        Z, rank = _rank_revealing_gram_solve(G, Phi)
    else:
        # pinv^T = inv(G) @ Phi
        Z, info = lapack.dpotrs(L, Phi, lower=1)
        if info != 0:
            raise ValueError(f"dpotrs: illegal argument {-info}")
    pinv = np.ascontiguousarray(Z.T)
    pinv.flags.writeable = False
    return PseudoInverse(pinv, m, n, time.perf_counter() - start, rank)


@dataclass(frozen=True, eq=False)
class Dictionary:
    """Measurement matrix / dictionary with a lazily cached pseudo-inverse.

    Columns are atoms. The matrix is stored read-only so that one instance
    can be shared across concurrent solves.
    """

    matrix: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        arr = np.array(as_matrix(self.matrix, "dictionary"), copy=True)
        arr.flags.writeable = False
        object.__setattr__(self, "matrix", arr)

    @property
    def rows(self):
        return self.matrix.shape[0]

    @property
    def cols(self):
        return self.matrix.shape[1]

    @property
    def shape(self):
        return self.matrix.shape

    @cached_property
    def pinv(self) -> PseudoInverse:
        return pseudo_inverse(self.matrix)

    @property
    def has_pinv(self):
        return "pinv" in self.__dict__

    @cached_property
    def column_norms(self):
        return np.linalg.norm(self.matrix, axis=0)


# -- text format ------------------------------------------------------------


def write_matrix(a, path, header=None):
    """Write a matrix (or a vector, as one column) to the text format.

    First line ``rows cols``, then one whitespace-separated row per line.
    ``header`` lines are emitted first, each prefixed with ``#``.
    """
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    lines = []
    if header:
        for line in str(header).splitlines():
            lines.append(f"# {line}")
    lines.append(f"{arr.shape[0]} {arr.shape[1]}")
    for row in arr:
        lines.append(" ".join(repr(float(v)) for v in row))
    try:
        Path(path).write_text("\n".join(lines) + "\n")
    except OSError as exc:
        raise OSError(f"{path}: {exc.strerror or exc}") from exc


def read_matrix(path):
    """Read the text matrix format; returns ``(array, comment_lines)``."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise OSError(f"{path}: {exc.strerror or exc}") from exc
    comments = []
    body = []
    for line in text.splitlines():
        stripped = line.strip()
        if not stripped:
            continue
        if stripped.startswith("#"):
            comments.append(stripped[1:].strip())
        else:
            body.append(stripped)
    if not body:
        raise ValueError(f"{path}: missing 'rows cols' line")
    try:
        rows, cols = (int(t) for t in body[0].split())
    except ValueError:
        raise ValueError(f"{path}: bad size line {body[0]!r}") from None
    if len(body) - 1 != rows:
        raise ValueError(f"{path}: expected {rows} rows, found {len(body) - 1}")
    data = np.array([[float(t) for t in line.split()] for line in body[1:]], dtype=np.float64)
    if data.shape != (rows, cols):
        raise ValueError(f"{path}: expected {rows}x{cols} entries, found shape {data.shape}")
    return data, comments


def read_vector(path):
    data, _ = read_matrix(path)
    if data.shape[1] != 1 and data.shape[0] != 1:
        raise ShapeError(f"{path}: expected a single row or column, got {data.shape}")
    return data.ravel()
