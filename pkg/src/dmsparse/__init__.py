"""Sparse recovery with the Difference Map.

Hard-thresholding (l0) compressed sensing and sparse coding, a set of
baseline solvers, a seeded random-measurement benchmark harness and a
patch-based image reconstruction pipeline.
"""

from .linalg import (
    Dictionary,
    PseudoInverse,
    ShapeError,
    SingularMatrixError,
    cholesky_solve,
    matvec,
    pseudo_inverse,
)
from .projections import (
    DataFidelitySet,
    SparsitySet,
    estimate_fA,
    estimate_fB,
    project_fidelity,
    project_sparsity,
)
from .solvers import (
    SOLVERS,
    DmState,
    RecoveryProblem,
    SolverConfig,
    SolverTrace,
    am_solve,
    dm_solve,
    dm_step,
    niht_solve,
    omp_solve,
    solve,
    sp_solve,
)
from .estimators import DifferenceMapCoder, MODDictionaryLearning, SparseRecovery

__version__ = "0.1.0"

__all__ = [
    "Dictionary",
    "PseudoInverse",
    "ShapeError",
    "SingularMatrixError",
    "cholesky_solve",
    "matvec",
    "pseudo_inverse",
    "DataFidelitySet",
    "SparsitySet",
    "estimate_fA",
    "estimate_fB",
    "project_fidelity",
    "project_sparsity",
    "SOLVERS",
    "DmState",
    "RecoveryProblem",
    "SolverConfig",
    "SolverTrace",
    "am_solve",
    "dm_solve",
    "dm_step",
    "niht_solve",
    "omp_solve",
    "solve",
    "sp_solve",
    "DifferenceMapCoder",
    "MODDictionaryLearning",
    "SparseRecovery",
]
