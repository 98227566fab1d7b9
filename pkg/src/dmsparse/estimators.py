"""scikit-learn style wrappers around the solvers and the dictionary learner."""

from __future__ import annotations

import warnings

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .imaging import dm_code, learn_dictionary
from .linalg import Dictionary
from .projections import DEFAULT_BETA, SparsitySet
from .solvers import SOLVERS, RecoveryProblem, SolverConfig, solve


def _check_sparsity(s, n):
    if s is None:
        raise ValueError("n_nonzero_coefs must be set")
    s = int(s)
    if not 0 < s <= n:
        raise ValueError(f"n_nonzero_coefs must be in 1..{n}, got {s}")
    return s


class SparseRecovery(RegressorMixin, BaseEstimator):
    """Recover an s-sparse ``coef_`` with ``X @ coef_ ~= y``.

    ``X`` is the wide measurement matrix (rows are measurements) and ``y``
    the observation vector. ``predict`` maps new measurement rows through
    the recovered coefficients.

    Parameters
    ----------
    solver : {"dm", "am", "niht", "sp", "omp"}
    n_nonzero_coefs : int
    beta : float
        DM step size; ignored by the other solvers.
    time_budget : float
        Seconds allowed after the pseudo-inverse is built.
    max_iter : int
    """

    def __init__(self, solver="dm", n_nonzero_coefs=None, beta=DEFAULT_BETA, time_budget=1.0, max_iter=1_000_000):
        self.solver = solver
        self.n_nonzero_coefs = n_nonzero_coefs
        self.beta = beta
        self.time_budget = time_budget
        self.max_iter = max_iter

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64, y_numeric=True)
        if self.solver not in SOLVERS:
            raise ValueError(f"unknown solver {self.solver!r}")
        m, n = X.shape
        s = _check_sparsity(self.n_nonzero_coefs, n)
        cfg = SolverConfig(beta=self.beta, time_budget=self.time_budget, max_iters=self.max_iter)
        problem = RecoveryProblem(Dictionary(X), y, SparsitySet(s, n))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            trace = solve(self.solver, problem, cfg)
        self.coef_ = np.array(trace.estimate)
        self.n_iter_ = trace.iterations
        self.terminated_by_ = trace.terminated_by
        self.n_features_in_ = n
        return self

    def predict(self, X):
        check_is_fitted(self, "coef_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return X @ self.coef_


class DifferenceMapCoder(TransformerMixin, BaseEstimator):
    """Sparse codes of signals (rows of ``X``) over a fixed dictionary.

    ``dictionary`` has atoms as rows, shape ``(n_atoms, n_features)``, the
    same layout as ``components_`` in scikit-learn's decomposition module.
    """

    def __init__(self, dictionary=None, n_nonzero_coefs=None, beta=DEFAULT_BETA, max_iter=500):
        self.dictionary = dictionary
        self.n_nonzero_coefs = n_nonzero_coefs
        self.beta = beta
        self.max_iter = max_iter

    def fit(self, X=None, y=None):
        components = check_array(self.dictionary, dtype=np.float64)
        K, d = components.shape
        if K <= d:
            raise ValueError(f"dictionary must be overcomplete, got {K} atoms of length {d}")
        self.s_ = _check_sparsity(self.n_nonzero_coefs, K)
        self.components_ = components
        self._dict = Dictionary(components.T)
        self.n_features_in_ = d
        return self

    def transform(self, X):
        check_is_fitted(self, "components_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            codes, _ = dm_code(self._dict, X.T, self.s_, beta=self.beta, max_iters=self.max_iter)
        return codes.T

    def inverse_transform(self, codes):
        check_is_fitted(self, "components_")
        return np.asarray(codes, dtype=np.float64) @ self.components_


class MODDictionaryLearning(TransformerMixin, BaseEstimator):
    """Dictionary learning by DM coding alternated with MOD updates.

    ``fit`` learns ``components_`` (atoms as unit-norm rows); ``transform``
    returns DM sparse codes. ``error_`` holds the training relative error
    after each alternation.
    """

    def __init__(self, n_components=128, n_nonzero_coefs=6, max_iter=20, coder_iter=60,
                 beta=DEFAULT_BETA, random_state=0):
        self.n_components = n_components
        self.n_nonzero_coefs = n_nonzero_coefs
        self.max_iter = max_iter
        self.coder_iter = coder_iter
        self.beta = beta
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        seed = 0 if self.random_state is None else int(self.random_state)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            learned = learn_dictionary(
                X, self.n_components, self.n_nonzero_coefs, iters=self.max_iter,
                seed=seed, coder_iters=self.coder_iter, beta=self.beta,
            )
        self.components_ = np.array(learned.dictionary.matrix.T)
        self.error_ = list(learned.history)
        self.n_iter_ = learned.iterations
        self.n_features_in_ = X.shape[1]
        self._coder = DifferenceMapCoder(self.components_, self.n_nonzero_coefs, self.beta).fit()
        return self

    def transform(self, X):
        check_is_fitted(self, "components_")
        return self._coder.transform(X)

    def inverse_transform(self, codes):
        check_is_fitted(self, "components_")
        return np.asarray(codes, dtype=np.float64) @ self.components_
