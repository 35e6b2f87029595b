"""scikit-learn compatible estimators.

Both estimators take the input signal ``u`` as ``X`` (1-D, or a single
column) and the output signal as ``y``. Since the models are dynamic, sample
order matters and ``X`` must not be shuffled.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_degrees, check_signal, check_signal_pair
from .decomposer import LMOptions, multistart
from .system import simulate
from .volterra import DEFAULT_COND_LIMIT, build_regression, estimate_kernels, volterra_predict


class VolterraRegressor(RegressorMixin, BaseEstimator):
    """Truncated Volterra model fitted by least squares over unique monomials.

    Parameters
    ----------
    memory : int
        Largest input lag ``m``; kernels have ``m + 1`` entries per mode.
    degrees : tuple of int
        Kernel degrees to estimate.
    cond_limit : float
        Largest acceptable condition estimate of the design matrix.

    Attributes
    ----------
    kernels_ : dict of int -> ndarray
        Symmetric kernel per degree.
    diagnostics_ : dict
        Condition estimate, residual RMS and design size.
    """

    def __init__(self, memory=20, degrees=(2, 3), cond_limit=DEFAULT_COND_LIMIT):
        self.memory = memory
        self.degrees = degrees
        self.cond_limit = cond_limit

    def fit(self, X, y):
        u, y = check_signal_pair(X, y)
        problem = build_regression(u, y, self.memory, check_degrees(self.degrees))
        self.kernels_, self.diagnostics_ = estimate_kernels(
            problem, self.cond_limit, full_output=True
        )
        self.n_features_in_ = 1
        return self

    def predict(self, X):
        check_is_fitted(self, "kernels_")
        return volterra_predict(self.kernels_, check_signal(X, "input"))


class ParallelWienerHammerstein(RegressorMixin, BaseEstimator):
    """Parallel Wiener-Hammerstein model identified from its Volterra kernels.

    ``fit`` estimates kernels of memory ``m_p + m_q`` by least squares, then
    decomposes them jointly (structured CPD with shared front/back filters)
    from ``n_starts`` random initial points and keeps the lowest-cost result.
    ``fit_kernels`` skips the first step when kernels are already at hand.

    Attributes
    ----------
    kernels_ : dict of int -> ndarray
    fits_ : list of FitResult
        One per start, in start order.
    best_index_ : int
    model_ : ParallelWhModel
        Normalized model of the best start; used by ``predict``.
    """

    def __init__(
        self,
        n_branches=2,
        m_p=10,
        m_q=10,
        degrees=(2, 3),
        n_starts=100,
        max_iter=500,
        gtol=1e-10,
        xtol=1e-10,
        init_filter_std=0.3,
        init_coef_std=0.1,
        degree_weights=None,
        cond_limit=DEFAULT_COND_LIMIT,
        random_state=None,
        n_jobs=None,
    ):
        self.n_branches = n_branches
        self.m_p = m_p
        self.m_q = m_q
        self.degrees = degrees
        self.n_starts = n_starts
        self.max_iter = max_iter
        self.gtol = gtol
        self.xtol = xtol
        self.init_filter_std = init_filter_std
        self.init_coef_std = init_coef_std
        self.degree_weights = degree_weights
        self.cond_limit = cond_limit
        self.random_state = random_state
        self.n_jobs = n_jobs

    def _options(self) -> LMOptions:
        return LMOptions(
            max_iters=self.max_iter,
            gtol=self.gtol,
            xtol=self.xtol,
            init_filter_std=self.init_filter_std,
            init_coef_std=self.init_coef_std,
            weights=self.degree_weights,
        )

    def _seed(self):
        # None gives fresh entropy; an int or SeedSequence is reproducible.
        if isinstance(self.random_state, np.random.Generator):
            return int(self.random_state.integers(2**63))
        if self.random_state is None:
            return np.random.SeedSequence().entropy
        return self.random_state

    def fit(self, X, y):
        u, y = check_signal_pair(X, y)
        volterra = VolterraRegressor(self.m_p + self.m_q, self.degrees, self.cond_limit).fit(u, y)
        self.estimation_diagnostics_ = volterra.diagnostics_
        return self.fit_kernels(volterra.kernels_)

    def fit_kernels(self, kernels):
        """Decompose given kernels (a dict ``degree -> tensor``)."""
        degrees = check_degrees(self.degrees)
        self.kernels_ = {d: np.asarray(kernels[d], dtype=float) for d in degrees}
        self.fits_, self.best_index_ = multistart(
            self.kernels_,
            self.n_branches,
            self.m_p,
            self.m_q,
            degrees,
            self.n_starts,
            self._seed(),
            self._options(),
            n_jobs=self.n_jobs,
        )
        self.best_fit_ = self.fits_[self.best_index_]
        self.model_ = self.best_fit_.model
        self.n_features_in_ = 1
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        return simulate(self.model_, check_signal(X, "input"))
