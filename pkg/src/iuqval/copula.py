"""Gaussian copula with empirical marginals, for resampling MCMC output."""

from __future__ import annotations

import csv
import logging
from pathlib import Path

import numpy as np
from scipy import stats
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

logger = logging.getLogger(__name__)


class GaussianCopula(BaseEstimator):
    """Fit rank dependence and marginals of a sample; draw new samples from it.

    Normal scores come from average ranks, ``Phi^-1(rank / (m + 1))``. New
    draws map correlated standard normals through ``Phi`` and then through
    the inverse empirical CDF, interpolating linearly between order
    statistics, so generated values never leave the source range.

    Constant columns are kept as point masses. A column whose ranks
    coincide exactly with an earlier column's is treated as a copy of it
    (its normal-score correlation is exactly 1).

    Parameters
    ----------
    min_samples : int
        Smallest accepted source sample size.
    shrinkage_step : float
        Increment of the shrinkage toward the identity applied when the
        score correlation is not positive definite.
    """

    def __init__(self, min_samples=50, shrinkage_step=0.01):
        self.min_samples = min_samples
        self.shrinkage_step = shrinkage_step

    def fit(self, X, y=None):
        X = check_array(X, dtype=float)
        m, d = X.shape
        if m < self.min_samples:
            raise ValueError(f"need at least {self.min_samples} samples to fit a copula, got {m}")
        self.n_features_in_ = d
        self.n_source_samples_ = m
        self.marginals_ = np.sort(X, axis=0)
        self.marginals_.setflags(write=False)
        self.degenerate_ = np.ptp(X, axis=0) == 0
        if np.all(self.degenerate_):
            raise ValueError("all columns are constant; nothing to model")
        for j in np.flatnonzero(self.degenerate_):
            logger.warning("column %d is constant and is treated as a point mass", j)

        ranks = np.column_stack([stats.rankdata(X[:, j]) for j in range(d)])
        scores = stats.norm.ppf(ranks / (m + 1.0))

        # copy_of_[j] = index of the driving column (itself unless a duplicate)
        copy_of = np.arange(d)
        for j in range(d):
            if self.degenerate_[j]:
                continue
            for k in range(j):
                if not self.degenerate_[k] and copy_of[k] == k and np.array_equal(ranks[:, j], ranks[:, k]):
                    copy_of[j] = k
                    break
        self.copy_of_ = copy_of
        active = np.flatnonzero(~self.degenerate_ & (copy_of == np.arange(d)))
        self.active_ = active

        corr = np.atleast_2d(np.corrcoef(scores[:, active], rowvar=False))
        corr = 0.5 * (corr + corr.T)
        np.fill_diagonal(corr, 1.0)
        self.shrinkage_ = 0.0
        chol = _try_cholesky(corr)
        lam = 0.0
        while chol is None:
            lam = round(lam + self.shrinkage_step, 10)
            if lam > 1.0:
                raise np.linalg.LinAlgError("could not regularise the score correlation matrix")
            chol = _try_cholesky((1.0 - lam) * corr + lam * np.eye(len(active)))
        if lam > 0:
            logger.warning("score correlation not positive definite; shrunk toward identity by %.2f", lam)
            corr = (1.0 - lam) * corr + lam * np.eye(len(active))
            self.shrinkage_ = lam
        self._active_corr = corr
        self._chol = chol

        pos = {j: a for a, j in enumerate(active)}
        full = np.eye(d)
        for j in np.flatnonzero(~self.degenerate_):
            for k in np.flatnonzero(~self.degenerate_):
                full[j, k] = corr[pos[copy_of[j]], pos[copy_of[k]]]
        self.correlation_ = full
        return self

    def sample(self, n: int, random_state=None) -> np.ndarray:
        check_is_fitted(self, "correlation_")
        if n < 1:
            raise ValueError("n must be at least 1")
        rng = np.random.default_rng(random_state)
        k = len(self.active_)
        z = rng.standard_normal((n, k)) @ self._chol.T
        u_active = stats.norm.cdf(z)
        m, d = self.marginals_.shape
        probs = np.arange(1, m + 1) / (m + 1.0)
        out = np.empty((n, d))
        col_u = {j: u_active[:, a] for a, j in enumerate(self.active_)}
        for j in range(d):
            if self.degenerate_[j]:
                out[:, j] = self.marginals_[0, j]
            else:
                out[:, j] = np.interp(col_u[self.copy_of_[j]], probs, self.marginals_[:, j])
        return out


def _try_cholesky(a: np.ndarray):
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        return None


def fit_copula(samples, **kwargs) -> GaussianCopula:
    return GaussianCopula(**kwargs).fit(samples)


def sample_copula(model: GaussianCopula, n: int, seed) -> np.ndarray:
    return model.sample(n, random_state=seed)


def write_samples_csv(samples, path) -> Path:
    """Persist generated samples in the chain-file layout, minus ``log_posterior``."""
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", *(f"theta_{i + 1}" for i in range(samples.shape[1]))])
        for i, row in enumerate(samples):
            w.writerow([i + 1, *(repr(float(v)) for v in row)])
    return path
