"""Gaussian-process surrogate with ARD squared-exponential kernel.

One independent GP is fitted per output column. Hyperparameters (length
scales, signal variance, relative nugget) maximise the log marginal
likelihood with multi-start L-BFGS-B. Inputs are standardised per
dimension; outputs are centred and scaled per column.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import linalg
from scipy.optimize import minimize
from scipy.stats import qmc
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
_LOG_2PI = np.log(2.0 * np.pi)
_MAX_NUGGET_ESCALATIONS = 8


class SurrogateFitError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainingDesign:
    samples: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    scheme: str
    seed: int


def build_training_design(lower, upper, n: int, seed: int, *, check_size: bool = True) -> TrainingDesign:
    """Latin hypercube sample of ``n`` points in the box ``[lower, upper]``.

    ``check_size=False`` skips the small-design warning (for holdout sets).
    """
    lower = np.atleast_1d(np.asarray(lower, dtype=float))
    upper = np.atleast_1d(np.asarray(upper, dtype=float))
    if lower.shape != upper.shape or lower.ndim != 1 or np.any(lower >= upper):
        raise ValueError("bounds must be equal-length vectors with lower < upper")
    if n < 2:
        raise ValueError(f"need at least 2 training points, got {n}")
    if check_size and n < 10 * lower.size:
        logger.warning("training design of %d points for %d inputs is below the 10*d rule of thumb", n, lower.size)
    unit = qmc.LatinHypercube(d=lower.size, seed=np.random.default_rng(seed)).random(n)
    samples = qmc.scale(unit, lower, upper)
    samples.setflags(write=False)
    return TrainingDesign(samples, lower, upper, "latin_hypercube", seed)


def _sq_dists(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Per-dimension squared differences, shape (d, n_a, n_b)."""
    return (A.T[:, :, None] - B.T[:, None, :]) ** 2


class _SingleGP:
    """Hyperparameters and cached factorisation for one output column."""

    def __init__(self, length_scales, signal_var, nugget, alpha, L, y_mean, y_scale, constant=False):
        self.length_scales = length_scales
        self.signal_var = signal_var
        self.nugget = nugget
        self.alpha = alpha
        self.L = L
        self.y_mean = y_mean
        self.y_scale = y_scale
        self.constant = constant

    def as_dict(self, j: int) -> dict:
        return {
            f"length_scales_{j}": self.length_scales,
            f"signal_var_{j}": np.array(self.signal_var),
            f"nugget_{j}": np.array(self.nugget),
            f"alpha_{j}": self.alpha,
            f"L_{j}": self.L,
            f"y_mean_{j}": np.array(self.y_mean),
            f"y_scale_{j}": np.array(self.y_scale),
            f"constant_{j}": np.array(self.constant),
        }

    @classmethod
    def from_dict(cls, data, j: int) -> "_SingleGP":
        return cls(
            length_scales=data[f"length_scales_{j}"],
            signal_var=float(data[f"signal_var_{j}"]),
            nugget=float(data[f"nugget_{j}"]),
            alpha=data[f"alpha_{j}"],
            L=data[f"L_{j}"],
            y_mean=float(data[f"y_mean_{j}"]),
            y_scale=float(data[f"y_scale_{j}"]),
            constant=bool(data[f"constant_{j}"]),
        )


class GaussianProcessSurrogate(BaseEstimator, RegressorMixin):
    """Independent-output GP regressor.

    Parameters
    ----------
    n_restarts : int
        Number of log-uniform random starts for the likelihood optimiser.
    length_scale_bounds : tuple of float
        Bounds on length scales, in standardised input units.
    nugget_bounds : tuple of float
        Bounds on the nugget, relative to the signal variance.
    signal_var_bounds : tuple of float
        Bounds on the signal variance, in standardised output units.
    random_state : int or None
        Seed for the restart draws.

    ``fit`` optionally takes ``noise_variance``: known per-sample noise
    variances (original output units) added to the kernel diagonal, which
    turns the interpolator into a smoother.
    """

    def __init__(self, n_restarts=8, length_scale_bounds=(1e-2, 1e2), nugget_bounds=(1e-10, 1e-2),
                 signal_var_bounds=(1e-6, 1e3), random_state=None):
        self.n_restarts = n_restarts
        self.length_scale_bounds = length_scale_bounds
        self.nugget_bounds = nugget_bounds
        self.signal_var_bounds = signal_var_bounds
        self.random_state = random_state

    # ------------------------------------------------------------------ fit
    def fit(self, X, y, noise_variance=None):
        X = check_array(X, dtype=float)
        y = check_array(y, dtype=float, ensure_2d=False)
        self._single_output = y.ndim == 1
        Y = y.reshape(len(y), -1)
        if Y.shape[0] != X.shape[0]:
            raise ValueError("X and y have different numbers of rows")
        if np.unique(X, axis=0).shape[0] != X.shape[0]:
            raise ValueError("training inputs contain duplicate rows")
        if noise_variance is not None:
            noise = np.broadcast_to(np.asarray(noise_variance, dtype=float), Y.shape)
            if np.any(noise < 0):
                raise ValueError("noise variances must be nonnegative")
        else:
            noise = np.zeros_like(Y)

        self.x_mean_ = X.mean(axis=0)
        x_scale = X.std(axis=0)
        self.x_scale_ = np.where(x_scale > 0, x_scale, 1.0)
        self.X_train_ = (X - self.x_mean_) / self.x_scale_
        self.X_raw_min_ = X.min(axis=0)
        self.X_raw_max_ = X.max(axis=0)
        self.n_features_in_ = X.shape[1]
        self.has_noise_ = noise_variance is not None
        self.noise_variance_ = np.array(noise)

        rng = np.random.default_rng(self.random_state)
        D = _sq_dists(self.X_train_, self.X_train_)
        self.gps_ = [self._fit_one(D, Y[:, j], noise[:, j], rng, j) for j in range(Y.shape[1])]
        return self

    def _fit_one(self, D, y, noise, rng, j) -> _SingleGP:
        n, d = y.size, D.shape[0]
        y_mean = float(y.mean())
        y_scale = float(y.std())
        if y_scale <= 1e-12 * max(1.0, abs(y_mean)):
            y_scale = 0.0
        if y_scale == 0.0 and not np.any(noise > 0):
            zeros = np.zeros(n)
            return _SingleGP(np.ones(d), 0.0, self.nugget_bounds[0], zeros, np.eye(n), y_mean, 1.0, constant=True)
        if y_scale == 0.0:
            y_scale = float(np.sqrt(noise.mean()))
        yt = (y - y_mean) / y_scale
        nt = noise / y_scale**2

        lo = np.log(np.r_[np.full(d, self.length_scale_bounds[0]), self.signal_var_bounds[0], self.nugget_bounds[0]])
        hi = np.log(np.r_[np.full(d, self.length_scale_bounds[1]), self.signal_var_bounds[1], self.nugget_bounds[1]])
        starts = [np.r_[np.zeros(d), 0.0, np.log(max(self.nugget_bounds[0], 1e-6))]]
        starts += [rng.uniform(lo, hi) for _ in range(self.n_restarts)]
        starts = [np.clip(s, lo, hi) for s in starts]

        best = None
        for s in starts:
            try:
                res = minimize(_neg_log_marginal, s, args=(D, yt, nt), jac=True, method="L-BFGS-B",
                               bounds=list(zip(lo, hi)))
            except (np.linalg.LinAlgError, linalg.LinAlgError):
                continue
            if np.all(np.isfinite(res.x)) and np.isfinite(res.fun) and (best is None or res.fun < best.fun):
                best = res
        if best is None:
            raise SurrogateFitError(f"output {j}: no optimiser start produced a finite likelihood")
        if not best.success:
            logger.info("output %d: optimiser stopped early (%s); keeping best-so-far model", j, best.message)

        p = best.x
        ell, sf2, g = np.exp(p[:d]), float(np.exp(p[d])), float(np.exp(p[d + 1]))
        R = np.exp(-0.5 * np.tensordot(1.0 / ell**2, D, axes=1))
        for attempt in range(_MAX_NUGGET_ESCALATIONS + 1):
            K = sf2 * R
            K[np.diag_indices_from(K)] += sf2 * g + nt
            try:
                L = linalg.cholesky(K, lower=True)
                break
            except linalg.LinAlgError:
                g_new = min(g * 10.0 if g > 0 else 1e-10, 1.0)
                logger.warning("output %d: kernel not positive definite, escalating nugget %.3g -> %.3g", j, g, g_new)
                g = g_new
        else:
            raise SurrogateFitError(f"output {j}: kernel ill-conditioned after nugget escalation")
        alpha = linalg.cho_solve((L, True), yt)
        return _SingleGP(ell, sf2, g, alpha, L, y_mean, y_scale)

    # -------------------------------------------------------------- predict
    def predict(self, X, return_var=False):
        """Predictive mean (and latent variance) in original output units."""
        check_is_fitted(self, "gps_")
        X = check_array(X, dtype=float)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        Xs = (X - self.x_mean_) / self.x_scale_
        D = _sq_dists(Xs, self.X_train_)
        means, variances = [], []
        for gp in self.gps_:
            R = np.exp(-0.5 * np.tensordot(1.0 / gp.length_scales**2, D, axes=1))
            m, v = _posterior(gp, R)
            means.append(m)
            variances.append(v)
        mean, var = np.column_stack(means), np.column_stack(variances)
        if self._single_output:
            mean, var = mean[:, 0], var[:, 0]
        return (mean, var) if return_var else mean

    def extrapolation_mask(self, X) -> np.ndarray:
        """True for rows outside the bounding box of the training inputs."""
        check_is_fitted(self, "gps_")
        X = check_array(X, dtype=float)
        return np.any((X < self.X_raw_min_) | (X > self.X_raw_max_), axis=1)

    def at_fixed_inputs(self, X_fixed, fixed_columns) -> "FixedInputPredictor":
        """Precompute the kernel factor over ``fixed_columns`` for repeated queries.

        Returns a callable taking the remaining columns (one row) that gives
        predictions at every row of ``X_fixed``.
        """
        check_is_fitted(self, "gps_")
        return FixedInputPredictor(self, np.atleast_2d(np.asarray(X_fixed, dtype=float)), list(fixed_columns))

    # ---------------------------------------------------------- persistence
    def save(self, path) -> Path:
        check_is_fitted(self, "gps_")
        path = Path(path)
        arrays = {
            "format_version": np.array(FORMAT_VERSION),
            "params": np.array([self.n_restarts, *self.length_scale_bounds, *self.nugget_bounds,
                                *self.signal_var_bounds], dtype=float),
            "random_state": np.array(-1 if self.random_state is None else self.random_state),
            "x_mean": self.x_mean_,
            "x_scale": self.x_scale_,
            "X_train": self.X_train_,
            "X_raw_min": self.X_raw_min_,
            "X_raw_max": self.X_raw_max_,
            "noise_variance": self.noise_variance_,
            "has_noise": np.array(self.has_noise_),
            "single_output": np.array(self._single_output),
            "n_outputs": np.array(len(self.gps_)),
        }
        for j, gp in enumerate(self.gps_):
            arrays.update(gp.as_dict(j))
        with path.open("wb") as fh:
            np.savez(fh, **arrays)
        return path

    @classmethod
    def load(cls, path) -> "GaussianProcessSurrogate":
        with np.load(Path(path)) as data:
            version = int(data["format_version"])
            if version != FORMAT_VERSION:
                raise ValueError(f"unsupported surrogate format version {version}")
            p = data["params"]
            rs = int(data["random_state"])
            model = cls(n_restarts=int(p[0]), length_scale_bounds=(p[1], p[2]), nugget_bounds=(p[3], p[4]),
                        signal_var_bounds=(p[5], p[6]), random_state=None if rs < 0 else rs)
            model.x_mean_ = data["x_mean"]
            model.x_scale_ = data["x_scale"]
            model.X_train_ = data["X_train"]
            model.X_raw_min_ = data["X_raw_min"]
            model.X_raw_max_ = data["X_raw_max"]
            model.noise_variance_ = data["noise_variance"]
            model.has_noise_ = bool(data["has_noise"])
            model._single_output = bool(data["single_output"])
            model.n_features_in_ = model.X_train_.shape[1]
            model.gps_ = [_SingleGP.from_dict(data, j) for j in range(int(data["n_outputs"]))]
        return model


def _posterior(gp: _SingleGP, R: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if gp.constant:
        return np.full(R.shape[0], gp.y_mean), np.zeros(R.shape[0])
    k = gp.signal_var * R
    mean = k @ gp.alpha * gp.y_scale + gp.y_mean
    v = linalg.solve_triangular(gp.L, k.T, lower=True, check_finite=False)
    var = gp.signal_var - np.einsum("ij,ij->j", v, v)
    return mean, np.maximum(var, 0.0) * gp.y_scale**2


def _neg_log_marginal(p, D, y, noise):
    d = D.shape[0]
    ell2 = np.exp(2.0 * p[:d])
    sf2, g = np.exp(p[d]), np.exp(p[d + 1])
    scaled = D / ell2[:, None, None]
    R = np.exp(-0.5 * scaled.sum(axis=0))
    K = sf2 * R
    K[np.diag_indices_from(K)] += sf2 * g + noise
    L = linalg.cholesky(K, lower=True)
    alpha = linalg.cho_solve((L, True), y)
    nll = 0.5 * y @ alpha + np.log(np.diag(L)).sum() + 0.5 * y.size * _LOG_2PI
    W = linalg.cho_solve((L, True), np.eye(y.size)) - np.outer(alpha, alpha)
    # dK/dlog(ell_k) = K_R * D_k / ell_k^2, with K_R the signal part of K
    KR = sf2 * R
    grad = np.empty_like(p)
    grad[:d] = 0.5 * np.einsum("ij,kij->k", W * KR, scaled)
    grad[d] = 0.5 * np.sum(W * KR) + 0.5 * sf2 * g * np.trace(W)
    grad[d + 1] = 0.5 * sf2 * g * np.trace(W)
    return nll, grad


class FixedInputPredictor:
    """Fast predictions for a fixed set of rows in some columns.

    Used inside MCMC, where the design points are fixed and only the
    calibration parameters change between calls.
    """

    def __init__(self, model: GaussianProcessSurrogate, X_fixed: np.ndarray, fixed_columns):
        self.model = model
        self.fixed_columns = fixed_columns
        d = model.n_features_in_
        self.free_columns = [c for c in range(d) if c not in fixed_columns]
        xs = (X_fixed - model.x_mean_[fixed_columns]) / model.x_scale_[fixed_columns]
        D_fixed = _sq_dists(xs, model.X_train_[:, fixed_columns])
        self._fixed_factor = [
            np.exp(-0.5 * np.tensordot(1.0 / gp.length_scales[fixed_columns] ** 2, D_fixed, axes=1))
            for gp in model.gps_
        ]
        self.n_rows = X_fixed.shape[0]

    def __call__(self, free_values) -> tuple[np.ndarray, np.ndarray]:
        m = self.model
        f = self.free_columns
        v = (np.asarray(free_values, dtype=float).reshape(1, -1) - m.x_mean_[f]) / m.x_scale_[f]
        diff2 = (m.X_train_[:, f] - v) ** 2
        means, variances = [], []
        for gp, fixed in zip(m.gps_, self._fixed_factor):
            free = np.exp(-0.5 * diff2 @ (1.0 / gp.length_scales[f] ** 2))
            mu, var = _posterior(gp, fixed * free[None, :])
            means.append(mu)
            variances.append(var)
        return np.column_stack(means), np.column_stack(variances)


def predict_gp(model: GaussianProcessSurrogate, X) -> tuple[np.ndarray, np.ndarray]:
    """Predictive mean and code variance per output."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    mask = model.extrapolation_mask(X)
    if np.any(mask):
        logger.info("%d of %d query points lie outside the training box", int(mask.sum()), len(mask))
    return model.predict(X, return_var=True)


def validate_gp(model: GaussianProcessSurrogate, X_holdout, y_holdout, z: float = 1.96) -> dict:
    """Holdout RMSE and coverage of the mean +/- z*std interval, per output."""
    X_holdout = np.atleast_2d(np.asarray(X_holdout, dtype=float))
    y_holdout = np.asarray(y_holdout, dtype=float).reshape(len(X_holdout), -1)
    if len(X_holdout) == 0:
        raise ValueError("holdout set is empty")
    mean, var = model.predict(X_holdout, return_var=True)
    mean = mean.reshape(y_holdout.shape)
    sd = np.sqrt(var).reshape(y_holdout.shape)
    err = mean - y_holdout
    rmse = np.sqrt(np.mean(err**2, axis=0))
    # a tolerance absorbs exact hits on the interval edge when sd is ~0
    covered = np.abs(err) <= z * sd + 1e-9 * (1.0 + np.abs(y_holdout))
    return {"rmse": rmse, "coverage_fraction": covered.mean(axis=0)}
