"""Bayesian inverse UQ: likelihood with the full covariance budget, a
residual-trained bias model, adaptive random-walk Metropolis and chain
summaries."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .benchmark import ComputerModel
from .core import Dataset, PriorSpec
from .surrogate import GaussianProcessSurrogate

logger = logging.getLogger(__name__)

_LOG_2PI = math.log(2.0 * math.pi)


class LikelihoodError(ValueError):
    pass


class McmcError(RuntimeError):
    pass


# ---------------------------------------------------------------- predictors
class Predictor:
    """Uniform view over a computer model or its GP surrogate.

    ``predict(X, theta)`` returns the model mean and the code variance
    (identically zero for the computer model itself).
    """

    def __init__(self, source, n_design: int | None = None):
        self.source = source
        if isinstance(source, ComputerModel):
            self.n_design = source.n_design
        elif isinstance(source, GaussianProcessSurrogate):
            if n_design is None:
                raise ValueError("n_design is required for a surrogate over joint (x, theta) inputs")
            self.n_design = n_design
        else:
            raise TypeError(f"unsupported model type {type(source).__name__}")

    @property
    def is_surrogate(self) -> bool:
        return isinstance(self.source, GaussianProcessSurrogate)

    def predict(self, X, theta) -> tuple[np.ndarray, np.ndarray]:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        theta = np.atleast_2d(np.asarray(theta, dtype=float))
        if not self.is_surrogate:
            mean = self.source.evaluate(X, theta)
            return mean, np.zeros_like(mean)
        n = max(len(X), len(theta))
        Z = np.hstack([np.broadcast_to(X, (n, X.shape[1])), np.broadcast_to(theta, (n, theta.shape[1]))])
        mean, var = self.source.predict(Z, return_var=True)
        mean, var = mean.reshape(n, -1), var.reshape(n, -1)
        if not np.all(np.isfinite(mean)):
            raise FloatingPointError("surrogate produced non-finite output")
        return mean, var

    def at_design(self, X) -> Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]]:
        """Return ``f(theta) -> (mean, code_var)`` evaluated at every row of ``X``."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if self.is_surrogate:
            return self.source.at_fixed_inputs(X, range(self.n_design))
        return lambda theta: self.predict(X, np.asarray(theta, dtype=float)[None, :])


def as_predictor(model_or_surrogate, n_design: int | None = None) -> Predictor:
    if isinstance(model_or_surrogate, Predictor):
        return model_or_surrogate
    return Predictor(model_or_surrogate, n_design)


# ---------------------------------------------------------------- bias model
class BiasModel(BaseEstimator):
    """Model discrepancy delta(x) learned as a GP over the design variables.

    The GP is fitted to residuals between measurements and the model at a
    reference parameter point, with the measurement (plus code) variance on
    the kernel diagonal. Its predictive mean is delta(x) and its latent
    predictive variance is the diagonal of the bias covariance. With
    ``enabled=False`` both are identically zero.
    """

    def __init__(self, enabled=True, n_restarts=8, random_state=None):
        self.enabled = enabled
        self.n_restarts = n_restarts
        self.random_state = random_state

    def fit(self, X, residuals, noise_variance=None):
        X = check_array(X, dtype=float)
        residuals = check_array(residuals, dtype=float)
        self.n_features_in_ = X.shape[1]
        self.n_outputs_ = residuals.shape[1]
        if not self.enabled:
            self.gp_ = None
            return self
        if len(X) < 5:
            raise ValueError(f"bias estimation needs at least 5 observations, got {len(X)}")
        gp = GaussianProcessSurrogate(n_restarts=self.n_restarts, random_state=self.random_state)
        self.gp_ = gp.fit(X, residuals, noise_variance=noise_variance)
        return self

    def predict(self, X, return_var=False):
        check_is_fitted(self, "n_outputs_")
        X = check_array(X, dtype=float)
        if self.gp_ is None:
            zeros = np.zeros((len(X), self.n_outputs_))
            return (zeros, zeros.copy()) if return_var else zeros
        mean, var = self.gp_.predict(X, return_var=True)
        mean, var = mean.reshape(len(X), -1), var.reshape(len(X), -1)
        return (mean, var) if return_var else mean

    def save(self, path) -> Path:
        check_is_fitted(self, "n_outputs_")
        path = Path(path)
        if self.gp_ is None:
            with path.open("wb") as fh:
                np.savez(fh, disabled=np.array(True), n_features=np.array(self.n_features_in_),
                         n_outputs=np.array(self.n_outputs_))
            return path
        return self.gp_.save(path)

    @classmethod
    def load(cls, path) -> "BiasModel":
        with np.load(Path(path)) as data:
            if "disabled" in data:
                model = cls(enabled=False)
                model.gp_ = None
                model.n_features_in_ = int(data["n_features"])
                model.n_outputs_ = int(data["n_outputs"])
                return model
        gp = GaussianProcessSurrogate.load(path)
        model = cls(enabled=True, n_restarts=gp.n_restarts, random_state=gp.random_state)
        model.gp_ = gp
        model.n_features_in_ = gp.n_features_in_
        model.n_outputs_ = len(gp.gps_)
        return model


def estimate_bias(data: Dataset, model_or_surrogate, theta_ref, *, enabled: bool = True,
                  n_restarts: int = 8, random_state=None) -> BiasModel:
    """Fit the bias GP on residuals ``y_E(x) - y_M(x, theta_ref)`` over the IUQ designs."""
    predictor = as_predictor(model_or_surrogate, data.X.shape[1])
    bias = BiasModel(enabled=enabled, n_restarts=n_restarts, random_state=random_state)
    if not enabled:
        return bias.fit(data.X, np.zeros_like(data.y))
    if len(data) < 5:
        raise ValueError(f"bias estimation needs at least 5 IUQ observations, got {len(data)}")
    mean, code_var = predictor.predict(data.X, np.asarray(theta_ref, dtype=float)[None, :])
    return bias.fit(data.X, data.y - mean, noise_variance=data.variance + code_var)


# ---------------------------------------------------------------- likelihood
def gaussian_logpdf(residual, covariance) -> float:
    """Log density of a zero-mean multivariate normal at ``residual``."""
    r = np.atleast_1d(np.asarray(residual, dtype=float))
    cov = np.asarray(covariance, dtype=float)
    if cov.ndim < 2:
        cov = np.diag(np.broadcast_to(cov, r.shape))
    try:
        L = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise LikelihoodError("covariance is not positive definite") from exc
    z = np.linalg.solve(L, r)
    return float(-0.5 * z @ z - np.log(np.diag(L)).sum() - 0.5 * r.size * _LOG_2PI)


def _diag_logpdf(residual: np.ndarray, var: np.ndarray) -> float:
    return float(-0.5 * np.sum(residual**2 / var + np.log(var)) - 0.5 * residual.size * _LOG_2PI)


def _report_collapse(exp_var, bias_var, code_var):
    bad = np.argwhere(exp_var + bias_var + code_var <= 0)
    i, j = bad[0]
    raise LikelihoodError(
        f"total variance is zero for observation {i}, QoI {j}: "
        f"exp={exp_var[i, j]:.3g}, bias={bias_var[i, j]:.3g}, code={code_var[i, j]:.3g}"
    )


def log_likelihood(theta, data: Dataset, model_or_surrogate, bias: BiasModel | None = None,
                   include_code: bool = True) -> float:
    """Sum over observations of log N(y_E - y_M(x, theta) - delta(x); 0, Sigma).

    Sigma = Sigma_exp + Sigma_bias + Sigma_code, all diagonal. Sigma_code is
    zero when the computer model itself is passed instead of a surrogate.
    """
    predictor = as_predictor(model_or_surrogate, data.X.shape[1])
    theta = np.asarray(theta, dtype=float)
    mean, code_var = predictor.predict(data.X, theta[None, :])
    return LikelihoodTerms(data, predictor, bias, include_code, _use_fast=False).evaluate(theta, mean, code_var)


class LikelihoodTerms:
    """Precomputed pieces of the log likelihood for repeated evaluation in MCMC."""

    def __init__(self, data: Dataset, model_or_surrogate, bias: BiasModel | None = None,
                 include_code: bool = True, _use_fast: bool = True):
        self.data = data
        self.predictor = as_predictor(model_or_surrogate, data.X.shape[1])
        self.include_code = include_code
        if bias is not None and bias.enabled:
            self.delta, self.bias_var = bias.predict(data.X, return_var=True)
        else:
            self.delta = np.zeros_like(data.y)
            self.bias_var = np.zeros_like(data.y)
        self.target = data.y - self.delta
        self.base_var = data.variance + self.bias_var
        self._at = self.predictor.at_design(data.X) if _use_fast else None

    def evaluate(self, theta, mean=None, code_var=None) -> float:
        if mean is None:
            mean, code_var = self._at(np.asarray(theta, dtype=float))
        if not np.all(np.isfinite(mean)):
            raise LikelihoodError("model output is not finite")
        code_var = code_var if self.include_code else np.zeros_like(mean)
        var = self.base_var + code_var
        if np.any(var <= 0):
            _report_collapse(self.data.variance, self.bias_var, code_var)
        return _diag_logpdf(self.target - mean, var)

    __call__ = evaluate


def make_log_posterior(prior: PriorSpec, likelihood: Callable[[np.ndarray], float]) -> Callable:
    """Uniform prior times likelihood; -inf outside the prior box."""

    def log_post(theta):
        lp = prior.log_density(theta)
        if not np.isfinite(lp):
            return -math.inf
        return lp + likelihood(theta)

    return log_post


# ---------------------------------------------------------------- MCMC
@dataclass(frozen=True)
class McmcChain:
    samples: np.ndarray
    log_posterior: np.ndarray
    acceptance_rate: float
    burn_in: int
    thinning: int
    seed: int | None
    param_names: tuple[str, ...] = ()

    def __len__(self) -> int:
        return len(self.samples)


@dataclass(frozen=True)
class McmcConfig:
    n_samples: int = 100_000
    burn_in: int = 20_000
    thinning: int = 10
    seed: int = 0
    initial: tuple[float, ...] | None = None
    target_acceptance: float = 0.3
    adapt_window: int = 100


class AdaptiveMetropolis:
    """Random-walk Metropolis with a diagonal Gaussian proposal.

    During burn-in the proposal is tuned every ``adapt_window`` steps: the
    global scale moves toward ``target_acceptance`` and, from halfway
    through burn-in, the per-coordinate scales follow the running standard
    deviation of the chain. Adaptation stops after burn-in.
    """

    def __init__(self, n_samples=100_000, burn_in=20_000, thinning=10, target_acceptance=0.3,
                 adapt_window=100, random_state=None):
        self.n_samples = n_samples
        self.burn_in = burn_in
        self.thinning = thinning
        self.target_acceptance = target_acceptance
        self.adapt_window = adapt_window
        self.random_state = random_state

    def sample(self, log_post: Callable, prior: PriorSpec, initial=None) -> McmcChain:
        if self.n_samples < 1 or self.burn_in < 0 or self.thinning < 1:
            raise ValueError("need n_samples >= 1, burn_in >= 0, thinning >= 1")
        rng = np.random.default_rng(self.random_state)
        x = np.array(prior.nominal if initial is None else initial, dtype=float)
        if x.shape != (prior.dim,) or not prior.contains(x):
            raise ValueError("initial point must lie inside the prior box")
        lp = float(log_post(x))
        if not np.isfinite(lp):
            raise McmcError("log posterior is not finite at the initial point")

        d = prior.dim
        scale = 0.1 * prior.width
        log_global = math.log(2.38 / math.sqrt(d))
        min_scale = 1e-12 * prior.width
        window_accepts = 0
        hist_sum = np.zeros(d)
        hist_sq = np.zeros(d)
        hist_n = 0

        n_keep = self.n_samples // self.thinning
        samples = np.empty((n_keep, d))
        log_posts = np.empty(n_keep)
        accepted_after = 0
        k = 0
        total = self.burn_in + self.n_samples

        for it in range(total):
            proposal = x + math.exp(log_global) * scale * rng.standard_normal(d)
            log_u = math.log(rng.random())
            if prior.contains(proposal):
                lp_new = float(log_post(proposal))
                if math.isnan(lp_new) or lp_new == math.inf:
                    raise McmcError(f"log posterior returned {lp_new} at step {it}")
                if log_u < lp_new - lp:
                    x, lp = proposal, lp_new
                    window_accepts += 1
                    if it >= self.burn_in:
                        accepted_after += 1

            if it < self.burn_in:
                if it >= self.burn_in // 4:
                    hist_sum += x
                    hist_sq += x * x
                    hist_n += 1
                if (it + 1) % self.adapt_window == 0:
                    rate = window_accepts / self.adapt_window
                    if window_accepts == 0:
                        logger.warning("no proposals accepted in adaptation window ending at step %d; shrinking step", it + 1)
                    n_adapt = (it + 1) // self.adapt_window
                    log_global += (rate - self.target_acceptance) * min(1.0, 10.0 / math.sqrt(n_adapt))
                    if it >= self.burn_in // 2 and hist_n > 10 * d:
                        var = hist_sq / hist_n - (hist_sum / hist_n) ** 2
                        sd = np.sqrt(np.maximum(var, 0.0))
                        scale = np.maximum(sd, 1e-3 * scale)
                    if np.all(math.exp(log_global) * scale < min_scale):
                        raise McmcError(f"proposal step collapsed during adaptation at step {it + 1}")
                    window_accepts = 0
            else:
                j = it - self.burn_in
                if (j + 1) % self.thinning == 0:
                    samples[k] = x
                    log_posts[k] = lp
                    k += 1

        acceptance = accepted_after / self.n_samples
        if accepted_after == 0:
            raise McmcError("no proposals accepted after burn-in; step size collapsed or posterior is degenerate")
        samples.setflags(write=False)
        log_posts.setflags(write=False)
        return McmcChain(samples, log_posts, acceptance, self.burn_in, self.thinning, self.random_state,
                         tuple(prior.names))


def run_mcmc(prior: PriorSpec, log_post: Callable, config: McmcConfig | None = None) -> McmcChain:
    config = config or McmcConfig()
    sampler = AdaptiveMetropolis(n_samples=config.n_samples, burn_in=config.burn_in, thinning=config.thinning,
                                 target_acceptance=config.target_acceptance, adapt_window=config.adapt_window,
                                 random_state=config.seed)
    return sampler.sample(log_post, prior, config.initial)


# ---------------------------------------------------------------- summaries
@dataclass(frozen=True)
class PosteriorMoments:
    mean: np.ndarray
    std: np.ndarray
    names: tuple[str, ...] = ()


def posterior_moments(chain: McmcChain, min_length: int = 100) -> PosteriorMoments:
    if len(chain) < min_length:
        raise ValueError(f"chain has {len(chain)} retained samples, need at least {min_length}")
    s = chain.samples
    # shifting by the first sample keeps a constant chain's mean exact
    shifted = s - s[0]
    return PosteriorMoments(s[0] + shifted.mean(axis=0), shifted.std(axis=0, ddof=1), chain.param_names)


def format_moments(moments: PosteriorMoments, digits: int = 4) -> list[str]:
    names = moments.names or tuple(f"theta_{i + 1}" for i in range(len(moments.mean)))
    return [f"{n}  mean {m:.{digits}f}  std {s:.{digits}f}" for n, m, s in zip(names, moments.mean, moments.std)]


def _autocorr(x: np.ndarray) -> np.ndarray:
    n = len(x)
    x = x - x.mean()
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(x, size)
    acf = np.fft.irfft(f * np.conj(f), size)[:n]
    return acf / acf[0]


def effective_sample_size(x) -> float:
    """ESS of a 1-D chain using Geyer's initial monotone sequence."""
    x = np.asarray(x, dtype=float)
    n = len(x)
    if n < 4:
        raise ValueError("chain too short for an ESS estimate")
    if np.ptp(x) == 0:
        return 1.0
    rho = _autocorr(x)
    pairs = rho[: n - n % 2].reshape(-1, 2).sum(axis=1)
    tau = -1.0
    running = math.inf
    for p in pairs:
        if p <= 0:
            break
        running = min(running, p)
        tau += 2.0 * running
    return float(n / max(tau, 1.0 / n))


def split_rhat(segments) -> float:
    """Split potential scale reduction over a list of equal-length 1-D segments."""
    halves = []
    for seg in segments:
        seg = np.asarray(seg, dtype=float)
        h = len(seg) // 2
        halves += [seg[:h], seg[h : 2 * h]]
    m = min(len(h) for h in halves)
    arr = np.array([h[:m] for h in halves])
    W = arr.var(axis=1, ddof=1).mean()
    if W == 0:
        return math.nan
    B = m * arr.mean(axis=1).var(ddof=1)
    var_plus = (m - 1) / m * W + B / m
    return float(math.sqrt(var_plus / W))


def chain_diagnostics(chain: McmcChain | list[McmcChain], n_segments: int = 2) -> dict:
    """Acceptance rate, per-parameter ESS and split-PSRF.

    A single chain is cut into ``n_segments`` pieces; a list of chains uses
    one segment per chain. Constant parameters are flagged degenerate with
    PSRF reported as NaN.
    """
    chains = chain if isinstance(chain, list) else [chain]
    if len(chains) == 1:
        s = chains[0].samples
        if len(s) < 4 * n_segments:
            raise ValueError("chain too short for diagnostics")
        cut = len(s) // n_segments
        segments = [s[i * cut : (i + 1) * cut] for i in range(n_segments)]
    else:
        segments = [c.samples for c in chains]
        if min(len(s) for s in segments) < 4:
            raise ValueError("chain too short for diagnostics")
    d = segments[0].shape[1]
    ess = np.array([sum(effective_sample_size(seg[:, p]) for seg in segments) for p in range(d)])
    psrf = np.array([split_rhat([seg[:, p] for seg in segments]) for p in range(d)])
    return {
        "acceptance_rate": float(np.mean([c.acceptance_rate for c in chains])),
        "effective_sample_size": ess,
        "split_potential_scale_reduction": psrf,
        "degenerate": bool(np.any(np.isnan(psrf))),
    }


def format_diagnostics(diag: dict, names=None) -> str:
    d = len(diag["effective_sample_size"])
    names = names or [f"theta_{i + 1}" for i in range(d)]
    lines = [f"acceptance_rate = {diag['acceptance_rate']:.6f}", f"degenerate = {str(diag['degenerate']).lower()}"]
    for n, e, r in zip(names, diag["effective_sample_size"], diag["split_potential_scale_reduction"]):
        lines.append(f"ess.{n} = {e:.3f}")
        lines.append(f"psrf.{n} = {r:.6f}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- persistence
def write_chain_csv(chain: McmcChain, path) -> Path:
    path = Path(path)
    d = chain.samples.shape[1]
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", *(f"theta_{i + 1}" for i in range(d)), "log_posterior"])
        for i, (row, lp) in enumerate(zip(chain.samples, chain.log_posterior)):
            step = chain.burn_in + (i + 1) * chain.thinning
            w.writerow([step, *(repr(float(v)) for v in row), repr(float(lp))])
    return path


def read_chain_csv(path, acceptance_rate: float = math.nan, seed=None) -> McmcChain:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], [r for r in rows[1:] if r]
    if header[0] != "step" or header[-1] != "log_posterior":
        raise ValueError(f"{path}: not a chain file")
    arr = np.array([[float(v) for v in r] for r in body])
    steps = arr[:, 0].astype(int)
    thinning = int(steps[1] - steps[0]) if len(steps) > 1 else 1
    burn_in = int(steps[0] - thinning)
    return McmcChain(arr[:, 1:-1], arr[:, -1], acceptance_rate, burn_in, thinning, seed)
