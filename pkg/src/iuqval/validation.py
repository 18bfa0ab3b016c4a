"""Quantitative validation with Bayes factors.

For each validation test the Bayes factor compares the calibrated model
(parameters drawn from the posterior, hypothesis H0) against the
uncalibrated one (parameters drawn from the prior, H1):

    B = mean_j N(y_E; y_M(x, theta0_j), Sigma) / mean_j N(y_E; y_M(x, theta1_j), Sigma)

with Sigma = Sigma_exp + Sigma_code (+ Sigma_bias when a bias model is
explicitly supplied). Sums are carried out in log space.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from .core import Dataset, PriorSpec
from .inverse import BiasModel, as_predictor

logger = logging.getLogger(__name__)

_LOG_2PI = math.log(2.0 * math.pi)

H0_POSTERIOR = "H0_posterior"
H1_PRIOR = "H1_prior"


@dataclass(frozen=True)
class HypothesisEnsemble:
    label: str
    samples: np.ndarray
    provenance: str

    def __post_init__(self):
        s = np.atleast_2d(np.asarray(self.samples, dtype=float))
        if len(s) < 1:
            raise ValueError("ensemble must contain at least one sample")
        if self.label not in (H0_POSTERIOR, H1_PRIOR):
            raise ValueError(f"unknown hypothesis label {self.label!r}")
        s.setflags(write=False)
        object.__setattr__(self, "samples", s)

    @classmethod
    def from_prior(cls, prior: PriorSpec, n: int, seed) -> "HypothesisEnsemble":
        return cls(H1_PRIOR, prior.sample(n, seed), "prior_direct")

    @classmethod
    def from_copula(cls, copula, n: int, seed) -> "HypothesisEnsemble":
        return cls(H0_POSTERIOR, copula.sample(n, random_state=seed), "copula_from_chain")


def gaussian_density(residual, covariance) -> float:
    """Multivariate normal density N(residual; 0, covariance)."""
    r = np.atleast_1d(np.asarray(residual, dtype=float))
    cov = np.atleast_2d(np.asarray(covariance, dtype=float))
    if cov.shape != (r.size, r.size):
        raise ValueError(f"covariance shape {cov.shape} does not match residual length {r.size}")
    if not np.allclose(cov, cov.T):
        raise ValueError("covariance must be symmetric")
    try:
        L = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("covariance is singular or not positive definite") from exc
    z = np.linalg.solve(L, r)
    return float(np.exp(-0.5 * z @ z - np.log(np.diag(L)).sum() - 0.5 * r.size * _LOG_2PI))


@dataclass(frozen=True)
class BayesFactorRecord:
    test_id: str
    qoi: str
    bf: float
    log_numerator: float
    log_denominator: float
    mc_se: float
    n0: int
    n1: int
    diagnostic: str = ""


@dataclass(frozen=True)
class BayesFactorReport:
    records: tuple[BayesFactorRecord, ...]
    qoi_names: tuple[str, ...]
    dataset: str = "dataset"
    bias_mode: str = "with_bias"
    seed: int | None = None
    aggregation: str = "arithmetic"
    averaged: dict = field(default_factory=dict)

    def table(self) -> dict[str, float]:
        """Test-averaged BF per QoI."""
        return dict(self.averaged)


def _log_mean_density(y: float, mean: np.ndarray, var: np.ndarray) -> tuple[float, np.ndarray]:
    with np.errstate(over="ignore"):
        logd = -0.5 * ((y - mean) ** 2 / var + np.log(var) + _LOG_2PI)
    return float(logsumexp(logd) - math.log(len(logd))), logd


def _log_mean_density_joint(y: np.ndarray, mean: np.ndarray, var: np.ndarray) -> tuple[float, np.ndarray]:
    with np.errstate(over="ignore"):
        logd = -0.5 * (((y - mean) ** 2 / var).sum(axis=1) + np.log(var).sum(axis=1) + y.size * _LOG_2PI)
    return float(logsumexp(logd) - math.log(len(logd))), logd


def _ratio_se(bf: float, logd0: np.ndarray, logd1: np.ndarray) -> float:
    """Delta-method standard error of a ratio of two independent MC means."""
    out = 0.0
    for logd in (logd0, logd1):
        shift = logd.max()
        d = np.exp(logd - shift)
        m = d.mean()
        if len(d) > 1 and m > 0:
            out += (d.std(ddof=1) / math.sqrt(len(d)) / m) ** 2
    return bf * math.sqrt(out)


def estimate_bayes_factor(val_data: Dataset, h0: HypothesisEnsemble, h1: HypothesisEnsemble, model_or_surrogate,
                          *, bias: BiasModel | None = None, include_bias: bool = False, joint: bool = False,
                          aggregation: str = "arithmetic", dataset: str = "dataset", bias_mode: str = "with_bias",
                          seed: int | None = None) -> BayesFactorReport:
    """Monte Carlo Bayes factor per validation test and QoI.

    ``include_bias`` adds the bias model's variance (never its mean) to the
    covariance; by default the bias contribution is left out. ``joint``
    computes one BF per test from the full QoI vector instead of one per
    QoI.
    """
    if len(val_data) == 0:
        raise ValueError("validation dataset is empty")
    if include_bias and bias is None:
        raise ValueError("include_bias requires a bias model")
    predictor = as_predictor(model_or_surrogate, val_data.X.shape[1])
    same = h0.samples is h1.samples or (h0.samples.shape == h1.samples.shape and np.array_equal(h0.samples, h1.samples))
    bias_var = bias.predict(val_data.X, return_var=True)[1] if include_bias else np.zeros_like(val_data.y)

    records = []
    for i, tid in enumerate(val_data.test_ids):
        x = val_data.X[i : i + 1]
        stats = []
        for ens in (h0, h1) if not same else (h0,):
            mean, code_var = predictor.predict(x, ens.samples)
            stats.append((mean, val_data.variance[i] + bias_var[i] + code_var))
        if same:
            stats.append(stats[0])
        (m0, v0), (m1, v1) = stats
        if np.any(v0 <= 0) or np.any(v1 <= 0):
            raise np.linalg.LinAlgError(f"test {tid}: total variance is zero (singular covariance)")
        targets = [("joint", slice(None))] if joint else [(q, j) for j, q in enumerate(val_data.qoi_names)]
        for qoi, j in targets:
            if joint:
                ln0, ld0 = _log_mean_density_joint(val_data.y[i], m0, v0)
                ln1, ld1 = _log_mean_density_joint(val_data.y[i], m1, v1)
            else:
                ln0, ld0 = _log_mean_density(val_data.y[i, j], m0[:, j], v0[:, j])
                ln1, ld1 = _log_mean_density(val_data.y[i, j], m1[:, j], v1[:, j])
            diagnostic = ""
            if ln1 == -math.inf:
                bf = math.inf
                diagnostic = "denominator estimate is zero"
                logger.warning("test %s, %s: prior-ensemble likelihood underflowed to zero; BF set to +inf", tid, qoi)
                se = math.nan
            else:
                bf = math.exp(ln0 - ln1)
                se = _ratio_se(bf, ld0, ld1)
            records.append(BayesFactorRecord(tid, qoi, bf, ln0, ln1, se, len(h0.samples), len(h1.samples), diagnostic))

    qois = ("joint",) if joint else tuple(val_data.qoi_names)
    report = BayesFactorReport(tuple(records), qois, dataset, bias_mode, seed, aggregation)
    object.__setattr__(report, "averaged", _average(report.records, qois, aggregation))
    return report


def _average(records, qois, aggregation: str) -> dict[str, float]:
    if aggregation not in ("arithmetic", "geometric"):
        raise ValueError(f"unknown aggregation {aggregation!r}")
    out = {}
    for q in qois:
        vals = np.array([r.bf for r in records if r.qoi == q], dtype=float)
        if len(vals) == 0:
            raise ValueError(f"no Bayes factors for {q}")
        if aggregation == "arithmetic":
            out[q] = float(np.mean(vals))
        else:
            out[q] = float(np.exp(np.mean(np.log(vals))))
    return out


def aggregate_bf(reports, aggregation: str | None = None) -> dict[tuple[str, str, str], float]:
    """Test-averaged BF keyed by (dataset, bias_mode, qoi)."""
    if isinstance(reports, BayesFactorReport):
        reports = [reports]
    reports = list(reports)
    if not reports or not any(r.records for r in reports):
        raise ValueError("no Bayes factor records to aggregate")
    table = {}
    for rep in reports:
        avg = _average(rep.records, rep.qoi_names, aggregation or rep.aggregation)
        for q, v in avg.items():
            table[(rep.dataset, rep.bias_mode, q)] = v
    return table


def favours(bf: float) -> str:
    """Verbal reading of a BF: >1 favours the calibrated model."""
    if bf > 1.0:
        return "posterior-favored"
    if bf < 1.0:
        return "prior-favored"
    return "neutral"


def _fmt(x: float) -> str:
    return repr(float(x))


def write_bf_csv(reports, path) -> Path:
    if isinstance(reports, BayesFactorReport):
        reports = [reports]
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["dataset", "bias_mode", "test_id", "qoi", "bf", "mc_se", "n0", "n1"])
        for rep in reports:
            for r in rep.records:
                w.writerow([rep.dataset, rep.bias_mode, r.test_id, r.qoi, _fmt(r.bf), _fmt(r.mc_se), r.n0, r.n1])
    return path


def write_bf_table_csv(table: dict, path, aggregation: str = "arithmetic") -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["dataset", "bias_mode", "qoi", "bf_mean", "aggregation"])
        for (ds, mode, q), v in table.items():
            w.writerow([ds, mode, q, _fmt(v), aggregation])
    return path


def read_bf_table_csv(path) -> dict[tuple[str, str, str], float]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        return {(r["dataset"], r["bias_mode"], r["qoi"]): float(r["bf_mean"]) for r in reader}


def format_bf_table(table: dict, qoi_names, digits: int = 4) -> list[str]:
    """Rows shaped like a per-dataset, per-bias-mode BF table."""
    rows = []
    keys = sorted({(ds, mode) for ds, mode, _ in table})
    for ds, mode in keys:
        vals = [table[(ds, mode, q)] for q in qoi_names]
        rows.append(f"{ds:>8}  {mode:<12}" + "".join(f"  {v:.{digits}f}" for v in vals))
    return rows
