"""Bayes-factor weights and model-averaged prediction.

Five predictive models are compared in the prediction domain:

    A  model with prior parameter samples (uncalibrated)
    B  posterior samples obtained without a bias term
    C  posterior samples obtained with the bias term
    D  BMA mixture of A and B, weighted by the A-vs-B Bayes factors
    E  BMA mixture of A and C, weighted by the A-vs-C Bayes factors
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from .core import Dataset
from .inverse import as_predictor

logger = logging.getLogger(__name__)

MODELS = ("A", "B", "C", "D", "E")
MIXTURE = "mixture"
WEIGHTED_STD = "weighted_std"


@dataclass(frozen=True)
class BmaWeights:
    """Posterior-model and prior-model weights for one QoI."""

    w_posterior: float
    w_prior: float

    def __post_init__(self):
        if not (0.0 <= self.w_prior <= 1.0 and 0.0 <= self.w_posterior <= 1.0):
            raise ValueError("weights must lie in [0, 1]")
        if self.w_posterior + self.w_prior != 1.0:
            raise ValueError("weights must sum to one")


def bma_weights(B: float) -> BmaWeights:
    """Weights ``B/(B+1)`` and ``1/(B+1)``.

    The prior weight is computed first and the posterior weight as its
    complement, so the pair sums to one exactly. ``B = +inf`` (the
    underflow sentinel from the Bayes-factor estimator) gives all weight
    to the posterior model.
    """
    B = float(B)
    if math.isnan(B) or B <= 0.0:
        raise ValueError(f"Bayes factor must be positive, got {B}")
    if math.isinf(B):
        return BmaWeights(1.0, 0.0)
    w_prior = 1.0 / (B + 1.0)
    return BmaWeights(1.0 - w_prior, w_prior)


def mixture_moments(mu0, sigma0, mu1, sigma1, w0: float, mode: str = MIXTURE):
    """Mean and std of the two-component mixture ``w0 * P0 + (1 - w0) * P1``.

    The variance is written as ``w0 s0^2 + w1 s1^2 + w0 w1 (mu0 - mu1)^2``,
    algebraically equal to ``sum w (s^2 + mu^2) - mu^2`` but free of
    cancellation. ``mode="weighted_std"`` returns ``w0 s0 + w1 s1`` instead.
    """
    mu0, sigma0, mu1, sigma1 = (np.asarray(a, dtype=float) for a in (mu0, sigma0, mu1, sigma1))
    w0 = np.asarray(w0, dtype=float)
    w1 = 1.0 - w0
    mean = w0 * mu0 + w1 * mu1
    if mode == MIXTURE:
        var = w0 * sigma0**2 + w1 * sigma1**2 + w0 * w1 * (mu0 - mu1) ** 2
        std = np.sqrt(var)
    elif mode == WEIGHTED_STD:
        std = w0 * sigma0 + w1 * sigma1
    else:
        raise ValueError(f"unknown std mode {mode!r}")
    return mean, std


def _ensemble_stats(predictor, X, samples) -> tuple[np.ndarray, np.ndarray]:
    """Per-point mean and std of model outputs over a parameter ensemble.

    Returns arrays of shape (n_points, n_qoi).
    """
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    if len(samples) == 0:
        raise ValueError("parameter ensemble is empty")
    means, stds = [], []
    for x in np.atleast_2d(X):
        y, _ = predictor.predict(x[None, :], samples)
        if not np.all(np.isfinite(y)):
            raise FloatingPointError("non-finite model output in prediction ensemble")
        means.append(y.mean(axis=0))
        stds.append(y.std(axis=0, ddof=1) if len(y) > 1 else np.zeros(y.shape[1]))
    return np.array(means), np.array(stds)


def bma_predict(x_pred, prior_samples, posterior_samples, weights, model_or_surrogate, mode: str = MIXTURE):
    """Mixture mean and std at the design points ``x_pred``.

    ``weights`` is a single :class:`BmaWeights` or one per QoI.
    """
    X = np.atleast_2d(np.asarray(getattr(x_pred, "values", x_pred), dtype=float))
    predictor = as_predictor(model_or_surrogate, X.shape[1])
    mu1, s1 = _ensemble_stats(predictor, X, prior_samples)
    mu0, s0 = _ensemble_stats(predictor, X, posterior_samples)
    w0 = _weight_vector(weights, mu0.shape[1])
    return mixture_moments(mu0, s0, mu1, s1, w0, mode)


def _weight_vector(weights, n_qoi: int) -> np.ndarray:
    if isinstance(weights, BmaWeights):
        return np.full(n_qoi, weights.w_posterior)
    w = np.array([wt.w_posterior for wt in weights], dtype=float)
    if w.size != n_qoi:
        raise ValueError(f"expected {n_qoi} weights, got {w.size}")
    return w


@dataclass(frozen=True)
class PredictionSummary:
    """Per-model predictive means and stds, arrays shaped (n_tests, n_qoi)."""

    test_ids: tuple[str, ...]
    qoi_names: tuple[str, ...]
    mean: Mapping[str, np.ndarray]
    std: Mapping[str, np.ndarray]
    n_samples: Mapping[str, int]
    weights: Mapping[str, tuple[BmaWeights, ...]]
    dataset: str = "dataset"
    std_mode: str = MIXTURE

    def rows(self):
        for m in self.mean:
            for i, tid in enumerate(self.test_ids):
                for j, q in enumerate(self.qoi_names):
                    yield m, tid, q, float(self.mean[m][i, j]), float(self.std[m][i, j])


def _weights_for(bf_table: Mapping[str, float], qoi_names) -> tuple[BmaWeights, ...]:
    missing = [q for q in qoi_names if q not in bf_table]
    if missing:
        raise KeyError(f"no Bayes factor for {missing}")
    return tuple(bma_weights(bf_table[q]) for q in qoi_names)


def model_ensemble_predict(pred_data: Dataset, prior_samples, posterior_with_bias, posterior_no_bias,
                           bf_no_bias: Mapping[str, float] | None, bf_with_bias: Mapping[str, float] | None,
                           model_or_surrogate, *, dataset: str = "dataset", std_mode: str = MIXTURE,
                           ) -> PredictionSummary:
    """Predict with models A to E at every test of ``pred_data``.

    ``bf_no_bias`` / ``bf_with_bias`` map QoI name to the test-averaged
    Bayes factor of the no-bias (B) and with-bias (C) posteriors. Passing
    ``None`` for one posterior drops the corresponding calibrated and BMA
    models (B and D, or C and E).
    """
    if len(pred_data) == 0:
        raise ValueError("prediction dataset is empty")
    if posterior_with_bias is None and posterior_no_bias is None:
        raise ValueError("at least one posterior ensemble is required")
    qois = tuple(pred_data.qoi_names)
    predictor = as_predictor(model_or_surrogate, pred_data.X.shape[1])
    mean, std, count, weights = {}, {}, {}, {}
    mean["A"], std["A"] = _ensemble_stats(predictor, pred_data.X, prior_samples)
    count["A"] = len(np.atleast_2d(prior_samples))
    for post, bma, samples, bf in (("B", "D", posterior_no_bias, bf_no_bias),
                                   ("C", "E", posterior_with_bias, bf_with_bias)):
        if samples is None:
            continue
        if bf is None:
            raise KeyError(f"Bayes factors for model {post} are missing")
        weights[bma] = _weights_for(bf, qois)
        mean[post], std[post] = _ensemble_stats(predictor, pred_data.X, samples)
        count[post] = len(np.atleast_2d(samples))
    for post, bma in (("B", "D"), ("C", "E")):
        if bma in weights:
            w0 = _weight_vector(weights[bma], len(qois))
            mean[bma], std[bma] = mixture_moments(mean[post], std[post], mean["A"], std["A"], w0, std_mode)
            count[bma] = count["A"] + count[post]
    order = [m for m in MODELS if m in mean]
    return PredictionSummary(tuple(pred_data.test_ids), qois, {m: mean[m] for m in order},
                             {m: std[m] for m in order}, {m: count[m] for m in order}, weights, dataset, std_mode)


def error_report(summary: PredictionSummary, withheld: Dataset) -> dict[str, dict[str, float]]:
    """Mean absolute error of each model's predictive mean, per QoI."""
    lookup = {tid: i for i, tid in enumerate(withheld.test_ids)}
    missing = [t for t in summary.test_ids if t not in lookup]
    if missing:
        raise KeyError(f"no withheld measurement for tests {missing}")
    idx = [lookup[t] for t in summary.test_ids]
    truth = withheld.y[idx]
    cols = [list(withheld.qoi_names).index(q) for q in summary.qoi_names]
    truth = truth[:, cols]
    return {m: dict(zip(summary.qoi_names, np.mean(np.abs(summary.mean[m] - truth), axis=0).tolist()))
            for m in summary.mean}


def per_test_errors(summary: PredictionSummary, withheld: Dataset) -> dict[str, np.ndarray]:
    """Signed errors (prediction minus measurement), (n_tests, n_qoi) per model."""
    lookup = {tid: i for i, tid in enumerate(withheld.test_ids)}
    truth = withheld.y[[lookup[t] for t in summary.test_ids]]
    return {m: summary.mean[m] - truth for m in summary.mean}


def _fmt(x: float) -> str:
    return repr(float(x))


def write_prediction_csv(summary: PredictionSummary, path) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["dataset", "model", "test_id", "qoi", "mean", "std"])
        for m, tid, q, mu, sd in summary.rows():
            w.writerow([summary.dataset, m, tid, q, _fmt(mu), _fmt(sd)])
    return path


def write_error_csv(errors: Mapping[str, Mapping[str, float]], path, dataset: str = "dataset") -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["dataset", "model", "qoi", "mean_abs_error"])
        for m, row in errors.items():
            for q, v in row.items():
                w.writerow([dataset, m, q, _fmt(v)])
    return path


def read_error_csv(path) -> dict[str, dict[str, float]]:
    out: dict[str, dict[str, float]] = {}
    with Path(path).open(newline="", encoding="utf-8") as fh:
        for r in csv.DictReader(fh):
            out.setdefault(r["model"], {})[r["qoi"]] = float(r["mean_abs_error"])
    return out


def write_plot_data(summary: PredictionSummary, withheld: Dataset, directory) -> list[Path]:
    """One CSV per QoI with per-test errors and stds of every model."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    errs = per_test_errors(summary, withheld)
    models = list(summary.mean)
    paths = []
    for j, q in enumerate(summary.qoi_names):
        p = directory / f"plot_{summary.dataset}_{q}.csv"
        with p.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["test_id"] + [f"error_{m}" for m in models] + [f"std_{m}" for m in models])
            for i, tid in enumerate(summary.test_ids):
                w.writerow([tid] + [_fmt(errs[m][i, j]) for m in models]
                           + [_fmt(summary.std[m][i, j]) for m in models])
        paths.append(p)
    return paths


def format_weight_table(weights: Mapping[str, tuple[BmaWeights, ...]], qoi_names, digits: int = 4) -> list[str]:
    """Rows in the shape of a weight table: prior-model and posterior-model weights per BMA model."""
    rows = []
    for m, ws in weights.items():
        post = {"D": "B", "E": "C"}.get(m, "posterior")
        rows.append(f"{m}  A     " + "".join(f"  {w.w_prior:.{digits}f}" for w in ws))
        rows.append(f"{m}  {post:<5} " + "".join(f"  {w.w_posterior:.{digits}f}" for w in ws))
    return rows


def format_error_table(errors: Mapping[str, Mapping[str, float]], qoi_names, digits: int = 4) -> list[str]:
    return [f"{m:<3}" + "".join(f"  {errors[m][q]:.{digits}f}" for q in qoi_names) for m in errors]
