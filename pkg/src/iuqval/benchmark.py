"""Computer-model interface and the synthetic void-fraction benchmark.

The benchmark stands in for a system thermal-hydraulics code: four design
variables (pressure [MPa], mass-flow rate [kg/s], power [MW], inlet
temperature [degC]) map to four axial void fractions [%] under five
multiplicative closure-law factors.
"""

from __future__ import annotations

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .core import (
    DESIGN_NAMES,
    PARAM_NAMES,
    QOI_NAMES,
    Dataset,
    DesignPoint,
    DomainTag,
    ParamVector,
    PriorSpec,
    QoIVector,
)

logger = logging.getLogger(__name__)

AXIAL_POSITIONS = np.array([0.25, 0.50, 0.75, 1.00])
POWER_REF = 6.5  # MW
SUBCOOLING_REF = 12.0  # degC
FLOW_REF = 15.0  # kg/s

THETA_STAR = (1.2, 0.9, 1.1, 0.8, 1.05)


class ComputerModel(ABC):
    """Deterministic map y = f(x, theta) evaluated row-wise on batches."""

    design_names: tuple[str, ...]
    param_names: tuple[str, ...]
    qoi_names: tuple[str, ...]

    @property
    def n_design(self) -> int:
        return len(self.design_names)

    @property
    def n_params(self) -> int:
        return len(self.param_names)

    @abstractmethod
    def _evaluate(self, X: np.ndarray, theta: np.ndarray) -> np.ndarray:
        """Evaluate broadcast-compatible (n, d_x) and (n, d_theta) arrays."""

    def evaluate(self, X, theta) -> np.ndarray:
        """Evaluate on a batch; ``X`` and ``theta`` broadcast against each other row-wise."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        theta = np.atleast_2d(np.asarray(theta, dtype=float))
        if X.shape[-1] != self.n_design:
            raise ValueError(f"expected {self.n_design} design variables, got {X.shape[-1]}")
        if theta.shape[-1] != self.n_params:
            raise ValueError(f"expected {self.n_params} parameters, got {theta.shape[-1]}")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(theta))):
            raise ValueError("model inputs must be finite")
        y = self._evaluate(X, theta)
        if not np.all(np.isfinite(y)):
            raise FloatingPointError("model produced non-finite output")
        return y


class FunctionModel(ComputerModel):
    """Wrap a vectorised callable ``func(X, theta) -> (n, d_y)`` as a model."""

    def __init__(self, func: Callable, design_names: Sequence[str], param_names: Sequence[str],
                 qoi_names: Sequence[str]):
        self.func = func
        self.design_names = tuple(design_names)
        self.param_names = tuple(param_names)
        self.qoi_names = tuple(qoi_names)

    def _evaluate(self, X, theta):
        n = max(X.shape[0], theta.shape[0])
        return np.asarray(self.func(X, theta), dtype=float).reshape(n, len(self.qoi_names))


def saturation_temperature(pressure):
    """Linearised saturation temperature [degC] around 7 MPa."""
    return 260.0 + 26.0 * (np.asarray(pressure) - 6.0)


def _drivers(X: np.ndarray):
    pressure, flow, power, t_in = (X[..., i : i + 1] for i in range(4))
    q = power / POWER_REF
    c = (saturation_temperature(pressure) - t_in) / SUBCOOLING_REF
    g = flow / FLOW_REF
    return q, c, g


class VoidFractionBenchmark(ComputerModel):
    design_names = DESIGN_NAMES
    param_names = PARAM_NAMES
    qoi_names = QOI_NAMES

    def _evaluate(self, X, theta):
        q, c, g = _drivers(X)
        t = [theta[..., i : i + 1] for i in range(5)]
        z = AXIAL_POSITIONS
        num = t[1] * q * z - t[0] * 0.15 * c
        den = t[2] * 0.6 * q * z + t[3] * 0.5 + t[4] * 0.4 * g
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(den > 0, num / np.where(den > 0, den, 1.0), np.where(num > 0, 1.0, 0.0))
        return 100.0 * np.clip(ratio, 0.0, 1.0)


BENCHMARK = VoidFractionBenchmark()


def evaluate_model(x: DesignPoint, theta: ParamVector, model: ComputerModel = BENCHMARK) -> QoIVector:
    """Single-point evaluation returning a :class:`QoIVector`."""
    if len(x.values) != model.n_design:
        raise ValueError(f"design point has {len(x.values)} entries, model expects {model.n_design}")
    if len(theta.values) != model.n_params:
        raise ValueError(f"parameter vector has {len(theta.values)} entries, model expects {model.n_params}")
    y = model.evaluate(x.values[None, :], theta.values[None, :])[0]
    return QoIVector(y, model.qoi_names)


def injected_bias(X, scale: float = 1.5) -> np.ndarray:
    """Systematic model error added to the synthetic truth, in percentage points."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    q, _, _ = _drivers(X)
    return scale * AXIAL_POSITIONS * (q - 1.0)


DEFAULT_RANGES = {
    "pressure": (7.0, 7.3),
    "flow": (12.0, 18.0),
    "power": (4.0, 7.0),
    "inlet_temperature": (282.0, 285.0),
}

# Parameter box used for the benchmark; keeps every QoI away from the 0/100 clamps.
PRIOR_LOWER = 0.75
PRIOR_UPPER = 1.35


def benchmark_prior(lower: float = PRIOR_LOWER, upper: float = PRIOR_UPPER) -> PriorSpec:
    """Uniform box prior on the five multipliers, nominal 1.0."""
    n = len(PARAM_NAMES)
    return PriorSpec([lower] * n, [upper] * n, [1.0] * n, PARAM_NAMES)


@dataclass(frozen=True)
class GeneratorConfig:
    theta_star: tuple[float, ...] = THETA_STAR
    noise_std: float = 1.5
    bias: bool = True
    bias_scale: float = 1.5
    n_iuq: int = 60
    n_tests: int = 86
    iuq_ranges: Mapping[str, tuple[float, float]] = field(default_factory=lambda: dict(DEFAULT_RANGES))
    test_ranges: Mapping[str, tuple[float, float]] = field(default_factory=lambda: dict(DEFAULT_RANGES))


def _sample_designs(ranges: Mapping[str, tuple[float, float]], n: int, rng) -> np.ndarray:
    missing = set(DESIGN_NAMES) - set(ranges)
    if missing:
        raise ValueError(f"design ranges missing for {sorted(missing)}")
    lo = np.array([ranges[k][0] for k in DESIGN_NAMES], dtype=float)
    hi = np.array([ranges[k][1] for k in DESIGN_NAMES], dtype=float)
    if np.any(~np.isfinite(lo)) or np.any(lo >= hi):
        raise ValueError(f"invalid design ranges {dict(ranges)}")
    return lo + rng.random((n, len(DESIGN_NAMES))) * (hi - lo)


def synthetic_truth(X, theta_star=THETA_STAR, bias: bool = True, bias_scale: float = 1.5,
                    model: ComputerModel = BENCHMARK) -> np.ndarray:
    """Noise-free "reality": model at the true parameters plus optional injected bias."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = model.evaluate(X, np.asarray(theta_star, dtype=float)[None, :])
    if bias:
        y = y + injected_bias(X, bias_scale)
    return y


def generate_benchmark_data(config: GeneratorConfig, seed: int) -> tuple[Dataset, Dataset]:
    """Draw an inverse-UQ dataset and a separate test dataset (later split into VAL/PRED).

    Measurements are the synthetic truth plus Gaussian noise, clipped to
    [0, 100] %. The recorded variance is ``noise_std**2`` per QoI.
    """
    if config.n_iuq < 1 or config.n_tests < 2:
        raise ValueError("need n_iuq >= 1 and n_tests >= 2")
    if config.noise_std < 0:
        raise ValueError("noise_std must be nonnegative")
    rng = np.random.default_rng(seed)
    out = []
    for prefix, n, ranges, tag in (
        ("iuq", config.n_iuq, config.iuq_ranges, DomainTag.IUQ),
        ("test", config.n_tests, config.test_ranges, DomainTag.VAL),
    ):
        X = _sample_designs(ranges, n, rng)
        truth = synthetic_truth(X, config.theta_star, config.bias, config.bias_scale)
        y = np.clip(truth + config.noise_std * rng.standard_normal(truth.shape), 0.0, 100.0)
        var = np.full_like(y, config.noise_std**2)
        width = len(str(n))
        ids = [f"{prefix}{i:0{width}d}" for i in range(n)]
        out.append(Dataset(ids, X, y, var, [tag] * n))
    return out[0], out[1]
