"""Domain types, void-fraction data correction, dataset splitting and CSV I/O."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

DESIGN_NAMES = ("pressure", "flow", "power", "inlet_temperature")
QOI_NAMES = ("VoidF1", "VoidF2", "VoidF3", "VoidF4")
PARAM_NAMES = ("P1008", "P1012", "P1022", "P1028", "P1029")

# VoidF4 comes from the CT scanner and is never corrected.
CORRECTED_QOIS = ("VoidF1", "VoidF2", "VoidF3")

_CORRECTION_OFFSET = {"standard": 1.231, "high_burnup": 1.167}


class DomainTag(str, Enum):
    IUQ = "IUQ"
    VAL = "VAL"
    PRED = "PRED"


def _frozen(values, ndim: int = 1) -> np.ndarray:
    arr = np.array(values, dtype=float, ndmin=ndim)
    arr.setflags(write=False)
    return arr


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{what} contains non-finite values")


@dataclass(frozen=True)
class DesignPoint:
    values: np.ndarray
    names: tuple[str, ...] = DESIGN_NAMES

    def __post_init__(self):
        values = _frozen(self.values)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "names", tuple(self.names))
        if values.ndim != 1 or values.size < 1:
            raise ValueError("design point must be a non-empty vector")
        if len(self.names) != values.size:
            raise ValueError(f"{len(self.names)} names for {values.size} design values")
        _check_finite(values, "design point")


@dataclass(frozen=True)
class ParamVector:
    values: np.ndarray

    def __post_init__(self):
        values = _frozen(self.values)
        object.__setattr__(self, "values", values)
        if values.ndim != 1 or values.size < 1:
            raise ValueError("parameter vector must be a non-empty vector")
        _check_finite(values, "parameter vector")


@dataclass(frozen=True)
class QoIVector:
    values: np.ndarray
    names: tuple[str, ...] = QOI_NAMES

    def __post_init__(self):
        values = _frozen(self.values)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "names", tuple(self.names))
        if values.ndim != 1 or values.size < 1 or len(self.names) != values.size:
            raise ValueError("QoI vector and names must be non-empty and of equal length")


@dataclass(frozen=True)
class PriorSpec:
    """Independent uniform priors on a box, with a nominal point inside it."""

    lower: np.ndarray
    upper: np.ndarray
    nominal: np.ndarray
    names: tuple[str, ...] = PARAM_NAMES

    def __post_init__(self):
        lower, upper, nominal = (_frozen(a) for a in (self.lower, self.upper, self.nominal))
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)
        object.__setattr__(self, "nominal", nominal)
        object.__setattr__(self, "names", tuple(self.names))
        if not (lower.shape == upper.shape == nominal.shape) or lower.ndim != 1:
            raise ValueError("lower, upper and nominal must be vectors of equal length")
        if len(self.names) != lower.size:
            raise ValueError("one name per parameter is required")
        for arr, what in ((lower, "lower"), (upper, "upper"), (nominal, "nominal")):
            _check_finite(arr, f"prior {what} bound")
        if np.any(lower >= upper):
            raise ValueError("prior lower bounds must be strictly below upper bounds")
        if np.any(nominal < lower) or np.any(nominal > upper):
            raise ValueError("nominal values must lie inside the prior box")

    @property
    def dim(self) -> int:
        return self.lower.size

    @property
    def width(self) -> np.ndarray:
        return self.upper - self.lower

    def contains(self, theta) -> np.ndarray | bool:
        theta = np.asarray(theta, dtype=float)
        inside = np.all((theta >= self.lower) & (theta <= self.upper), axis=-1)
        return bool(inside) if inside.ndim == 0 else inside

    def log_density(self, theta) -> float:
        if not self.contains(theta):
            return -math.inf
        return -float(np.sum(np.log(self.width)))

    def sample(self, n: int, random_state=None) -> np.ndarray:
        rng = np.random.default_rng(random_state)
        return self.lower + rng.random((n, self.dim)) * self.width


@dataclass(frozen=True)
class Observation:
    design: DesignPoint
    measured: QoIVector
    measurement_variance: np.ndarray
    domain_tag: DomainTag
    test_id: str

    def __post_init__(self):
        var = _frozen(self.measurement_variance)
        object.__setattr__(self, "measurement_variance", var)
        object.__setattr__(self, "domain_tag", DomainTag(self.domain_tag))
        if var.shape != self.measured.values.shape:
            raise ValueError("one measurement variance per QoI is required")
        if np.any(var < 0) or not np.all(np.isfinite(var)):
            raise ValueError("measurement variances must be finite and nonnegative")


@dataclass(frozen=True)
class Dataset:
    """Column-oriented collection of experimental records.

    ``X`` holds the design points row-wise, ``y`` the measured QoIs and
    ``variance`` the diagonal of the measurement covariance per record.
    """

    test_ids: tuple[str, ...]
    X: np.ndarray
    y: np.ndarray
    variance: np.ndarray
    domain: tuple[DomainTag, ...]
    design_names: tuple[str, ...] = DESIGN_NAMES
    qoi_names: tuple[str, ...] = QOI_NAMES

    def __post_init__(self):
        X, y, var = (_frozen(a, ndim=2) for a in (self.X, self.y, self.variance))
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "variance", var)
        object.__setattr__(self, "test_ids", tuple(str(t) for t in self.test_ids))
        object.__setattr__(self, "domain", tuple(DomainTag(d) for d in self.domain))
        object.__setattr__(self, "design_names", tuple(self.design_names))
        object.__setattr__(self, "qoi_names", tuple(self.qoi_names))
        n = len(self.test_ids)
        if X.shape != (n, len(self.design_names)):
            raise ValueError(f"design matrix shape {X.shape} does not match {n} records")
        if y.shape != (n, len(self.qoi_names)) or var.shape != y.shape:
            raise ValueError("measured values and variances must be (n_records, n_qoi)")
        if len(self.domain) != n:
            raise ValueError("one domain tag per record is required")
        if len(set(self.test_ids)) != n:
            raise ValueError("test ids must be unique")
        _check_finite(X, "design matrix")
        _check_finite(y, "measured values")
        if np.any(var < 0) or not np.all(np.isfinite(var)):
            raise ValueError("measurement variances must be finite and nonnegative")

    def __len__(self) -> int:
        return len(self.test_ids)

    @property
    def observations(self) -> list[Observation]:
        return [
            Observation(
                design=DesignPoint(self.X[i], self.design_names),
                measured=QoIVector(self.y[i], self.qoi_names),
                measurement_variance=self.variance[i],
                domain_tag=self.domain[i],
                test_id=self.test_ids[i],
            )
            for i in range(len(self))
        ]

    @classmethod
    def from_observations(cls, observations: Sequence[Observation]) -> "Dataset":
        if not observations:
            raise ValueError("cannot build a dataset from zero observations")
        first = observations[0]
        for obs in observations:
            if obs.design.names != first.design.names or obs.measured.names != first.measured.names:
                raise ValueError(f"observation {obs.test_id} has inconsistent names")
        return cls(
            test_ids=[o.test_id for o in observations],
            X=np.vstack([o.design.values for o in observations]),
            y=np.vstack([o.measured.values for o in observations]),
            variance=np.vstack([o.measurement_variance for o in observations]),
            domain=[o.domain_tag for o in observations],
            design_names=first.design.names,
            qoi_names=first.measured.names,
        )

    def subset(self, index: Iterable[int], domain: DomainTag | str | None = None) -> "Dataset":
        index = list(index)
        tags = [self.domain[i] for i in index] if domain is None else [domain] * len(index)
        return Dataset(
            test_ids=[self.test_ids[i] for i in index],
            X=self.X[index].reshape(len(index), self.X.shape[1]),
            y=self.y[index].reshape(len(index), self.y.shape[1]),
            variance=self.variance[index].reshape(len(index), self.y.shape[1]),
            domain=tags,
            design_names=self.design_names,
            qoi_names=self.qoi_names,
        )

    def with_values(self, y=None, variance=None) -> "Dataset":
        return Dataset(
            test_ids=self.test_ids,
            X=self.X,
            y=self.y if y is None else y,
            variance=self.variance if variance is None else variance,
            domain=self.domain,
            design_names=self.design_names,
            qoi_names=self.qoi_names,
        )


@dataclass(frozen=True)
class UncertaintyBudget:
    """Total covariance = experimental + model bias + code (surrogate) parts."""

    exp: np.ndarray
    bias: np.ndarray = field(default=None)
    code: np.ndarray = field(default=None)

    def __post_init__(self):
        exp = _as_cov(self.exp)
        zeros = np.zeros_like(exp)
        bias = zeros if self.bias is None else _as_cov(self.bias)
        code = zeros if self.code is None else _as_cov(self.code)
        for name, cov in (("exp", exp), ("bias", bias), ("code", code)):
            if cov.shape != exp.shape:
                raise ValueError(f"{name} covariance has shape {cov.shape}, expected {exp.shape}")
            if not np.allclose(cov, cov.T):
                raise ValueError(f"{name} covariance is not symmetric")
            if np.linalg.eigvalsh(cov).min() < -1e-10 * max(1.0, np.abs(cov).max()):
                raise ValueError(f"{name} covariance is not positive semidefinite")
            cov.setflags(write=False)
            object.__setattr__(self, name, cov)

    @property
    def total(self) -> np.ndarray:
        return self.exp + self.bias + self.code


def _as_cov(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    if a.ndim == 1:
        a = np.diag(a)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError("covariance must be square or a vector of variances")
    return a


def correct_void_fraction(alpha_measured, family: str = "standard"):
    """Correct densitometer void fractions (percent) for in-subchannel void distribution.

    The correction only applies on [20, 90] %; values outside that range pass
    through unchanged. ``family`` is ``"standard"`` for the current 8x8
    bundles or ``"high_burnup"`` for the high burn-up bundle.
    """
    if family not in _CORRECTION_OFFSET:
        raise ValueError(f"unknown correction family {family!r}; use one of {sorted(_CORRECTION_OFFSET)}")
    alpha = np.asarray(alpha_measured, dtype=float)
    if np.any(~np.isfinite(alpha)) or np.any((alpha < 0) | (alpha > 100)):
        raise ValueError("measured void fraction must lie in [0, 100] %")
    in_range = (alpha >= 20.0) & (alpha <= 90.0)
    corrected = np.where(in_range, alpha / (_CORRECTION_OFFSET[family] - 0.001 * alpha), alpha)
    return float(corrected) if corrected.ndim == 0 else corrected


def correct_dataset(data: Dataset, family: str = "standard") -> Dataset:
    """Apply :func:`correct_void_fraction` to the densitometer QoIs of ``data``."""
    y = np.array(data.y)
    for j, name in enumerate(data.qoi_names):
        if name in CORRECTED_QOIS:
            y[:, j] = correct_void_fraction(y[:, j], family)
    return data.with_values(y=y)


def split_dataset(data: Dataset, seed: int) -> tuple[Dataset, Dataset]:
    """Randomly halve ``data`` into validation and prediction sets.

    With an odd number of records the extra one goes to validation.
    """
    n = len(data)
    if n < 2:
        raise ValueError(f"need at least 2 observations to split, got {n}")
    perm = np.random.default_rng(seed).permutation(n)
    n_val = (n + 1) // 2
    val_idx = np.sort(perm[:n_val])
    pred_idx = np.sort(perm[n_val:])
    return data.subset(val_idx, DomainTag.VAL), data.subset(pred_idx, DomainTag.PRED)


def _fmt(x: float) -> str:
    return repr(float(x))


def write_dataset_csv(data: Dataset, path) -> Path:
    path = Path(path)
    header = ["test_id", *data.design_names, *data.qoi_names, *(f"{q}_var" for q in data.qoi_names), "domain"]
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for i, tid in enumerate(data.test_ids):
            writer.writerow(
                [tid, *map(_fmt, data.X[i]), *map(_fmt, data.y[i]), *map(_fmt, data.variance[i]), data.domain[i].value]
            )
    return path


def read_dataset_csv(path, qoi_names: Sequence[str] | None = None) -> Dataset:
    """Read a dataset CSV.

    QoI columns are identified by their ``<name>_var`` companions, so the
    design/QoI split is recovered from the header alone unless
    ``qoi_names`` is given explicitly.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path} is empty")
    header = [h.strip() for h in rows[0]]
    if header[0] != "test_id" or header[-1] != "domain":
        raise ValueError(f"{path}: header must start with test_id and end with domain")
    middle = header[1:-1]
    if qoi_names is None:
        qoi_names = [h[: -len("_var")] for h in middle if h.endswith("_var")]
    qoi_names = tuple(qoi_names)
    n_q = len(qoi_names)
    design_names = tuple(middle[: len(middle) - 2 * n_q])
    expected = [*design_names, *qoi_names, *(f"{q}_var" for q in qoi_names)]
    if middle != expected or n_q == 0 or not design_names:
        raise ValueError(f"{path}: unexpected column layout {header}")
    body = [r for r in rows[1:] if r]
    values = np.array([[float(v) for v in r[1:-1]] for r in body]).reshape(len(body), len(middle))
    d = len(design_names)
    return Dataset(
        test_ids=[r[0].strip() for r in body],
        X=values[:, :d],
        y=values[:, d : d + n_q],
        variance=values[:, d + n_q :],
        domain=[r[-1].strip() for r in body],
        design_names=design_names,
        qoi_names=qoi_names,
    )
