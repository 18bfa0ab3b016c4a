"""File-based calibration / validation / prediction pipeline.

Stages run in a fixed order and talk to each other only through files in
the output directory::

    generate -> surrogate -> iuq -> validate -> predict -> report

``manifest.json`` records, for every completed stage, the hash of the
configuration it ran under and the SHA-256 of each artifact it wrote. A
stage refuses to start when an upstream stage is missing, was run under a
different configuration, or has artifacts that changed on disk.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
from contextlib import contextmanager
from pathlib import Path
from typing import Literal, Optional

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from . import __version__
from .benchmark import BENCHMARK, DEFAULT_RANGES, PRIOR_LOWER, PRIOR_UPPER, THETA_STAR, GeneratorConfig, \
    generate_benchmark_data
from .copula import GaussianCopula, write_samples_csv
from .core import DESIGN_NAMES, PARAM_NAMES, Dataset, PriorSpec, correct_dataset, read_dataset_csv, \
    split_dataset, write_dataset_csv
from .inverse import BiasModel, LikelihoodTerms, McmcConfig, chain_diagnostics, estimate_bias, \
    format_diagnostics, make_log_posterior, posterior_moments, read_chain_csv, run_mcmc, write_chain_csv
from .prediction import MIXTURE, error_report, format_error_table, format_weight_table, \
    model_ensemble_predict, read_error_csv, write_error_csv, write_plot_data, write_prediction_csv, bma_weights
from .surrogate import GaussianProcessSurrogate, build_training_design, validate_gp
from .validation import HypothesisEnsemble, aggregate_bf, estimate_bayes_factor, favours, format_bf_table, \
    read_bf_table_csv, write_bf_csv, write_bf_table_csv

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
STAGES = ("generate", "surrogate", "iuq", "validate", "predict", "report")
UPSTREAM = {
    "generate": (),
    "surrogate": ("generate",),
    "iuq": ("generate", "surrogate"),
    "validate": ("generate", "surrogate", "iuq"),
    "predict": ("generate", "surrogate", "iuq", "validate"),
    "report": ("validate", "predict"),
}
OUT_ENV = "IUQVAL_OUT"
MODE_DIRS = {"off": "no_bias", "on": "with_bias"}


class PipelineError(RuntimeError):
    """Stage failure carrying the stage name for diagnostics."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


# ---------------------------------------------------------------- config
class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class PathsConfig(_Strict):
    output: str = "runs/default"
    data: Optional[str] = None


class SeedsConfig(_Strict):
    model_config = ConfigDict(extra="forbid", frozen=True, populate_by_name=True)

    generate: int
    split: int
    surrogate: int
    iuq: int
    validate_: int = Field(alias="validate")
    predict: int


class GeneratorBlock(_Strict):
    theta_star: list[float] = Field(default_factory=lambda: list(THETA_STAR))
    noise_std: float = Field(1.5, ge=0)
    bias: bool = True
    bias_scale: float = 1.5
    n_iuq: int = Field(60, ge=1)
    n_tests: int = Field(86, ge=2)
    iuq_ranges: dict[str, tuple[float, float]] = Field(default_factory=lambda: dict(DEFAULT_RANGES))
    test_ranges: dict[str, tuple[float, float]] = Field(default_factory=lambda: dict(DEFAULT_RANGES))

    @field_validator("iuq_ranges", "test_ranges")
    @classmethod
    def _ranges(cls, v):
        if set(v) != set(DESIGN_NAMES):
            raise ValueError(f"ranges must be given for exactly {list(DESIGN_NAMES)}")
        for k, (lo, hi) in v.items():
            if not lo < hi:
                raise ValueError(f"invalid range for {k}: {lo} >= {hi}")
        return v


class PriorBlock(_Strict):
    names: list[str] = Field(default_factory=lambda: list(PARAM_NAMES))
    lower: list[float] = Field(default_factory=lambda: [PRIOR_LOWER] * len(PARAM_NAMES))
    upper: list[float] = Field(default_factory=lambda: [PRIOR_UPPER] * len(PARAM_NAMES))
    nominal: list[float] = Field(default_factory=lambda: [1.0] * len(PARAM_NAMES))

    def spec(self) -> PriorSpec:
        return PriorSpec(self.lower, self.upper, self.nominal, self.names)


class CorrectionBlock(_Strict):
    enabled: bool = False
    family: Literal["standard", "high_burnup"] = "standard"


class SurrogateBlock(_Strict):
    enabled: bool = True
    n_train: int = Field(200, ge=2)
    n_holdout: int = Field(50, ge=0)
    n_restarts: int = Field(8, ge=0)


class McmcBlock(_Strict):
    n_samples: int = Field(100_000, ge=1)
    burn_in: int = Field(20_000, ge=0)
    thinning: int = Field(10, ge=1)
    target_acceptance: float = Field(0.3, gt=0, lt=1)


class BiasBlock(_Strict):
    modes: Literal["on", "off", "both"] = "both"
    reference: Literal["nominal", "no_bias_posterior_mean"] = "nominal"
    n_restarts: int = Field(8, ge=0)


class ValidationBlock(_Strict):
    n_samples: int = Field(10_000, ge=1)
    aggregation: Literal["arithmetic", "geometric"] = "arithmetic"
    joint: bool = False
    include_bias: bool = False


class PredictionBlock(_Strict):
    n_samples: int = Field(2000, ge=2)
    std_mode: Literal["mixture", "weighted_std"] = MIXTURE


class RunConfig(_Strict):
    schema_version: int
    dataset: str = "synthetic"
    paths: PathsConfig = Field(default_factory=PathsConfig)
    seeds: SeedsConfig
    generator: GeneratorBlock = Field(default_factory=GeneratorBlock)
    prior: PriorBlock = Field(default_factory=PriorBlock)
    correction: CorrectionBlock = Field(default_factory=CorrectionBlock)
    surrogate: SurrogateBlock = Field(default_factory=SurrogateBlock)
    mcmc: McmcBlock = Field(default_factory=McmcBlock)
    bias: BiasBlock = Field(default_factory=BiasBlock)
    validation: ValidationBlock = Field(default_factory=ValidationBlock)
    prediction: PredictionBlock = Field(default_factory=PredictionBlock)

    @field_validator("schema_version")
    @classmethod
    def _schema(cls, v):
        if v != SCHEMA_VERSION:
            raise ValueError(f"unsupported schema_version {v}; expected {SCHEMA_VERSION}")
        return v

    @model_validator(mode="after")
    def _consistent(self):
        self.prior.spec()
        if len(self.generator.theta_star) != len(self.prior.names):
            raise ValueError("generator.theta_star must have one entry per prior parameter")
        if self.dataset in ("", ".", "..") or "/" in self.dataset:
            raise ValueError("dataset label must be a plain name")
        return self

    def config_hash(self) -> str:
        """Hash of everything that affects results (the output path does not)."""
        payload = self.model_dump(mode="json", by_alias=True)
        payload["paths"] = {"data": payload["paths"]["data"]}
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()

    def bias_modes(self) -> tuple[str, ...]:
        return ("off", "on") if self.bias.modes == "both" else (self.bias.modes,)


def load_config(path, *, out: str | None = None, seed_override: int | None = None,
                bias_mode: str | None = None) -> RunConfig:
    """Read and validate a YAML config.

    Precedence for the output directory: ``out`` argument, then the
    ``IUQVAL_OUT`` environment variable, then ``paths.output``. Relative
    paths in the file are resolved against the file's directory.
    """
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise PipelineError("config", f"config file not found: {path}") from exc
    except yaml.YAMLError as exc:
        raise PipelineError("config", f"cannot parse {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise PipelineError("config", f"{path} must contain a mapping at top level")
    base = path.resolve().parent
    paths = dict(raw.get("paths") or {})
    if out is None:
        out = os.environ.get(OUT_ENV)
    if out is not None:
        paths["output"] = str(Path(out).resolve())
    elif "output" in paths:
        paths["output"] = str((base / paths["output"]).resolve())
    if paths.get("data"):
        paths["data"] = str((base / paths["data"]).resolve())
    raw["paths"] = paths
    if seed_override is not None:
        raw["seeds"] = {f.alias or k: int(seed_override) for k, f in SeedsConfig.model_fields.items()}
    if bias_mode is not None:
        raw["bias"] = {**(raw.get("bias") or {}), "modes": bias_mode}
    try:
        cfg = RunConfig.model_validate(raw)
    except ValidationError as exc:
        raise PipelineError("config", f"invalid configuration in {path}:\n{exc}") from exc
    if cfg.paths.data is not None:
        for name in ("iuq.csv", "test.csv"):
            if not (Path(cfg.paths.data) / name).is_file():
                raise PipelineError("config", f"data file {Path(cfg.paths.data) / name} does not exist")
    return cfg


# ---------------------------------------------------------------- manifest
def sha256(path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


class RunManifest:
    """Stage completion records with artifact checksums, stored as JSON."""

    FILE = "manifest.json"

    def __init__(self, root: Path, config_hash: str):
        self.root = Path(root)
        self.config_hash = config_hash
        self.stages: dict[str, dict] = {}
        p = self.root / self.FILE
        if p.exists():
            data = json.loads(p.read_text(encoding="utf-8"))
            self.stages = data.get("stages", {})

    def record(self, stage: str, artifacts) -> None:
        files = {str(Path(a).relative_to(self.root)): sha256(a) for a in sorted(map(Path, artifacts))}
        self.stages[stage] = {"config_hash": self.config_hash, "artifacts": files}
        self.save()

    def save(self) -> None:
        data = {"tool_version": __version__, "config_hash": self.config_hash,
                "stages": {k: self.stages[k] for k in STAGES if k in self.stages}}
        (self.root / self.FILE).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    def check(self, stage: str, requester: str) -> None:
        rec = self.stages.get(stage)
        if rec is None:
            raise PipelineError(requester, f"missing upstream artifacts; run stage '{stage}' first")
        if rec["config_hash"] != self.config_hash:
            raise PipelineError(requester, f"stage '{stage}' was run under a different configuration; rerun '{stage}'")
        for rel, digest in rec["artifacts"].items():
            p = self.root / rel
            if not p.exists():
                raise PipelineError(requester, f"artifact {rel} from stage '{stage}' is missing; rerun '{stage}'")
            if sha256(p) != digest:
                raise PipelineError(requester, f"artifact {rel} from stage '{stage}' was modified (checksum mismatch); "
                                               f"rerun '{stage}'")

    def invalidate_from(self, stage: str) -> None:
        for s in STAGES[STAGES.index(stage):]:
            self.stages.pop(s, None)


@contextmanager
def output_lock(root: Path):
    """Exclusive lock on an output directory via an O_EXCL lockfile."""
    root.mkdir(parents=True, exist_ok=True)
    lock = root / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError as exc:
        raise PipelineError("lock", f"{root} is locked by another run (remove {lock} if stale)") from exc
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


# ---------------------------------------------------------------- stages
class Pipeline:
    def __init__(self, config: RunConfig):
        self.config = config
        self.root = Path(config.paths.output)
        self.prior = config.prior.spec()

    # paths
    def _p(self, *parts) -> Path:
        p = self.root.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def _dataset(self, name: str) -> Dataset:
        return read_dataset_csv(self.root / "data" / f"{name}.csv")

    def _model(self):
        if not self.config.surrogate.enabled:
            return BENCHMARK
        return GaussianProcessSurrogate.load(self.root / "surrogate" / "gp.npz")

    def _design_box(self, datasets) -> tuple[np.ndarray, np.ndarray]:
        X = np.vstack([d.X for d in datasets])
        lo, hi = X.min(axis=0), X.max(axis=0)
        pad = 0.01 * np.where(hi > lo, hi - lo, 1.0)
        return lo - pad, hi + pad

    def run(self, stage: str, manifest: RunManifest) -> list[Path]:
        for up in UPSTREAM[stage]:
            manifest.check(up, stage)
        manifest.invalidate_from(stage)
        manifest.save()
        try:
            artifacts = getattr(self, f"stage_{stage}")()
        except PipelineError:
            raise
        except Exception as exc:
            raise PipelineError(stage, f"{type(exc).__name__}: {exc}") from exc
        manifest.record(stage, artifacts)
        logger.info("stage %s complete (%d artifacts)", stage, len(artifacts))
        return artifacts

    def stage_generate(self) -> list[Path]:
        cfg = self.config
        if cfg.paths.data is not None:
            iuq = read_dataset_csv(Path(cfg.paths.data) / "iuq.csv")
            test = read_dataset_csv(Path(cfg.paths.data) / "test.csv")
        else:
            g = cfg.generator
            gen = GeneratorConfig(tuple(g.theta_star), g.noise_std, g.bias, g.bias_scale, g.n_iuq, g.n_tests,
                                  dict(g.iuq_ranges), dict(g.test_ranges))
            iuq, test = generate_benchmark_data(gen, cfg.seeds.generate)
        if cfg.correction.enabled:
            iuq, test = (correct_dataset(d, cfg.correction.family) for d in (iuq, test))
        iuq = iuq.subset(range(len(iuq)), "IUQ")
        val, pred = split_dataset(test, cfg.seeds.split)
        out = []
        for name, d in (("iuq", iuq), ("val", val), ("pred", pred)):
            out.append(write_dataset_csv(d, self._p("data", f"{name}.csv")))
        return out

    def stage_surrogate(self) -> list[Path]:
        cfg = self.config.surrogate
        if not cfg.enabled:
            p = self._p("surrogate", "NOT_USED.txt")
            p.write_text("surrogate disabled; the computer model is evaluated directly\n", encoding="utf-8")
            return [p]
        data = [self._dataset(n) for n in ("iuq", "val", "pred")]
        x_lo, x_hi = self._design_box(data)
        lo = np.concatenate([x_lo, self.prior.lower])
        hi = np.concatenate([x_hi, self.prior.upper])
        d = len(x_lo)
        seed = self.config.seeds.surrogate
        design = build_training_design(lo, hi, cfg.n_train, seed)
        y = BENCHMARK.evaluate(design.samples[:, :d], design.samples[:, d:])
        gp = GaussianProcessSurrogate(n_restarts=cfg.n_restarts, random_state=seed).fit(design.samples, y)
        out = [gp.save(self._p("surrogate", "gp.npz"))]
        if cfg.n_holdout > 0:
            hold = build_training_design(lo, hi, cfg.n_holdout, seed + 1, check_size=False)
            y_hold = BENCHMARK.evaluate(hold.samples[:, :d], hold.samples[:, d:])
            metrics = validate_gp(gp, hold.samples, y_hold)
            p = self._p("surrogate", "holdout.csv")
            with p.open("w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["qoi", "rmse", "coverage_fraction"])
                for j, q in enumerate(data[0].qoi_names):
                    w.writerow([q, repr(float(metrics["rmse"][j])), repr(float(metrics["coverage_fraction"][j]))])
            out.append(p)
        return out

    def _chain(self, iuq: Dataset, model, bias: BiasModel, seed: int):
        m = self.config.mcmc
        terms = LikelihoodTerms(iuq, model, bias)
        mc = McmcConfig(n_samples=m.n_samples, burn_in=m.burn_in, thinning=m.thinning, seed=seed,
                        target_acceptance=m.target_acceptance)
        return run_mcmc(self.prior, make_log_posterior(self.prior, terms), mc)

    def stage_iuq(self) -> list[Path]:
        cfg = self.config
        iuq = self._dataset("iuq")
        model = self._model()
        seed = cfg.seeds.iuq
        modes = cfg.bias_modes()
        chains, biases = {}, {}
        need_nobias = "off" in modes or ("on" in modes and cfg.bias.reference == "no_bias_posterior_mean")
        if need_nobias:
            biases["off"] = estimate_bias(iuq, model, self.prior.nominal, enabled=False)
            chains["off"] = self._chain(iuq, model, biases["off"], seed)
        if "on" in modes:
            if cfg.bias.reference == "nominal":
                ref = self.prior.nominal
            else:
                ref = posterior_moments(chains["off"]).mean
            biases["on"] = estimate_bias(iuq, model, ref, n_restarts=cfg.bias.n_restarts, random_state=seed)
            chains["on"] = self._chain(iuq, model, biases["on"], seed)
        out = []
        for mode in modes:
            sub = MODE_DIRS[mode]
            chain = chains[mode]
            out.append(write_chain_csv(chain, self._p("iuq", sub, "chain.csv")))
            out.append(biases[mode].save(self._p("iuq", sub, "bias.npz")))
            mom = posterior_moments(chain)
            p = self._p("iuq", sub, "moments.csv")
            with p.open("w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["parameter", "mean", "std"])
                for name, mu, sd in zip(self.prior.names, mom.mean, mom.std):
                    w.writerow([name, repr(float(mu)), repr(float(sd))])
            out.append(p)
            diag = chain_diagnostics(chain)
            p = self._p("iuq", sub, "diagnostics.txt")
            p.write_text(format_diagnostics(diag, self.prior.names), encoding="utf-8")
            out.append(p)
        return out

    def _posterior_samples(self, mode: str, n: int, seed: int) -> np.ndarray:
        chain = read_chain_csv(self.root / "iuq" / MODE_DIRS[mode] / "chain.csv")
        return GaussianCopula().fit(chain.samples).sample(n, random_state=seed)

    def stage_validate(self) -> list[Path]:
        cfg = self.config
        val = self._dataset("val")
        model = self._model()
        seed = cfg.seeds.validate_
        n = cfg.validation.n_samples
        h1 = HypothesisEnsemble.from_prior(self.prior, n, seed)
        reports, out = [], []
        for mode in cfg.bias_modes():
            h0 = HypothesisEnsemble("H0_posterior", self._posterior_samples(mode, n, seed + 1), "copula_from_chain")
            out.append(write_samples_csv(h0.samples, self._p("validate", MODE_DIRS[mode], "posterior_samples.csv")))
            bias = BiasModel.load(self.root / "iuq" / MODE_DIRS[mode] / "bias.npz")
            include = cfg.validation.include_bias and mode == "on"
            reports.append(estimate_bayes_factor(
                val, h0, h1, model, bias=bias, include_bias=include, joint=cfg.validation.joint,
                aggregation=cfg.validation.aggregation, dataset=cfg.dataset, bias_mode=MODE_DIRS[mode], seed=seed))
        table = aggregate_bf(reports)
        return out + [write_bf_csv(reports, self._p("validate", "bf_per_test.csv")),
                      write_bf_table_csv(table, self._p("validate", "bf_table.csv"), cfg.validation.aggregation)]

    def stage_predict(self) -> list[Path]:
        cfg = self.config
        pred = self._dataset("pred")
        if len(pred) == 0:
            raise PipelineError("predict", "prediction set is empty; nothing to predict")
        if cfg.validation.joint:
            raise PipelineError("predict", "per-QoI weights need per-QoI Bayes factors; set validation.joint: false")
        model = self._model()
        seed = cfg.seeds.predict
        n = cfg.prediction.n_samples
        table = read_bf_table_csv(self.root / "validate" / "bf_table.csv")
        bf = {mode: {q: v for (ds, m, q), v in table.items() if m == MODE_DIRS[mode]} for mode in cfg.bias_modes()}
        prior_samples = self.prior.sample(n, seed)
        post = {mode: self._posterior_samples(mode, n, seed + 1) for mode in cfg.bias_modes()}
        summary = model_ensemble_predict(pred, prior_samples, post.get("on"), post.get("off"), bf.get("off"),
                                         bf.get("on"), model, dataset=cfg.dataset, std_mode=cfg.prediction.std_mode)
        errors = error_report(summary, pred)
        out = [write_prediction_csv(summary, self._p("predict", "predictions.csv")),
               write_error_csv(errors, self._p("predict", "errors.csv"), cfg.dataset)]
        out += write_plot_data(summary, pred, self.root / "predict" / "plot")
        return out

    def stage_report(self) -> list[Path]:
        cfg = self.config
        pred_file = self.root / "predict" / "predictions.csv"
        with pred_file.open(newline="", encoding="utf-8") as fh:
            if sum(1 for _ in csv.DictReader(fh)) == 0:
                raise PipelineError("report", "prediction set is empty; refusing to report")
        table = read_bf_table_csv(self.root / "validate" / "bf_table.csv")
        errors = read_error_csv(self.root / "predict" / "errors.csv")
        qois = list(dict.fromkeys(q for _, _, q in table))

        weights = {}
        for (ds, mode, q), b in table.items():
            m = "D" if mode == "no_bias" else "E"
            weights.setdefault(m, {})[q] = bma_weights(b)
        w_rows = {m: tuple(ws[q] for q in qois) for m, ws in sorted(weights.items())}

        wpath = self._p("report", "weights.csv")
        with wpath.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["dataset", "model", "qoi", "w_prior", "w_posterior"])
            for m, ws in w_rows.items():
                for q, wt in zip(qois, ws):
                    w.writerow([cfg.dataset, m, q, repr(wt.w_prior), repr(wt.w_posterior)])
        bpath = write_bf_table_csv(table, self._p("report", "bf_table.csv"), cfg.validation.aggregation)
        epath = write_error_csv(errors, self._p("report", "errors.csv"), cfg.dataset)

        lines = [f"dataset: {cfg.dataset}", f"Bayes factors ({cfg.validation.aggregation} mean over validation tests)",
                 "                      " + "".join(f"  {q:>6}" for q in qois)]
        lines += format_bf_table(table, qois)
        flagged = [f"  {mode} {q}: B = {b:.4f} ({favours(b)})" for (ds, mode, q), b in sorted(table.items())
                   if favours(b) != "posterior-favored"]
        if flagged:
            lines.append("prior-favored or neutral entries:")
            lines += flagged
        lines += ["", "BMA weights (prior model A, then calibrated model)"]
        lines += format_weight_table(w_rows, qois)
        lines += ["", f"mean absolute error of predictive means (std mode: {cfg.prediction.std_mode})"]
        lines += format_error_table(errors, qois)
        spath = self._p("report", "summary.txt")
        spath.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return [bpath, wpath, epath, spath]


def run_stages(config: RunConfig, stages) -> RunManifest:
    """Run ``stages`` in order under the output-directory lock."""
    pipe = Pipeline(config)
    with output_lock(pipe.root):
        manifest = RunManifest(pipe.root, config.config_hash())
        for stage in stages:
            if stage not in STAGES:
                raise PipelineError(stage, f"unknown stage; choose from {STAGES}")
            pipe.run(stage, manifest)
    return manifest


def run_all(config: RunConfig) -> RunManifest:
    return run_stages(config, STAGES)
