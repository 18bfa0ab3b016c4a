"""Bayesian inverse UQ, Bayes-factor validation and model-averaged prediction."""

__version__ = "0.1.0"

from .benchmark import (
    BENCHMARK,
    THETA_STAR,
    ComputerModel,
    FunctionModel,
    GeneratorConfig,
    VoidFractionBenchmark,
    benchmark_prior,
    evaluate_model,
    generate_benchmark_data,
    injected_bias,
)
from .copula import GaussianCopula, fit_copula, sample_copula
from .core import (
    Dataset,
    DesignPoint,
    DomainTag,
    Observation,
    ParamVector,
    PriorSpec,
    QoIVector,
    UncertaintyBudget,
    correct_dataset,
    correct_void_fraction,
    read_dataset_csv,
    split_dataset,
    write_dataset_csv,
)
from .inverse import (
    AdaptiveMetropolis,
    BiasModel,
    McmcChain,
    LikelihoodTerms,
    McmcConfig,
    PosteriorMoments,
    chain_diagnostics,
    estimate_bias,
    log_likelihood,
    make_log_posterior,
    posterior_moments,
    run_mcmc,
)
from .prediction import (
    BmaWeights,
    PredictionSummary,
    bma_predict,
    bma_weights,
    error_report,
    mixture_moments,
    model_ensemble_predict,
)
from .surrogate import GaussianProcessSurrogate, build_training_design, predict_gp, validate_gp
from .validation import (
    BayesFactorReport,
    HypothesisEnsemble,
    aggregate_bf,
    estimate_bayes_factor,
    gaussian_density,
)

__all__ = [name for name in dir() if not name.startswith("_")]
