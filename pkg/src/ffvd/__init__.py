"""Free-form variational inference for Gaussian process state-space models.

Joint SGHMC sampling of latent trajectories and whitened inducing variables,
an analytically collapsed sampler over trajectories only, and a particle
MCMC sampler, with prediction, evaluation, and data tooling.
"""

from .data import Dataset, generate_synthetic, load_csv, standardize, unstandardize_predictions
from .errors import (
    DataError,
    FfvdError,
    InitializationError,
    InsufficientSamplesError,
    NotPositiveDefiniteError,
    NumericalError,
    ShapeError,
    WeightCollapseError,
)
from .evaluation import (
    NormalityReport,
    PredictiveSummary,
    normality_sweep,
    normality_test,
    rmse,
    rollout_predict,
    trace_summary,
)
from .kernels import (
    GramCache,
    KernelParams,
    SparseCond,
    build_gram_cache,
    cholesky_jittered,
    expected_log_gaussian,
    gaussian_conditional,
    gram,
    kernel_eval,
    sparse_cond,
)
from .model import (
    GpssmModel,
    Trajectory,
    WhitenedInducing,
    init_from_data,
    load_checkpoint,
    log_likelihood_obs,
    make_model,
    sample_generative,
    save_checkpoint,
    transition_moments,
    transition_predictive,
    unwhiten,
    whiten,
    with_hypers,
)
from .objective import (
    CollapsedStats,
    GradientBundle,
    collapsed_stats,
    grad,
    log_hyper_prior,
    log_q_collapsed,
    log_q_joint,
    sample_conditional_inducing,
    value_and_grad,
)
from .samplers import (
    AdamState,
    FitConfig,
    PmcmcConfig,
    SampleStore,
    SghmcConfig,
    adam_hyper_step,
    fit,
    pmcmc_sweep,
    sghmc_run,
)

__version__ = "0.1.0"
