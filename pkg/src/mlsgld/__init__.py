"""Multilevel stochastic-gradient Langevin dynamics sampling toolkit.

Estimates posterior expectations by telescoping coupled SGLD paths across a
hierarchy of step sizes, with antithetic subsample coupling, Taylor-remainder
gradient estimators, trajectory averaging, and a tuned MALA baseline.
"""

from .coupling import (
    CouplingVariant,
    DeltaSample,
    LevelConfig,
    level_schedule,
    sample_delta_antithetic,
    sample_delta_averaged,
    sample_delta_block,
    sample_delta_plain,
    sample_level0,
)
from .gradients import (
    DriftEstimate,
    TaylorCenter,
    build_estimator,
    drift_full,
    drift_subsampled,
    drift_switched,
    drift_taylor,
    taylor_center,
)
from .mala import (
    MalaChain,
    mala_log_accept,
    mala_step,
    run_mala_experiment,
    tune_step,
)
from .mlmc import (
    LevelStats,
    MlmcCaps,
    MlmcResult,
    cost_report,
    optimal_allocation,
    result_to_dict,
    run_mlmc,
)
from .models import (
    Dataset,
    GaussianConjugateModel,
    LogisticRegressionModel,
    MapEstimate,
    build_model,
    g_quadratic,
    generate_dataset,
    load_dataset,
    log_posterior_grad_full,
    make_quadratic_g,
    map_newton,
    save_dataset,
)
from .paths import PathState, euler_step, run_path
from .streams import (
    NoisePair,
    RngStream,
    SampleStreams,
    coarse_batch,
    coarse_noise,
    gaussian_vector,
    sample_batch,
)

__version__ = "0.1.0"
