"""Composite birth-death processes: simulation and survival-conditioned inference."""

from .errors import (
    BdpError,
    DataInconsistencyError,
    ExperimentError,
    IdentifiabilityError,
    InsufficientExposureError,
    ModelError,
    OptimizationError,
    RejectionBudgetError,
)
from .model import (
    AdmissibilityReport,
    ParamVector,
    RateVector,
    StructuralFunctions,
    birth_rate,
    death_rate,
    load_model,
    model_from_dict,
    model_to_dict,
    rate_vector,
    sis_structural,
    validate_admissible,
)
from .spectral import (
    KilledGenerator,
    QProcessRates,
    SpectralData,
    SpectralSensitivities,
    build_killed_generator,
    doob_transform,
    eigen_sensitivities,
    principal_eigen,
    spectral_bundle,
    survival_probability,
)
from .simulate import (
    RngStream,
    Trajectory,
    load_trajectory,
    save_trajectory,
    simulate_original,
    simulate_q_process,
    simulate_survival_conditioned,
    state_at,
    truncate,
)
from .inference import (
    FitResult,
    SpectralCache,
    SufficientStats,
    fit_conditional_mle,
    fit_qmle,
    full_score,
    loglik_conditional,
    loglik_unconditional,
    mle_marked_closed_form,
    mle_unconditional,
    sufficient_stats,
    working_score,
)
from .asymptotics import (
    InfoMatrices,
    WaldResult,
    fisher_information,
    fisher_information_observed,
    godambe,
    ks_distance_normal,
    limit_contrast,
    limit_estimating,
    mixture_critical_value,
    normal_cdf,
    normal_quantile,
    rn_derivative,
    rn_full_window,
    standard_errors,
    wald_test,
)
from .experiments import ExperimentConfig, run_experiment, validate_outputs

__version__ = "0.1.0"
