"""Bayesian active learning of continuous-time Bayesian networks through interventions."""

from ctbndesign.active import (
    ExperimentConfig,
    MetricsRecord,
    RunResult,
    aggregate,
    auroc_aupr,
    mse_posterior,
    records_to_frame,
    run_comparison,
    run_sequence,
)
from ctbndesign.bayes import (
    RatePosterior,
    StructureBelief,
    StructurePosterior,
    edge_marginals,
    gamma_kl,
    load_posterior,
    path_log_likelihood,
    posterior_entropy,
    save_posterior,
    structure_marginal_log_likelihood,
    structure_posterior,
)
from ctbndesign.design import (
    STRATEGIES,
    CriterionValue,
    SelectionResult,
    bhc_parameters,
    bhc_structure,
    candidate_clamp_interventions,
    eig_parameters,
    eig_structure,
    kl_ctbn_rates,
    minimize_vbhc_parameters,
    minimize_vbhc_structure,
    select_intervention,
    vbhc_parameters,
    vbhc_structure,
)
from ctbndesign.engine import (
    JointStats,
    NodeStats,
    NumericalError,
    batched_dwell_moments,
    expected_statistics_for_model,
    joint_expected_moments,
    project_statistics,
    solve_master_equation,
)
from ctbndesign.filtering import (
    ObservationSeries,
    SmoothedMarginals,
    backward_pass,
    expected_node_statistics,
    incomplete_data_posterior_update,
    incomplete_data_structure_update,
    smoothed_marginals,
    tilted_generator,
    update_posterior_with_expected,
)
from ctbndesign.model import (
    AmalgamatedCtmc,
    Clamp,
    Ctbn,
    GammaRateSpec,
    Intervention,
    RateOverride,
    SoftmaxRateSpec,
    amalgamate,
    apply_intervention,
    load_model,
    random_model,
    save_model,
)
from ctbndesign.paths import (
    SufficientStats,
    Trajectory,
    extract_statistics,
    load_trajectories,
    pool,
    sample_path,
    save_trajectories,
    simulate_statistics,
)
from ctbndesign.presets import PRESET_NAMES, preset_config, preset_model

__version__ = "0.1.0"
