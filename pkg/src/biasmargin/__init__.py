"""Simulation toolkit for bias-extended maximum-margin classifiers under heavy-tailed mixtures."""

from .events import (
    EventParams,
    EventReport,
    PerturbationReport,
    TildeParams,
    check_events,
    homogeneous_params,
    measure_perturbation,
    normalized_gram,
    spectral_deviation,
    tilde_params,
)
from .experiments import ExperimentConfig, estimate_test_error, report, run_event_mc, run_sweep
from .maxmargin import GdTrace, NotSeparable, Solution, gd_train, hard_margin_oracle, margin_stats
from .sampler import (
    Dataset,
    ExtendedDataset,
    GSpec,
    ModelSpec,
    XiSpec,
    build_g_spec,
    build_sigma,
    build_xi_spec,
    derive_seed,
    extend_dataset,
    make_mu,
    sample_dataset,
)
from .theory import (
    ConstantsConfig,
    TheoremReport,
    corollary_exponents,
    error_bound_rhs,
    m_ge_one_check,
    thm1_conditions,
    thm2_conditions,
    thm3_conditions,
)

__version__ = "0.1.0"
