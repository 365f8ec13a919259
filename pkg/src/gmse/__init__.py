"""Mass-imputed register totals for multi-category outcomes, with GMSE accuracy estimates."""

from .kronecker import KroneckerWorkspace, kf_gmse, kf_totals
from .linear import (
    CVUndefinedError,
    GmseReport,
    PluginCache,
    build_plugin_cache,
    build_report,
    cumulated_gmse,
    cv,
    gmse_draw_variant,
    gmse_lin,
    gmse_lin_many,
)
from .multinomial import Coefficients, FittedModel, SeparationError, fit, probabilities
from .register import (
    Covariate,
    CovariateSchema,
    DomainSpec,
    Register,
    RegisterError,
    build_design_matrix,
    domain_partition,
    domain_vector,
    full_domain,
    read_register_csv,
    write_register_csv,
)
from .resampling import ResamplingError, ResamplingPlan, bootstrap_gmse, mc_oracle
from .simulation import SimulationScenario, generate_register, load_scenario, run_comparison

__version__ = "0.1.0"

__all__ = [
    "CVUndefinedError",
    "Coefficients",
    "Covariate",
    "CovariateSchema",
    "DomainSpec",
    "FittedModel",
    "GmseReport",
    "KroneckerWorkspace",
    "PluginCache",
    "Register",
    "RegisterError",
    "ResamplingError",
    "ResamplingPlan",
    "SeparationError",
    "SimulationScenario",
    "bootstrap_gmse",
    "build_design_matrix",
    "build_plugin_cache",
    "build_report",
    "cumulated_gmse",
    "cv",
    "domain_partition",
    "domain_vector",
    "fit",
    "full_domain",
    "generate_register",
    "gmse_draw_variant",
    "gmse_lin",
    "gmse_lin_many",
    "kf_gmse",
    "kf_totals",
    "load_scenario",
    "mc_oracle",
    "probabilities",
    "read_register_csv",
    "run_comparison",
    "write_register_csv",
]
