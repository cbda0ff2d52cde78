"""Empirical-likelihood integration of external summary statistics."""

from .core import (
    Dataset,
    EstimatingFunctionSpec,
    ExternalSummary,
    load_dataset,
    load_summary,
    validate_summary,
    write_dataset,
    write_summary,
)
from .causal import CausalFit, fit_integrated_iptw, fit_iptw
from .el import ELWeights, solve_multiplier, weights_from_multiplier
from .exceptions import ElfusionError, InputError, NumericalError
from .gim import GimFit, fit_cml, fit_gim
from .glm import GlmFit, fit_logistic, internal_reduced_fit, score_reduced
from .integrator import IntegratedFit, bootstrap_cov, fit_integrated, solve_weighted_ee
from .meta import MetaEstimate, gls_combine
from .simulation import MetricsTable, ScenarioConfig, format_table, run_monte_carlo

__version__ = "0.1.0"
