"""Stratified MOVER confidence intervals for differences and ratios."""

from .binary import (
    BinaryStratum,
    ZeroCellPolicy,
    analyze_binary,
    binary_effect,
    mr_continuity,
    resolve_weights,
    wilson_ci,
)
from .core import (
    ConfidenceInterval,
    EffectResult,
    Method,
    Scale,
    Scheme,
    StratumGroupSummary,
    WeightSpec,
    validate_inputs,
)
from .errors import Incomputable, InputError, StratMoverError
from .mover import (
    ac2_diff_ci,
    ac2_ratio_bisection,
    ac_diff_ci,
    acl_ratio_ci,
    av_diff_ci,
    avl_ratio_ci,
    fieller_ac_ratio,
    fieller_av_ratio,
    mover_diff_unstratified,
)
from .simulation import Metric, Scenario, coverage_study, generate_dataset, scenario_grid, test_study
from .survival import ExternalCI, SurvivalRecord, analyze_survival, interaction_ci, km_fit, make_summaries

__version__ = "0.1.0"
