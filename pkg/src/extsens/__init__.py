"""Extended sensitivity analysis for paired observational studies.

The conventional analysis bounds the largest within-pair bias by ``Gamma``.
The extended analysis adds a bound ``Gammabar`` on the typical bias and
finds the worst case over both constraints with a convex quadratic program.
"""

__version__ = "0.1.0"

from .analysis import (
    SensitivityCurve,
    SensitivityInterval,
    default_gamma_grid,
    sensitivity_curve,
    sensitivity_interval,
    sensitivity_value,
)
from .calibration import (
    CalibrationFit,
    CalibrationRecord,
    bias_odds_ratios,
    calibrate,
    estimate_gammas,
    fit_outcome_model,
    fit_treatment_model,
    pairwise_bias,
    read_calibration_csv,
    write_calibration_csv,
)
from .errors import (
    ConvergenceError,
    ExtSensError,
    NumericalError,
    ValidationError,
)
from .exact_binary import McNemarSummary, crossover_gammabar, mcnemar_pvalue, mcnemar_summary
from .oracle import EnumerationLimit, exact_tail, grid_search_min_deviate
from .paired_data import (
    HypothesisModel,
    PairedSample,
    PairRecord,
    adjust_scores,
    build_scores,
    orient_for_alternative,
    pairs_from_differences,
    read_pairs_csv,
    write_pairs_csv,
)
from .qp import AnalysisResult, QpProblem, QpSolution, analyze, assemble, minimize_zeta, reject, worst_case_pvalue
from .simulation import SimDesign, draw_replicate, p_mix, run_table
from .uncertainty_sets import (
    SensitivityBudget,
    UncertaintySetSpec,
    gamma_to_prob,
    maximize_mean_bound,
    mean_upper_bound,
    variance_bound,
)

__all__ = [name for name in dir() if not name.startswith("_")]
