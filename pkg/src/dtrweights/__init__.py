"""Value estimation for threshold-based dynamic treatment regimes.

Standard inverse-probability weighting plus two relaxed-adherence weightings:
generalized adherence weights (GAW) and bootstrap-selected adherence windows
(BAW), each with plain and augmented, unnormalized and normalized estimators.
"""

from .baw import WindowSearchResult, build_grid, delta_max, select_window
from .core import (
    BawConfig,
    Clause,
    DataError,
    Direction,
    DisqualifiedWindowError,
    DtrError,
    GawConfig,
    NoAdherersError,
    Panel,
    Regime,
    SeparationError,
    WeightKind,
    WeightSeries,
    WindowSpec,
    recommended_action,
    recommended_actions,
    strict_adherence,
)
from .estimators import (
    ESTIMATOR_NAMES,
    EstimatorTag,
    ValueEstimate,
    analytical_variance_augmented,
    analytical_variance_plain,
    bias_bound,
    value_augmented,
    value_plain,
)
from .glm import FeatureSpec, Nuisance, fit_logistic, fit_q_functions, predict_propensity
from .io import IngestSchema, ingest_csv, write_panel
from .simgen import DgpSpec, generate, oracle_value, true_propensities, true_value
from .surface import ValueSurface, bootstrap_thresholds, estimate_value, evaluate_surface, regime_metrics
from .weighting import (
    baw_weights,
    ess,
    gamma_from_constraint,
    gaw_stage_weight,
    gaw_weights,
    ipw_weights,
    smd,
    weight_spread,
    windowed_compatibility,
)

__version__ = "0.1.0"
