"""Dynamic functional continuous-time Bayesian networks.

Learns a sparse network of transition intensities driven by risk factors,
tracks the coefficient tensor per patient with an extended Kalman filter,
and monitors the tensor stream with an MPCA-based EWMA control chart.
"""

__version__ = "0.1.0"

from .errors import ConvergenceError, DataError, DfctbnError, NumericalError
from .network import (
    Event,
    FactorSchema,
    REFERENCE_CONDITIONS,
    SufficientStats,
    Trajectory,
    design_vector,
    emergence_probability,
    exit_rates,
    intensity_matrix,
    reference_factor_schema,
    risk_strata,
    sample_trajectory,
    sojourn_distribution,
    sufficient_statistics,
)
from .params import CompactParams
from .learn import (
    FitConfig,
    IntensityNetworkLearner,
    cross_validate,
    extract_structure,
    fit_group_lasso,
    fit_mle,
    log_likelihood,
    log_likelihood_gradient,
)
from .kalman import (
    CoefficientFilter,
    EkfState,
    FilterConfig,
    VisitObservation,
    estimate_transition_matrix,
    predict_step,
    run_filter,
    stability_report,
    visit_observations,
)
from .monitor import (
    ChartPoint,
    ChartState,
    EwmaChart,
    MultilinearPCA,
    chart_calibrate,
    chart_update,
    control_limits,
    monitor_stream,
    n_mode_product,
)
from .simulate import (
    DetectionReport,
    ScenarioResult,
    ScenarioSpec,
    generate_cohort,
    load_reference_truth,
    make_reference_truth,
    reference_scenario,
    run_scenario,
)

__all__ = [name for name in dir() if not name.startswith("_")]
