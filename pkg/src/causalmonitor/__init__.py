"""Sequential monitoring of deployed risk-prediction models under treatment
feedback, with a counterfactual simulation harness for studying operating
characteristics (power curves, Type-I calibration)."""

from .control_limits import (
    BootstrapPath,
    ControlLimitSchedule,
    alarm_check,
    alpha_spending,
    bootstrap_outcome,
    compute_dcl,
    draw_bootstrap_outcomes,
    spending_schedule,
    worst_case_probability,
)
from .exceptions import (
    ConvergenceError,
    DegenerateCellError,
    DegenerateDataError,
    PositivityViolationError,
)
from .harness import (
    CalibrationBundle,
    CellResult,
    GridDefaults,
    PowerCurve,
    ReplicateResult,
    ScenarioConfig,
    calibrate,
    calibrate_thresholds,
    default_grid,
    estimate_power,
    median_delay,
    power_curve,
    run_grid,
    run_replicate,
)
from .monitors import (
    MonitorSpec,
    MonitorState,
    cusum_update,
    estimate_subgroup_weights,
    increment_c1,
    increment_c2,
    increment_c3,
    new_monitor_state,
    run_monitor,
    stream_chart,
)
from .propensity import (
    PropensityModel,
    fit_propensity,
    interventional_propensity,
    observational_propensity,
)
from .risk_model import FitConfig, RiskModel, fit_logistic, oracle_model
from .simulator import (
    ObservationRecord,
    ObservationStream,
    ShiftScenario,
    Subgroup,
    apply_shift,
    generate_stream,
    monitoring_subgroups,
    sample_covariates,
    subgroup_all,
    subgroup_known,
    subgroup_known_complement,
    subgroup_misspec,
    true_risk_pre,
)

__all__ = [name for name in dir() if not name.startswith("_")]
