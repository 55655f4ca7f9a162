"""End-to-end experiment harness: threshold calibration, replicate execution,
and the operating-characteristic grid (power curves, Type-I calibration).

Every random draw is derived from the master seed, the cell name, the setting,
and the replicate index, so results are byte-identical regardless of how
replicates are distributed across workers.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from .control_limits import (
    SIGN_ADJUSTED,
    alarm_check,
    compute_calibrated_dcl,
    compute_dcl,
    draw_bootstrap_outcomes,
    spending_schedule,
)
from .exceptions import DegenerateCellError, PositivityViolationError
from .monitors import (
    ALL_LABELS,
    INTERVENTIONAL_LABELS,
    LABEL_MAP,
    MonitorSpec,
    bootstrap_charts,
    estimate_subgroup_weights,
    stream_chart,
)
from .propensity import (
    PropensityModel,
    fit_propensity,
    interventional_propensity,
    observational_propensity,
)
from .risk_model import RiskModel, fit_logistic, oracle_model
from .simulator import (
    SHIFT_SUBGROUPS,
    ShiftScenario,
    generate_stream,
    monitoring_subgroups,
)

THRESHOLD_MARGIN = 0.02
DEFAULT_HORIZON = 4000
DEFAULT_BATCH_SIZE = 50
DEFAULT_DELTA = 0.02
DEFAULT_ALPHA = 0.10
DEFAULT_BOOTSTRAP_PATHS = 500
DEFAULT_REPLICATES = 200
DEFAULT_NULL_REPLICATES = 400
DEFAULT_CALIBRATION_N = 200_000
DEFAULT_PRE_MONITORING_N = 5000

SETTINGS = ("observational", "interventional")
DEFAULT_MONITORS = {
    "observational": ("1N", "1O", "2O", "3O"),
    "interventional": ("1I", "2I", "3I"),
}

# seed-stream tags so distinct purposes never share a substream
_TAG_STREAM = 0
_TAG_BOOTSTRAP = 1
_TAG_CALIBRATION = 101
_TAG_WEIGHTS = 102
_TAG_PREMONITOR = 103
_TAG_MODEL_FIT = 104


def _setting_code(setting: str) -> int:
    return SETTINGS.index(setting)


def _cell_code(cell_name: str) -> int:
    return zlib.crc32(cell_name.encode("ascii"))


@dataclass(frozen=True)
class ScenarioConfig:
    """One simulation cell under one data-collection setting."""

    setting: str
    monitors: tuple[str, ...]
    cell_name: str
    shift: ShiftScenario | None = None
    outcome_law: str = "dgp"
    horizon: int = DEFAULT_HORIZON
    batch_size: int = DEFAULT_BATCH_SIZE
    replicates: int = DEFAULT_REPLICATES
    master_seed: int = 0
    delta: float = DEFAULT_DELTA
    alpha: float = DEFAULT_ALPHA
    bootstrap_paths: int = DEFAULT_BOOTSTRAP_PATHS
    bootstrap_variant: str = SIGN_ADJUSTED
    pre_monitoring_n: int = DEFAULT_PRE_MONITORING_N
    calibration_n: int = DEFAULT_CALIBRATION_N
    model: str = "oracle"
    use_fitted_propensity: bool = False
    calibrate_dcl: bool = True

    def __post_init__(self):
        if self.setting not in SETTINGS:
            raise ValueError(f"unknown setting {self.setting!r}")
        unknown = [m for m in self.monitors if m not in LABEL_MAP]
        if unknown:
            raise ValueError(f"unknown monitors {unknown}")
        if self.setting == "observational":
            bad = sorted(set(self.monitors) & INTERVENTIONAL_LABELS)
            if bad:
                raise ValueError(
                    f"monitors {bad} need known randomization weights and refuse "
                    "to run under the observational setting"
                )
        if {"1O", "2O"} & set(self.monitors) and self.pre_monitoring_n <= 0:
            raise ValueError("1O/2O require a pre-monitoring phase (pre_monitoring_n > 0)")
        if self.horizon % self.batch_size:
            raise ValueError("horizon must be a multiple of the batch size")
        if self.replicates < 1:
            raise ValueError("replicates must be >= 1")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must be in (0, 1)")
        if self.delta < 0:
            raise ValueError("delta must be >= 0")
        if self.model not in ("oracle", "fitted"):
            raise ValueError(f"model must be oracle or fitted, got {self.model!r}")

    @property
    def n_batches(self) -> int:
        return self.horizon // self.batch_size

    @property
    def change_batch(self) -> int:
        """First batch containing post-change records (0 when there is no shift)."""
        if self.shift is None:
            return 0
        return (self.shift.change_time + self.batch_size - 1) // self.batch_size


def setting_propensity(setting: str) -> PropensityModel:
    if setting == "observational":
        return observational_propensity()
    return interventional_propensity()


@dataclass
class CalibrationBundle:
    """Everything run_replicate needs besides the scenario: the locked model,
    thresholds, subgroup weights per setting, and any fitted propensity models."""

    model: RiskModel
    subgroups: tuple
    thresholds_c1: dict
    thresholds_c2: dict
    weights_c2: dict
    weights_c3: dict
    fitted_propensity: dict = field(default_factory=dict)


def deployed_model(config: ScenarioConfig) -> RiskModel:
    """The locked model under monitoring: the generative oracle, or a logistic
    model fitted on a pre-deployment sample with uniform treatment."""
    if config.model == "oracle":
        return oracle_model()
    rng_stream = generate_stream(
        oracle_model(),
        PropensityModel(beta=0.0),
        5000,
        seed=np.random.SeedSequence([config.master_seed, _TAG_MODEL_FIT]),
    )
    return fit_logistic(rng_stream.x, rng_stream.a, rng_stream.y_obs)


def calibrate_thresholds(
    model: RiskModel,
    calibration_n: int,
    seed,
    subgroups=(),
) -> tuple[dict, dict]:
    """Monte-Carlo standalone PPV/NPV per (arm, label) and per subgroup from a
    pre-change stream with both potential outcomes, each minus the 2% margin."""
    if calibration_n < 100:
        raise ValueError("calibration_n is too small to estimate predictive values")
    stream = generate_stream(model, PropensityModel(beta=0.0), calibration_n, seed=seed)
    yhat = {0: model.binarize(stream.x, 0), 1: model.binarize(stream.x, 1)}
    y_pot = {0: stream.y0, 1: stream.y1}
    members = {s.name: s.contains_many(stream.x) for s in subgroups}

    def cell_threshold(arm, label, mask, cell_desc):
        sel = (yhat[arm] == label) & mask
        n_sel = int(sel.sum())
        if n_sel == 0:
            raise DegenerateCellError(f"no predictions with label {label} for {cell_desc}")
        rate = float(np.mean(y_pot[arm][sel] == label))
        c = rate - THRESHOLD_MARGIN
        if not 0.0 < c < 1.0:
            raise DegenerateCellError(
                f"threshold {c:.4f} for {cell_desc} is outside (0, 1)"
            )
        return c

    everyone = np.ones(len(stream), dtype=bool)
    c1 = {
        (a, v): cell_threshold(a, v, everyone, f"arm {a}")
        for a in (0, 1)
        for v in (0, 1)
    }
    c2 = {
        (a, v, s.name): cell_threshold(a, v, members[s.name], f"arm {a}, subgroup {s.name}")
        for s in subgroups
        for a in (0, 1)
        for v in (0, 1)
    }
    return c1, c2


def calibrate(config: ScenarioConfig) -> CalibrationBundle:
    """Build the full calibration bundle for a scenario's master seed."""
    model = deployed_model(config)
    subgroups = monitoring_subgroups()
    c1, c2 = calibrate_thresholds(
        model,
        config.calibration_n,
        np.random.SeedSequence([config.master_seed, _TAG_CALIBRATION]),
        subgroups,
    )

    fitted: dict[str, PropensityModel] = {}
    if config.use_fitted_propensity:
        for setting in SETTINGS:
            pre = generate_stream(
                model,
                setting_propensity(setting),
                config.pre_monitoring_n,
                seed=np.random.SeedSequence(
                    [config.master_seed, _TAG_PREMONITOR, _setting_code(setting)]
                ),
            )
            fitted[setting] = fit_propensity(pre)

    weights_c2: dict[str, dict] = {}
    weights_c3: dict[str, dict] = {}
    for setting in SETTINGS:
        pre_change = generate_stream(
            model,
            setting_propensity(setting),
            config.calibration_n,
            seed=np.random.SeedSequence(
                [config.master_seed, _TAG_WEIGHTS, _setting_code(setting)]
            ),
        )
        unit_c2 = MonitorSpec(
            label="2I" if setting == "interventional" else "2O",
            thresholds=c2,
            subgroups=subgroups,
            subgroup_weights={(s.name, v): 1.0 for s in subgroups for v in (0, 1)},
            batch_size=config.batch_size,
            threshold_b=model.threshold,
            propensity_model=fitted.get(setting),
        )
        weights_c2[setting] = estimate_subgroup_weights(pre_change, unit_c2)
        unit_c3 = MonitorSpec(
            label="3I" if setting == "interventional" else "3O",
            subgroups=subgroups,
            subgroup_weights={s.name: 1.0 for s in subgroups},
            delta=config.delta,
            batch_size=config.batch_size,
            threshold_b=model.threshold,
        )
        weights_c3[setting] = estimate_subgroup_weights(pre_change, unit_c3)

    return CalibrationBundle(
        model=model,
        subgroups=subgroups,
        thresholds_c1=c1,
        thresholds_c2=c2,
        weights_c2=weights_c2,
        weights_c3=weights_c3,
        fitted_propensity=fitted,
    )


def build_monitor_spec(
    label: str, config: ScenarioConfig, calibration: CalibrationBundle
) -> MonitorSpec:
    criterion = LABEL_MAP[label][0]
    common = dict(batch_size=config.batch_size, threshold_b=calibration.model.threshold)
    est_model = (
        calibration.fitted_propensity.get(config.setting)
        if config.use_fitted_propensity
        else None
    )
    if criterion == "C1":
        return MonitorSpec(
            label=label,
            thresholds=calibration.thresholds_c1,
            propensity_model=est_model if label == "1O" else None,
            **common,
        )
    if criterion == "C2":
        return MonitorSpec(
            label=label,
            thresholds=calibration.thresholds_c2,
            subgroups=calibration.subgroups,
            subgroup_weights=calibration.weights_c2[config.setting],
            propensity_model=est_model if label == "2O" else None,
            **common,
        )
    return MonitorSpec(
        label=label,
        subgroups=calibration.subgroups,
        subgroup_weights=calibration.weights_c3[config.setting],
        delta=config.delta,
        **common,
    )


@dataclass
class ReplicateResult:
    """First-alarm batch per monitor (None if no alarm), plus per-monitor errors."""

    alarms: dict
    errors: dict = field(default_factory=dict)


def run_replicate(
    config: ScenarioConfig, replicate_index: int, calibration: CalibrationBundle | None = None
) -> ReplicateResult:
    """Generate one monitored stream, build every requested monitor's dynamic
    control limit from shared worst-case outcome resamples, and return the
    first alarm batch per monitor."""
    calibration = calibration if calibration is not None else calibrate(config)
    base = [
        config.master_seed,
        _cell_code(config.cell_name),
        _setting_code(config.setting),
        replicate_index,
    ]
    stream = generate_stream(
        calibration.model,
        setting_propensity(config.setting),
        config.horizon,
        shift=config.shift,
        seed=np.random.SeedSequence(base + [_TAG_STREAM]),
        outcome_law=config.outcome_law,
        delta=config.delta,
    )
    boot_rng = np.random.default_rng(np.random.SeedSequence(base + [_TAG_BOOTSTRAP]))
    outcomes = draw_bootstrap_outcomes(
        stream, config.delta, config.bootstrap_paths, boot_rng, config.bootstrap_variant
    )
    holdout = None
    if config.calibrate_dcl:
        holdout = draw_bootstrap_outcomes(
            stream, config.delta, config.bootstrap_paths, boot_rng, config.bootstrap_variant
        )
    spending = spending_schedule(
        config.alpha, config.n_batches, config.batch_size, config.horizon
    )

    alarms: dict[str, int | None] = {}
    errors: dict[str, str] = {}
    for label in config.monitors:
        spec = build_monitor_spec(label, config, calibration)
        try:
            chart = stream_chart(spec, stream)
            paths = bootstrap_charts(spec, stream, outcomes)
            if holdout is not None:
                schedule = compute_calibrated_dcl(
                    paths,
                    bootstrap_charts(spec, stream, holdout),
                    spending,
                    config.alpha,
                    config.horizon,
                    config.batch_size,
                )
            else:
                schedule = compute_dcl(
                    paths, spending, config.alpha, config.horizon, config.batch_size
                )
            alarms[label] = alarm_check(chart, schedule)
        except PositivityViolationError as exc:
            errors[label] = str(exc)
    return ReplicateResult(alarms=alarms, errors=errors)


def estimate_power(alarm_times, t: int) -> float:
    """Proportion of replicates with an alarm at or before batch t."""
    times = list(alarm_times)
    if not times:
        raise ValueError("need at least one replicate")
    return sum(1 for a in times if a is not None and a <= t) / len(times)


@dataclass
class PowerCurve:
    """Proportion of replicates alarmed at or before each batch, with the
    binomial Monte-Carlo standard error."""

    monitor: str
    power: np.ndarray
    mc_se: np.ndarray
    n_replicates: int

    def __post_init__(self):
        if np.any(self.power < 0) or np.any(self.power > 1):
            raise ValueError("power values must lie in [0, 1]")
        if np.any(np.diff(self.power) < 0):
            raise ValueError("power curves must be nondecreasing in time")


def power_curve(monitor: str, alarm_times, n_batches: int) -> PowerCurve:
    times = list(alarm_times)
    r = len(times)
    counts = np.zeros(n_batches)
    for a in times:
        if a is not None:
            counts[a - 1 :] += 1
    power = counts / r
    mc_se = np.sqrt(power * (1.0 - power) / r)
    return PowerCurve(monitor=monitor, power=power, mc_se=mc_se, n_replicates=r)


def median_delay(alarm_times, change_batch: int) -> float:
    """Median over replicates of (alarm batch - change batch); non-alarming
    replicates count as infinite delay."""
    delays = [float("inf") if a is None else float(a - change_batch) for a in alarm_times]
    return float(np.median(delays))


@dataclass(frozen=True)
class GridDefaults:
    """Shared knobs for building the default experiment grid."""

    master_seed: int = 0
    horizon: int = DEFAULT_HORIZON
    batch_size: int = DEFAULT_BATCH_SIZE
    delta: float = DEFAULT_DELTA
    alpha: float = DEFAULT_ALPHA
    bootstrap_paths: int = DEFAULT_BOOTSTRAP_PATHS
    replicates: int = DEFAULT_REPLICATES
    null_replicates: int = DEFAULT_NULL_REPLICATES
    calibration_n: int = DEFAULT_CALIBRATION_N
    pre_monitoring_n: int = DEFAULT_PRE_MONITORING_N
    model: str = "oracle"
    use_fitted_propensity: bool = False
    bootstrap_variant: str = SIGN_ADJUSTED
    change_time: int = 500
    ramp_length: int = 2000


def _cell_configs(defaults: GridDefaults, cell_name: str, **overrides) -> list[ScenarioConfig]:
    """Both settings' scenarios for one grid cell."""
    shared = dict(
        cell_name=cell_name,
        horizon=defaults.horizon,
        batch_size=defaults.batch_size,
        master_seed=defaults.master_seed,
        delta=defaults.delta,
        alpha=defaults.alpha,
        bootstrap_paths=defaults.bootstrap_paths,
        bootstrap_variant=defaults.bootstrap_variant,
        pre_monitoring_n=defaults.pre_monitoring_n,
        calibration_n=defaults.calibration_n,
        model=defaults.model,
        use_fitted_propensity=defaults.use_fitted_propensity,
        replicates=defaults.replicates,
    )
    shared.update(overrides)
    return [
        ScenarioConfig(setting=setting, monitors=DEFAULT_MONITORS[setting], **shared)
        for setting in SETTINGS
    ]


def shift_cells(defaults: GridDefaults, shape: str) -> list[ScenarioConfig]:
    """The 12-cell shift grid (2 arms x 3 subgroups x 2 magnitudes) for one shape."""
    configs: list[ScenarioConfig] = []
    for arm in (0, 1):
        for subgroup_name in ("all", "known", "misspec"):
            for magnitude in (0.10, 0.20):
                cell = f"{shape}_a{arm}_{subgroup_name}_c{int(round(magnitude * 100))}"
                shift = ShiftScenario(
                    arm=arm,
                    subgroup=SHIFT_SUBGROUPS[subgroup_name](),
                    magnitude=magnitude,
                    shape=shape,
                    change_time=defaults.change_time,
                    ramp_length=defaults.ramp_length,
                )
                configs.extend(_cell_configs(defaults, cell, shift=shift))
    return configs


def null_cell(defaults: GridDefaults) -> list[ScenarioConfig]:
    """Type-I cell: no shift, outcomes drawn at the calibration-null boundary so
    every monitor's control limit is evaluated exactly at its own null."""
    return _cell_configs(
        defaults,
        "null",
        shift=None,
        outcome_law="null-boundary",
        replicates=defaults.null_replicates,
    )


def default_grid(defaults: GridDefaults, which: str = "full") -> list[ScenarioConfig]:
    if which == "sudden":
        return shift_cells(defaults, "sudden")
    if which == "gradual":
        return shift_cells(defaults, "gradual")
    if which == "null":
        return null_cell(defaults)
    if which == "full":
        return (
            shift_cells(defaults, "sudden")
            + shift_cells(defaults, "gradual")
            + null_cell(defaults)
        )
    raise ValueError(f"unknown grid {which!r}")


@dataclass
class CellResult:
    """Aggregated outcomes for one grid cell across both settings."""

    cell_name: str
    n_batches: int
    batch_size: int
    change_batch: int
    change_time: int | None
    curves: dict  # monitor -> PowerCurve
    median_delays: dict  # monitor -> float (batches)
    alarms: dict  # monitor -> list of alarm batches / None
    error_counts: dict  # monitor -> replicates lost to positivity errors


def _replicate_task(args):
    config, calibration, rep = args
    return run_replicate(config, rep, calibration)


def _monitor_order(labels) -> list[str]:
    return [m for m in ALL_LABELS if m in labels]


def run_cell(
    configs: list[ScenarioConfig], calibration: CalibrationBundle, pool=None
) -> CellResult:
    """Run every replicate of every setting belonging to one cell and aggregate."""
    names = {c.cell_name for c in configs}
    if len(names) != 1:
        raise ValueError(f"run_cell got configs from multiple cells: {sorted(names)}")
    alarms: dict[str, list] = {}
    error_counts: dict[str, int] = {}
    for config in configs:
        tasks = [(config, calibration, rep) for rep in range(config.replicates)]
        if pool is None:
            results = [_replicate_task(t) for t in tasks]
        else:
            chunk = max(1, config.replicates // 32)
            results = pool.map(_replicate_task, tasks, chunksize=chunk)
        for label in config.monitors:
            alarms.setdefault(label, [])
            error_counts.setdefault(label, 0)
            for res in results:
                if label in res.errors:
                    error_counts[label] += 1
                else:
                    alarms[label].append(res.alarms[label])

    first = configs[0]
    curves = {}
    delays = {}
    for label in _monitor_order(alarms):
        if not alarms[label]:
            continue
        curves[label] = power_curve(label, alarms[label], first.n_batches)
        delays[label] = median_delay(alarms[label], first.change_batch)
    return CellResult(
        cell_name=first.cell_name,
        n_batches=first.n_batches,
        batch_size=first.batch_size,
        change_batch=first.change_batch,
        change_time=first.shift.change_time if first.shift else None,
        curves=curves,
        median_delays=delays,
        alarms={m: alarms[m] for m in _monitor_order(alarms)},
        error_counts=error_counts,
    )


def group_cells(configs: list[ScenarioConfig]) -> list[list[ScenarioConfig]]:
    """Group scenarios by cell name, preserving first-appearance order."""
    order: list[str] = []
    grouped: dict[str, list[ScenarioConfig]] = {}
    for c in configs:
        if c.cell_name not in grouped:
            grouped[c.cell_name] = []
            order.append(c.cell_name)
        grouped[c.cell_name].append(c)
    return [grouped[name] for name in order]


def run_grid(
    configs: list[ScenarioConfig],
    out_dir,
    workers: int = 1,
    make_plots: bool = False,
    log=None,
) -> list[CellResult]:
    """Execute a list of scenarios grouped into cells; write per-cell power
    CSVs, a summary table, and optional SVG plots under ``out_dir``.

    Per-cell failures are isolated: a failing cell is reported in failures.csv
    and does not stop the rest of the grid.
    """
    from . import report  # local import to keep harness importable without I/O helpers

    out_dir = report.ensure_dir(out_dir)
    if not configs:
        report.write_summary_csv(out_dir / "summary.csv", [])
        return []
    calibration = calibrate(configs[0])

    results: list[CellResult] = []
    failures: list[tuple[str, str]] = []
    pool = None
    try:
        if workers > 1:
            import multiprocessing

            pool = multiprocessing.get_context("fork").Pool(workers)
        for cell_configs in group_cells(configs):
            name = cell_configs[0].cell_name
            try:
                result = run_cell(cell_configs, calibration, pool)
            except Exception as exc:  # isolate per-cell failures
                failures.append((name, f"{type(exc).__name__}: {exc}"))
                continue
            results.append(result)
            report.write_power_csv(out_dir / f"power_{name}.csv", result)
            if make_plots:
                report.write_power_svg(out_dir / f"power_{name}.svg", result)
            if log is not None:
                log(f"cell {name}: done")
    finally:
        if pool is not None:
            pool.close()
            pool.join()

    report.write_summary_csv(out_dir / "summary.csv", results)
    if failures:
        report.write_failures_csv(out_dir / "failures.csv", failures)
    return results
