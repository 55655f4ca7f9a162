"""Command-line interface: calibrate, run, report."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .harness import (
    DEFAULT_MONITORS,
    CalibrationBundle,
    GridDefaults,
    ScenarioConfig,
    calibrate,
    default_grid,
    run_grid,
)
from .report import ensure_dir, format_summary_table, read_summary_csv
from .simulator import SHIFT_SUBGROUPS, ShiftScenario

_DEFAULTS_FIELDS = (
    "master_seed",
    "horizon",
    "batch_size",
    "delta",
    "alpha",
    "bootstrap_paths",
    "replicates",
    "null_replicates",
    "calibration_n",
    "pre_monitoring_n",
    "model",
    "use_fitted_propensity",
    "bootstrap_variant",
    "change_time",
    "ramp_length",
)


def parse_run_config(doc: dict) -> tuple[GridDefaults, list[ScenarioConfig]]:
    """Build the scenario list from a JSON document mirroring the config fields."""
    unknown = set(doc) - set(_DEFAULTS_FIELDS) - {"grid", "cells"}
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    defaults = GridDefaults(**{k: doc[k] for k in _DEFAULTS_FIELDS if k in doc})
    grid = doc.get("grid", "full" if "cells" not in doc else "none")
    configs: list[ScenarioConfig] = []
    if grid != "none":
        configs.extend(default_grid(defaults, grid))
    for cell in doc.get("cells", []):
        configs.extend(_cell_from_dict(cell, defaults))
    return defaults, configs


def _shift_from_dict(d: dict | None, defaults: GridDefaults) -> ShiftScenario | None:
    if d is None:
        return None
    subgroup_name = d["subgroup"]
    if subgroup_name not in SHIFT_SUBGROUPS:
        raise ValueError(f"unknown shift subgroup {subgroup_name!r}")
    return ShiftScenario(
        arm=d["arm"],
        subgroup=SHIFT_SUBGROUPS[subgroup_name](),
        magnitude=d["magnitude"],
        shape=d.get("shape", "sudden"),
        change_time=d.get("change_time", defaults.change_time),
        ramp_length=d.get("ramp_length", defaults.ramp_length),
    )


def _cell_from_dict(cell: dict, defaults: GridDefaults) -> list[ScenarioConfig]:
    settings = [cell["setting"]] if "setting" in cell else ["observational", "interventional"]
    shift = _shift_from_dict(cell.get("shift"), defaults)
    configs = []
    for setting in settings:
        configs.append(
            ScenarioConfig(
                setting=setting,
                monitors=tuple(cell.get("monitors", DEFAULT_MONITORS[setting])),
                cell_name=cell["name"],
                shift=shift,
                outcome_law=cell.get("outcome_law", "dgp"),
                horizon=defaults.horizon,
                batch_size=defaults.batch_size,
                replicates=cell.get("replicates", defaults.replicates),
                master_seed=defaults.master_seed,
                delta=defaults.delta,
                alpha=defaults.alpha,
                bootstrap_paths=defaults.bootstrap_paths,
                bootstrap_variant=defaults.bootstrap_variant,
                pre_monitoring_n=defaults.pre_monitoring_n,
                calibration_n=defaults.calibration_n,
                model=defaults.model,
                use_fitted_propensity=defaults.use_fitted_propensity,
            )
        )
    return configs


def calibration_to_dict(bundle: CalibrationBundle) -> dict:
    return {
        "model": {
            "intercept": bundle.model.intercept,
            "x_coef": list(map(float, bundle.model.x_coef)),
            "a_coef": bundle.model.a_coef,
            "xa_coef": list(map(float, bundle.model.xa_coef)),
            "threshold_b": bundle.model.threshold,
        },
        "thresholds_c1": {f"{a},{v}": c for (a, v), c in bundle.thresholds_c1.items()},
        "thresholds_c2": {f"{a},{v},{k}": c for (a, v, k), c in bundle.thresholds_c2.items()},
        "weights_c2": {
            setting: {f"{k},{v}": w for (k, v), w in weights.items()}
            for setting, weights in bundle.weights_c2.items()
        },
        "weights_c3": bundle.weights_c3,
        "fitted_propensity_beta": {
            setting: model.beta for setting, model in bundle.fitted_propensity.items()
        },
    }


def _cmd_calibrate(args) -> int:
    defaults = GridDefaults(
        master_seed=args.master_seed,
        calibration_n=args.calibration_n,
        pre_monitoring_n=args.pre_monitoring_n,
        model=args.model,
        use_fitted_propensity=args.fitted_propensity,
        delta=args.delta,
        batch_size=args.batch_size,
    )
    config = default_grid(defaults, "null")[0]
    bundle = calibrate(config)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(calibration_to_dict(bundle), indent=2, sort_keys=True) + "\n")
    print(f"wrote calibration to {out}")
    return 0


def _cmd_run(args) -> int:
    doc = json.loads(Path(args.config).read_text())
    _, configs = parse_run_config(doc)
    out_dir = ensure_dir(args.out)
    results = run_grid(
        configs,
        out_dir,
        workers=args.workers,
        make_plots=args.plots,
        log=lambda msg: print(msg, file=sys.stderr),
    )
    print(f"wrote {len(results)} cell result files and summary.csv to {out_dir}")
    return 0


def _cmd_report(args) -> int:
    summary = Path(args.in_dir) / "summary.csv"
    if not summary.exists():
        print(f"no summary.csv under {args.in_dir}", file=sys.stderr)
        return 1
    print(format_summary_table(read_summary_csv(summary)))
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="causalmonitor",
        description="Sequential monitoring experiments for risk models under treatment feedback",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_cal = sub.add_parser("calibrate", help="estimate thresholds and subgroup weights")
    p_cal.add_argument("--out", required=True, help="output JSON path")
    p_cal.add_argument("--master-seed", type=int, default=0)
    p_cal.add_argument("--calibration-n", type=int, default=GridDefaults.calibration_n)
    p_cal.add_argument("--pre-monitoring-n", type=int, default=GridDefaults.pre_monitoring_n)
    p_cal.add_argument("--model", choices=("oracle", "fitted"), default="oracle")
    p_cal.add_argument("--fitted-propensity", action="store_true")
    p_cal.add_argument("--delta", type=float, default=GridDefaults.delta)
    p_cal.add_argument("--batch-size", type=int, default=GridDefaults.batch_size)
    p_cal.set_defaults(func=_cmd_calibrate)

    p_run = sub.add_parser("run", help="run a grid of scenarios from a JSON config")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--out", required=True)
    p_run.add_argument("--workers", type=int, default=1)
    p_run.add_argument("--plots", action="store_true", help="also write SVG power plots")
    p_run.set_defaults(func=_cmd_run)

    p_rep = sub.add_parser("report", help="print the summary table from a results directory")
    p_rep.add_argument("--in", dest="in_dir", required=True)
    p_rep.set_defaults(func=_cmd_report)

    args = parser.parse_args(argv)
    return args.func(args)
