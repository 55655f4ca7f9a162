import json
import math

import numpy as np
import pytest

from causalmonitor.cli import main as cli_main
from causalmonitor.cli import parse_run_config
from causalmonitor.exceptions import DegenerateCellError
from causalmonitor.harness import (
    DEFAULT_MONITORS,
    GridDefaults,
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
from causalmonitor.risk_model import RiskModel, oracle_model
from causalmonitor.simulator import (
    ShiftScenario,
    monitoring_subgroups,
    subgroup_all,
    subgroup_known,
)

SMALL = GridDefaults(
    master_seed=202608,
    horizon=1000,
    batch_size=50,
    replicates=4,
    null_replicates=4,
    bootstrap_paths=80,
    calibration_n=30_000,
    change_time=500,
)


def small_config(setting="observational", **kw):
    args = dict(
        setting=setting,
        monitors=DEFAULT_MONITORS[setting],
        cell_name="test",
        shift=None,
        horizon=SMALL.horizon,
        batch_size=SMALL.batch_size,
        replicates=SMALL.replicates,
        master_seed=SMALL.master_seed,
        bootstrap_paths=SMALL.bootstrap_paths,
        calibration_n=SMALL.calibration_n,
    )
    args.update(kw)
    return ScenarioConfig(**args)


@pytest.fixture(scope="module")
def small_calibration():
    return calibrate(small_config())


class TestScenarioValidation:
    def test_interventional_monitor_refuses_observational_setting(self):
        for label in ("1I", "2I", "3I"):
            with pytest.raises(ValueError, match="refuse"):
                small_config(setting="observational", monitors=(label,))

    def test_observational_monitors_allowed_anywhere(self):
        small_config(setting="interventional", monitors=("3O",))

    def test_pre_monitoring_required_for_estimated_ipw(self):
        with pytest.raises(ValueError, match="pre-monitoring"):
            small_config(monitors=("1O",), pre_monitoring_n=0)

    def test_horizon_batch_divisibility(self):
        with pytest.raises(ValueError, match="multiple"):
            small_config(horizon=1030)

    def test_unknown_monitor(self):
        with pytest.raises(ValueError, match="unknown monitors"):
            small_config(monitors=("5X",))


class TestCalibrateThresholds:
    def test_margin_is_exactly_two_percent(self, small_calibration):
        # recompute the standalone predictive values with the same seed
        c1, c2 = calibrate_thresholds(
            small_calibration.model,
            SMALL.calibration_n,
            np.random.SeedSequence([SMALL.master_seed, 101]),
            monitoring_subgroups(),
        )
        assert c1 == small_calibration.thresholds_c1
        assert c2 == small_calibration.thresholds_c2
        for c in c1.values():
            assert 0.5 < c < 1.0

    def test_calibration_identity_for_oracle_model(self):
        # perfectly calibrated model: standalone PPV equals E[prediction | positive call]
        from causalmonitor.propensity import PropensityModel
        from causalmonitor.simulator import generate_stream

        model = oracle_model()
        n = 100_000
        c1, _ = calibrate_thresholds(model, n, np.random.SeedSequence(7), ())
        stream = generate_stream(model, PropensityModel(beta=0.0), n, seed=np.random.SeedSequence(8))
        for a in (0, 1):
            f = model.predict_risk(stream.x, a)
            yhat = model.binarize(stream.x, a)
            ppv_pred = float(f[yhat == 1].mean())
            n_cell = int((yhat == 1).sum())
            se = math.sqrt(ppv_pred * (1 - ppv_pred) / n_cell)
            assert abs((c1[(a, 1)] + 0.02) - ppv_pred) < 3 * se + 0.01

    def test_all_subgroup_thresholds_match_c1(self, small_calibration):
        for a in (0, 1):
            for v in (0, 1):
                assert small_calibration.thresholds_c2[(a, v, "all")] == (
                    small_calibration.thresholds_c1[(a, v)]
                )

    def test_degenerate_cell_raises(self):
        # a model that never predicts positive for arm 0
        model = RiskModel(
            intercept=-30.0, x_coef=np.zeros(10), a_coef=60.0, xa_coef=np.zeros(10)
        )
        with pytest.raises(DegenerateCellError):
            calibrate_thresholds(model, 1000, np.random.SeedSequence(9), ())


class TestRunReplicate:
    def test_deterministic(self, small_calibration):
        cfg = small_config()
        r1 = run_replicate(cfg, 3, small_calibration)
        r2 = run_replicate(cfg, 3, small_calibration)
        assert r1.alarms == r2.alarms
        assert r1.errors == {}

    def test_replicates_differ(self, small_calibration):
        cfg = small_config(
            shift=ShiftScenario(arm=0, subgroup=subgroup_all(), magnitude=0.2, change_time=500),
            outcome_law="dgp",
        )
        results = [run_replicate(cfg, rep, small_calibration) for rep in range(4)]
        streams = [tuple(sorted(r.alarms.items())) for r in results]
        assert len(set(streams)) > 1

    def test_zero_magnitude_shift_matches_null(self, small_calibration):
        null_cfg = small_config()
        degenerate = small_config(
            shift=ShiftScenario(arm=1, subgroup=subgroup_known(), magnitude=0.0, change_time=500)
        )
        for rep in range(3):
            assert (
                run_replicate(null_cfg, rep, small_calibration).alarms
                == run_replicate(degenerate, rep, small_calibration).alarms
            )

    def test_interventional_monitors_run(self, small_calibration):
        cfg = small_config(setting="interventional")
        res = run_replicate(cfg, 0, small_calibration)
        assert set(res.alarms) == {"1I", "2I", "3I"}


class TestPowerAggregation:
    def test_estimate_power_example(self):
        assert estimate_power([2, None, 6], 4) == pytest.approx(1 / 3)

    def test_estimate_power_beyond_horizon(self):
        assert estimate_power([2, None, 6], 100) == pytest.approx(2 / 3)

    def test_estimate_power_no_alarms(self):
        assert estimate_power([None, None], 5) == 0.0

    def test_power_curve_monotone_and_bounded(self):
        curve = power_curve("1N", [1, 3, None, 3, 7], 8)
        assert curve.power[0] == pytest.approx(0.2)
        assert curve.power[-1] == pytest.approx(0.8)
        assert np.all(np.diff(curve.power) >= 0)
        assert np.all((curve.power >= 0) & (curve.power <= 1))
        assert curve.mc_se[0] == pytest.approx(math.sqrt(0.2 * 0.8 / 5))

    def test_median_delay(self):
        assert median_delay([12, 14, None], 10) == 4.0
        assert median_delay([None, None, 12], 10) == math.inf
        assert median_delay([11], 10) == 1.0


class TestDefaultGrid:
    def test_full_grid_has_25_cells(self):
        configs = default_grid(SMALL, "full")
        names = {c.cell_name for c in configs}
        assert len(names) == 25
        assert len(configs) == 50  # both settings per cell
        assert "null" in names
        assert sum(1 for n in names if n.startswith("sudden")) == 12
        assert sum(1 for n in names if n.startswith("gradual")) == 12

    def test_null_cell_uses_boundary_law(self):
        configs = default_grid(SMALL, "null")
        assert all(c.outcome_law == "null-boundary" for c in configs)
        assert all(c.shift is None for c in configs)

    def test_shift_cells_cover_grid(self):
        configs = default_grid(SMALL, "sudden")
        arms = {c.shift.arm for c in configs}
        mags = {c.shift.magnitude for c in configs}
        subs = {c.shift.subgroup.name for c in configs}
        assert arms == {0, 1} and mags == {0.1, 0.2} and subs == {"all", "known", "misspec"}


class TestRunGrid:
    def test_empty_config_list(self, tmp_path):
        results = run_grid([], tmp_path)
        assert results == []
        assert (tmp_path / "summary.csv").read_text().startswith("cell,monitor")

    def test_small_grid_outputs(self, tmp_path):
        configs = [
            small_config(cell_name="cellA"),
            small_config(cell_name="cellA", setting="interventional",
                         monitors=DEFAULT_MONITORS["interventional"]),
            small_config(
                cell_name="cellB",
                shift=ShiftScenario(arm=0, subgroup=subgroup_all(), magnitude=0.2, change_time=500),
            ),
        ]
        results = run_grid(configs, tmp_path, make_plots=True)
        assert [r.cell_name for r in results] == ["cellA", "cellB"]
        power_a = (tmp_path / "power_cellA.csv").read_text().splitlines()
        assert power_a[0] == "cell,monitor,batch,t_end_of_batch,power,mc_se"
        # 7 monitors x 20 batches for the two-setting cell
        assert len(power_a) == 1 + 7 * 20
        assert (tmp_path / "power_cellB.csv").exists()
        assert (tmp_path / "power_cellA.svg").exists()
        summary = (tmp_path / "summary.csv").read_text().splitlines()
        assert summary[0] == "cell,monitor,type_i_or_power_final,median_delay_batches"
        assert len(summary) == 1 + 7 + 4

    def test_power_columns_monotone(self, tmp_path):
        configs = [small_config(cell_name="cellC")]
        run_grid(configs, tmp_path)
        rows = (tmp_path / "power_cellC.csv").read_text().splitlines()[1:]
        by_monitor = {}
        for row in rows:
            cell, monitor, batch, t_end, power, mc_se = row.split(",")
            by_monitor.setdefault(monitor, []).append(float(power))
        for series in by_monitor.values():
            assert all(b >= a for a, b in zip(series, series[1:]))


class TestWorkerDeterminism:
    def test_worker_count_does_not_change_bytes(self, tmp_path):
        configs = [
            small_config(cell_name="det", replicates=6),
            small_config(
                cell_name="det",
                setting="interventional",
                monitors=DEFAULT_MONITORS["interventional"],
                replicates=6,
            ),
        ]
        run_grid(configs, tmp_path / "w1", workers=1)
        run_grid(configs, tmp_path / "w2", workers=2)
        for name in ("power_det.csv", "summary.csv"):
            assert (tmp_path / "w1" / name).read_bytes() == (tmp_path / "w2" / name).read_bytes()


class TestCli:
    def test_parse_run_config_defaults(self):
        defaults, configs = parse_run_config({"master_seed": 5, "grid": "null"})
        assert defaults.master_seed == 5
        assert len(configs) == 2

    def test_parse_run_config_rejects_unknown_keys(self):
        with pytest.raises(ValueError, match="unknown config keys"):
            parse_run_config({"grid": "null", "typo_key": 1})

    def test_parse_explicit_cells(self):
        doc = {
            "master_seed": 1,
            "cells": [
                {
                    "name": "custom",
                    "setting": "observational",
                    "shift": {"arm": 1, "subgroup": "known", "magnitude": 0.1},
                    "replicates": 3,
                }
            ],
        }
        defaults, configs = parse_run_config(doc)
        (cfg,) = configs
        assert cfg.cell_name == "custom"
        assert cfg.shift.subgroup.name == "known"
        assert cfg.replicates == 3

    def test_cli_round_trip(self, tmp_path, capsys):
        config = {
            "master_seed": SMALL.master_seed,
            "horizon": SMALL.horizon,
            "batch_size": SMALL.batch_size,
            "replicates": 3,
            "bootstrap_paths": SMALL.bootstrap_paths,
            "calibration_n": SMALL.calibration_n,
            "grid": "none",
            "cells": [{"name": "cli_cell", "setting": "observational", "shift": None}],
        }
        cfg_path = tmp_path / "config.json"
        cfg_path.write_text(json.dumps(config))
        out_dir = tmp_path / "results"
        assert cli_main(["run", "--config", str(cfg_path), "--out", str(out_dir)]) == 0
        assert (out_dir / "power_cli_cell.csv").exists()
        assert cli_main(["report", "--in", str(out_dir)]) == 0
        out = capsys.readouterr().out
        assert "cli_cell" in out

    def test_cli_calibrate(self, tmp_path):
        out = tmp_path / "calibration.json"
        assert (
            cli_main(
                [
                    "calibrate",
                    "--out",
                    str(out),
                    "--master-seed",
                    "3",
                    "--calibration-n",
                    "5000",
                ]
            )
            == 0
        )
        doc = json.loads(out.read_text())
        assert set(doc["thresholds_c1"]) == {"0,0", "0,1", "1,0", "1,1"}
        assert doc["model"]["threshold_b"] == 0.5
        assert set(doc["weights_c3"]) == {"observational", "interventional"}

    def test_cli_report_missing_dir(self, tmp_path, capsys):
        assert cli_main(["report", "--in", str(tmp_path)]) == 1
