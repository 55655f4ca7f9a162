import math

import numpy as np
import pytest

from causalmonitor.exceptions import DegenerateDataError
from causalmonitor.risk_model import (
    FitConfig,
    RiskModel,
    fit_logistic,
    oracle_model,
    sigmoid,
)


def logistic(z: float) -> float:
    # independent reference for expected values
    return 1.0 / (1.0 + math.exp(-z))


class TestPredictRisk:
    def test_zero_covariates_control_arm(self):
        assert oracle_model().predict_risk(np.zeros(10), 0) == 0.5

    def test_x1_active_term(self):
        x = np.zeros(10)
        x[0] = 2.0
        # linear predictor -0.5 * 2 = -1
        assert oracle_model().predict_risk(x, 0) == pytest.approx(logistic(-1.0), abs=1e-12)

    def test_x2_with_treatment(self):
        x = np.zeros(10)
        x[1] = 1.0
        # -1 + 0.5 + 2 = 1.5
        assert oracle_model().predict_risk(x, 1) == pytest.approx(logistic(1.5), abs=1e-12)

    def test_vectorized_matches_scalar(self):
        rng = np.random.default_rng(0)
        model = oracle_model()
        x = rng.normal(0, 2, size=(50, 10))
        a = rng.integers(0, 2, size=50)
        batch = model.predict_risk(x, a)
        for i in range(50):
            assert batch[i] == pytest.approx(model.predict_risk(x[i], int(a[i])), abs=1e-14)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="dimension"):
            oracle_model().predict_risk(np.zeros(7), 0)

    def test_risk_in_unit_interval(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            model = RiskModel(
                intercept=rng.normal(scale=3),
                x_coef=rng.normal(scale=3, size=4),
                a_coef=rng.normal(scale=3),
                xa_coef=rng.normal(scale=3, size=4),
            )
            risk = model.predict_risk(rng.normal(scale=5, size=4), int(rng.integers(2)))
            assert 0.0 <= risk <= 1.0


class TestBinarize:
    def test_above_threshold(self):
        model = RiskModel(
            intercept=math.log(0.7 / 0.3), x_coef=np.zeros(2), a_coef=0.0, xa_coef=np.zeros(2)
        )
        assert model.binarize(np.zeros(2), 0) == 1

    def test_boundary_is_negative(self):
        # risk exactly 0.5 with b = 0.5: strict inequality keeps it 0
        model = RiskModel(intercept=0.0, x_coef=np.zeros(2), a_coef=0.0, xa_coef=np.zeros(2))
        assert model.predict_risk(np.zeros(2), 0) == 0.5
        assert model.binarize(np.zeros(2), 0) == 0

    def test_below_threshold(self):
        model = RiskModel(
            intercept=math.log(0.2 / 0.8), x_coef=np.zeros(2), a_coef=0.0, xa_coef=np.zeros(2)
        )
        assert model.binarize(np.zeros(2), 0) == 0

    def test_matches_risk_comparison_random(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            model = RiskModel(
                intercept=rng.normal(),
                x_coef=rng.normal(size=3),
                a_coef=rng.normal(),
                xa_coef=rng.normal(size=3),
                threshold=float(rng.uniform(0.05, 0.95)),
            )
            x = rng.normal(scale=2, size=3)
            a = int(rng.integers(2))
            assert model.binarize(x, a) == int(model.predict_risk(x, a) > model.threshold)


class TestPredictedSign:
    def test_high_risk(self):
        model = RiskModel(
            intercept=math.log(0.8 / 0.2), x_coef=np.zeros(2), a_coef=0.0, xa_coef=np.zeros(2)
        )
        assert model.predicted_sign(np.zeros(2), 0) == 1

    def test_low_risk(self):
        model = RiskModel(
            intercept=math.log(0.3 / 0.7), x_coef=np.zeros(2), a_coef=0.0, xa_coef=np.zeros(2)
        )
        assert model.predicted_sign(np.zeros(2), 0) == -1

    def test_tie_maps_positive(self):
        model = RiskModel(intercept=0.0, x_coef=np.zeros(2), a_coef=0.0, xa_coef=np.zeros(2))
        assert model.predicted_sign(np.zeros(2), 0) == 1

    def test_sign_iff_risk_at_least_half(self):
        rng = np.random.default_rng(3)
        model = oracle_model()
        x = rng.normal(0, 2, size=(500, 10))
        signs = model.predicted_sign(x, 1)
        risks = model.predict_risk(x, 1)
        assert np.array_equal(signs == 1, risks >= 0.5)


class TestFitLogistic:
    def test_recovers_generating_coefficients(self):
        rng = np.random.default_rng(7)
        n = 50_000
        x = rng.normal(0, 2, size=(n, 10))
        a = rng.integers(0, 2, size=n).astype(float)
        truth = oracle_model()
        y = (rng.random(n) < truth.predict_risk(x, a)).astype(float)
        fitted = fit_logistic(x, a, y)
        assert fitted.intercept == pytest.approx(0.0, abs=0.1)
        assert fitted.x_coef[0] == pytest.approx(-0.5, abs=0.1)
        assert fitted.x_coef[1] == pytest.approx(-1.0, abs=0.1)
        assert fitted.a_coef == pytest.approx(0.5, abs=0.1)
        assert fitted.xa_coef[0] == pytest.approx(1.0, abs=0.1)
        assert fitted.xa_coef[1] == pytest.approx(2.0, abs=0.1)
        np.testing.assert_allclose(fitted.x_coef[2:], 0.0, atol=0.1)
        np.testing.assert_allclose(fitted.xa_coef[2:], 0.0, atol=0.1)

    def test_single_class_raises(self):
        rng = np.random.default_rng(8)
        x = rng.normal(size=(40, 2))
        a = rng.integers(0, 2, size=40)
        with pytest.raises(DegenerateDataError):
            fit_logistic(x, a, np.zeros(40))

    def test_symmetric_data_zero_intercept(self):
        # balanced label noise at symmetric feature values
        x = np.array([[1.0]] * 100 + [[-1.0]] * 100)
        a = np.zeros(200)
        y = np.array([1.0] * 60 + [0.0] * 40 + [0.0] * 60 + [1.0] * 40)
        fitted = fit_logistic(x, a, y)
        assert abs(fitted.intercept) < 1e-6
        assert fitted.x_coef[0] > 0

    def test_too_few_rows(self):
        with pytest.raises(ValueError, match="observations"):
            fit_logistic(np.zeros((3, 2)), np.zeros(3), np.array([0.0, 1.0, 0.0]))

    def test_tolerance_config_respected(self):
        rng = np.random.default_rng(9)
        n = 2000
        x = rng.normal(size=(n, 2))
        a = rng.integers(0, 2, size=n).astype(float)
        y = (rng.random(n) < sigmoid(x[:, 0] - 0.5 * a)).astype(float)
        loose = fit_logistic(x, a, y, FitConfig(tol=1e-4))
        tight = fit_logistic(x, a, y, FitConfig(tol=1e-10))
        assert loose.x_coef[0] == pytest.approx(tight.x_coef[0], abs=1e-3)


class TestSaveLoad:
    def test_round_trip_exact(self, tmp_path):
        rng = np.random.default_rng(11)
        model = RiskModel(
            intercept=rng.normal(),
            x_coef=rng.normal(size=10),
            a_coef=rng.normal(),
            xa_coef=rng.normal(size=10),
            threshold=0.37,
        )
        path = tmp_path / "model.txt"
        model.save(path)
        loaded = RiskModel.load(path)
        assert loaded.intercept == model.intercept
        assert loaded.a_coef == model.a_coef
        assert loaded.threshold == model.threshold
        assert np.array_equal(loaded.x_coef, model.x_coef)
        assert np.array_equal(loaded.xa_coef, model.xa_coef)

    def test_missing_field_rejected(self, tmp_path):
        path = tmp_path / "model.txt"
        path.write_text("threshold_b 0.5\nintercept 0.0\nx1 1.0\n")
        with pytest.raises(ValueError, match="missing"):
            RiskModel.load(path)


def test_model_is_immutable():
    model = oracle_model()
    with pytest.raises(Exception):
        model.intercept = 1.0
    with pytest.raises(ValueError):
        model.x_coef[0] = 99.0
