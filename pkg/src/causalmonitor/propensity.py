"""Treatment-assignment behavior and propensity estimation.

Assignment follows a single-coefficient logistic model on the predicted-risk
difference between arms.  The same functional form is used for the oracle
(generating) model and for the model estimated from a pre-monitoring phase.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import ConvergenceError, DegenerateDataError
from .risk_model import sigmoid

OBSERVATIONAL_BETA = -6.0
INTERVENTIONAL_BETA = -2.0
INTERVENTIONAL_EPSILON = 0.01
DEFAULT_PRE_MONITORING_N = 5000


@dataclass(frozen=True)
class PropensityModel:
    """P(A=1 | predictions) = sigmoid(beta * (f1 - f0)), optionally clipped away
    from {0, 1} by an epsilon floor.  Immutable and shareable across workers."""

    beta: float
    kind: str = "oracle"
    epsilon_floor: float = 0.0

    def __post_init__(self):
        if self.kind not in ("oracle", "estimated"):
            raise ValueError(f"kind must be oracle or estimated, got {self.kind!r}")
        if not 0.0 <= self.epsilon_floor < 0.5:
            raise ValueError("epsilon_floor must be in [0, 0.5)")

    def score(self, f0, f1, z=None):
        """Probability of A=1.  ``z`` (non-patient context) is accepted for
        interface compatibility and ignored."""
        f0 = np.asarray(f0, dtype=float)
        f1 = np.asarray(f1, dtype=float)
        if np.any(f0 < 0) or np.any(f0 > 1) or np.any(f1 < 0) or np.any(f1 > 1):
            raise ValueError("predicted risks must lie in [0, 1]")
        p = sigmoid(self.beta * (f1 - f0))
        if self.epsilon_floor > 0.0:
            p = np.clip(p, self.epsilon_floor, 1.0 - self.epsilon_floor)
            if np.ndim(p) == 0:
                p = float(p)
        return p

    def sample_treatment(self, f0, f1, rng: np.random.Generator, z=None):
        """Bernoulli draw at the propensity score; returns (a, probability used)."""
        p = self.score(f0, f1, z)
        a = (rng.random(np.shape(p)) < p).astype(np.int8)
        if np.ndim(p) == 0:
            return int(a), float(p)
        return a, p

    def save(self, path) -> None:
        with open(path, "w", encoding="ascii") as fh:
            fh.write(f"beta {self.beta!r}\n")
            fh.write(f"kind {self.kind}\n")
            fh.write(f"epsilon_floor {self.epsilon_floor!r}\n")

    @classmethod
    def load(cls, path) -> "PropensityModel":
        values: dict[str, str] = {}
        with open(path, encoding="ascii") as fh:
            for line in fh:
                line = line.strip()
                if line:
                    name, raw = line.split(None, 1)
                    values[name] = raw
        return cls(
            beta=float(values["beta"]),
            kind=values["kind"],
            epsilon_floor=float(values["epsilon_floor"]),
        )


def observational_propensity() -> PropensityModel:
    """Clinician behavior: closely follows the model's recommendation."""
    return PropensityModel(beta=OBSERVATIONAL_BETA, kind="oracle", epsilon_floor=0.0)


def interventional_propensity() -> PropensityModel:
    """Randomization weights favoring the recommended arm, with a positivity floor."""
    return PropensityModel(
        beta=INTERVENTIONAL_BETA, kind="oracle", epsilon_floor=INTERVENTIONAL_EPSILON
    )


def fit_propensity(pre_monitoring, max_iter: int = 50, tol: float = 1e-8) -> PropensityModel:
    """Maximum-likelihood fit of the single coefficient from pre-monitoring records.

    Accepts an ObservationStream or any iterable of ObservationRecord.
    """
    if hasattr(pre_monitoring, "f0"):
        f0 = np.asarray(pre_monitoring.f0, dtype=float)
        f1 = np.asarray(pre_monitoring.f1, dtype=float)
        a = np.asarray(pre_monitoring.a, dtype=float)
    else:
        records = list(pre_monitoring)
        f0 = np.array([r.f0 for r in records])
        f1 = np.array([r.f1 for r in records])
        a = np.array([float(r.a) for r in records])
    if len(np.unique(a)) < 2:
        raise DegenerateDataError("pre-monitoring data contains a single treatment value")
    d = f1 - f0
    if np.allclose(d, 0.0):
        raise DegenerateDataError("predicted-risk differences are all zero; beta not identified")

    beta = 0.0
    for _ in range(max_iter):
        mu = sigmoid(beta * d)
        grad = float(np.sum(d * (a - mu)))
        info = float(np.sum(d * d * mu * (1.0 - mu)))
        step = grad / info
        beta += step
        if abs(step) < tol:
            return PropensityModel(beta=beta, kind="estimated", epsilon_floor=0.0)
    raise ConvergenceError(
        f"propensity fit did not converge in {max_iter} iterations", last_iterate=beta
    )


def fit_standard_error(model: PropensityModel, f0, f1) -> float:
    """Observed-information standard error for the fitted coefficient."""
    d = np.asarray(f1, dtype=float) - np.asarray(f0, dtype=float)
    mu = sigmoid(model.beta * d)
    info = float(np.sum(d * d * mu * (1.0 - mu)))
    return 1.0 / np.sqrt(info)
