"""Counterfactual patient-stream simulator.

Each time step draws covariates, computes per-arm model predictions, assigns
treatment from a propensity model, and draws BOTH potential outcomes so that
downstream code can evaluate causal quantities exactly.  Outcome draws use an
RNG substream separate from treatment assignment, so resampling treatments
never perturbs the potential outcomes (conditional exchangeability holds by
construction and is structurally testable).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .exceptions import PositivityViolationError
from .risk_model import N_FEATURES, RiskModel, sigmoid

DEFAULT_CHANGE_TIME = 500
DEFAULT_RAMP_LENGTH = 2000


@dataclass(frozen=True)
class AxisBound:
    """One open/closed interval constraint on a covariate coordinate."""

    axis: int
    low: float = -math.inf
    high: float = math.inf
    closed_low: bool = False
    closed_high: bool = False


@dataclass(frozen=True)
class Subgroup:
    """A box (conjunction of per-coordinate bounds), optionally complemented.

    Membership is a pure predicate on the covariate vector.
    """

    name: str
    bounds: tuple[AxisBound, ...] = ()
    complement: bool = False

    def contains(self, x) -> bool:
        return bool(self.contains_many(np.asarray(x, dtype=float)[None, :])[0])

    def contains_many(self, x: np.ndarray) -> np.ndarray:
        inside = np.ones(x.shape[0], dtype=bool)
        for b in self.bounds:
            col = x[:, b.axis]
            inside &= (col >= b.low) if b.closed_low else (col > b.low)
            inside &= (col <= b.high) if b.closed_high else (col < b.high)
        return ~inside if self.complement else inside


def subgroup_all() -> Subgroup:
    return Subgroup(name="all")


def subgroup_known() -> Subgroup:
    return Subgroup(
        name="known",
        bounds=(AxisBound(axis=0, low=-1.0, high=2.0), AxisBound(axis=1, low=-2.5, high=2.5)),
    )


def subgroup_known_complement() -> Subgroup:
    base = subgroup_known()
    return Subgroup(name="complement", bounds=base.bounds, complement=True)


def subgroup_misspec() -> Subgroup:
    return Subgroup(
        name="misspec",
        bounds=(AxisBound(axis=0, low=-1.5, high=1.5), AxisBound(axis=1, low=-1.5, high=1.5)),
    )


def monitoring_subgroups() -> tuple[Subgroup, ...]:
    """Subgroups watched by the subgroup-aware monitors: everyone, the known
    subgroup, and its complement."""
    return (subgroup_all(), subgroup_known(), subgroup_known_complement())


SHIFT_SUBGROUPS = {"all": subgroup_all, "known": subgroup_known, "misspec": subgroup_misspec}


@dataclass(frozen=True)
class ShiftScenario:
    """A post-change perturbation of the outcome distribution.

    From ``change_time`` on, conditional outcome probabilities for the shifted
    arm inside the shifted subgroup are pulled toward 0.5 by the effective
    magnitude (constant for sudden shifts, linear ramp for gradual ones).
    """

    arm: int
    subgroup: Subgroup
    magnitude: float
    shape: str = "sudden"
    change_time: int = DEFAULT_CHANGE_TIME
    ramp_length: int = DEFAULT_RAMP_LENGTH

    def __post_init__(self):
        if self.arm not in (0, 1):
            raise ValueError("arm must be 0 or 1")
        # magnitude 0 is allowed as the degenerate no-op shift
        if not 0.0 <= self.magnitude <= 0.5:
            raise ValueError(f"magnitude must be in [0, 0.5], got {self.magnitude!r}")
        if self.shape not in ("sudden", "gradual"):
            raise ValueError(f"unknown shift shape {self.shape!r}")
        if self.shape == "gradual" and self.ramp_length < 1:
            raise ValueError("ramp_length must be >= 1 for gradual shifts")

    def effective_magnitude(self, t) -> np.ndarray:
        """Magnitude in force at time t (0 before the change time)."""
        t = np.asarray(t, dtype=float)
        after = t >= self.change_time
        if self.shape == "sudden":
            return np.where(after, self.magnitude, 0.0)
        ramp = np.minimum(1.0, (t - self.change_time) / self.ramp_length)
        return np.where(after, self.magnitude * ramp, 0.0)


def true_risk_pre(x, a):
    """Pre-change conditional adverse-event probability; only the first two
    covariates and their treatment interactions are active."""
    x = np.asarray(x, dtype=float)
    a = np.asarray(a, dtype=float)
    x1 = x[..., 0]
    x2 = x[..., 1]
    return sigmoid(-0.5 * x1 - x2 + 0.5 * a + x1 * a + 2.0 * x2 * a)


def apply_shift(p0, x, a, scenario: ShiftScenario | None, t):
    """Post-change probability: pull p0 toward 0.5 by the effective magnitude
    for records in the shifted (arm, subgroup) from the change time onward.
    p0 == 0.5 exactly is left unshifted; results are clamped to [0, 1]."""
    p0 = np.asarray(p0, dtype=float)
    scalar = p0.ndim == 0
    p0 = np.atleast_1d(p0)
    if scenario is None:
        return float(p0[0]) if scalar else p0
    x = np.atleast_2d(np.asarray(x, dtype=float))
    t = np.atleast_1d(np.asarray(t))
    c_eff = np.broadcast_to(scenario.effective_magnitude(t), p0.shape)
    hit = np.broadcast_to(scenario.subgroup.contains_many(x), p0.shape) & (a == scenario.arm)
    shifted = np.where(p0 > 0.5, p0 - c_eff, np.where(p0 < 0.5, p0 + c_eff, p0))
    out = np.clip(np.where(hit, shifted, p0), 0.0, 1.0)
    return float(out[0]) if scalar else out


def sample_covariates(rng: np.random.Generator, n: int = 1) -> np.ndarray:
    """Independent normal covariates, mean zero, variance 4, dimension 10."""
    return rng.normal(0.0, 2.0, size=(n, N_FEATURES))


@dataclass(frozen=True)
class ObservationRecord:
    """One patient-time unit, including both potential outcomes (simulator-only)."""

    t: int
    x: np.ndarray
    a: int
    y_obs: int
    y0: int
    y1: int
    f0: float
    f1: float
    propensity_used: float  # probability that A=1 given this record's inputs
    z: tuple = ()


@dataclass
class ObservationStream:
    """Columnar stream of observation records, ordered by time (the filtration).

    Implements the sequence protocol over ObservationRecord views.
    """

    t: np.ndarray
    x: np.ndarray
    a: np.ndarray
    y_obs: np.ndarray
    y0: np.ndarray
    y1: np.ndarray
    f0: np.ndarray
    f1: np.ndarray
    propensity_used: np.ndarray

    def __post_init__(self):
        n = len(self.t)
        for name in ("a", "y_obs", "y0", "y1", "f0", "f1", "propensity_used"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"column {name} has length != {n}")
        if self.x.shape != (n, N_FEATURES):
            raise ValueError(f"x must have shape ({n}, {N_FEATURES})")

    def __len__(self) -> int:
        return len(self.t)

    def __getitem__(self, i) -> ObservationRecord:
        if isinstance(i, slice):
            raise TypeError("slicing is not supported; index single records")
        return ObservationRecord(
            t=int(self.t[i]),
            x=self.x[i],
            a=int(self.a[i]),
            y_obs=int(self.y_obs[i]),
            y0=int(self.y0[i]),
            y1=int(self.y1[i]),
            f0=float(self.f0[i]),
            f1=float(self.f1[i]),
            propensity_used=float(self.propensity_used[i]),
        )

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def f_observed(self) -> np.ndarray:
        """Model prediction at the observed treatment arm."""
        return np.where(self.a == 1, self.f1, self.f0)

    def propensity_observed(self) -> np.ndarray:
        """Probability of the treatment actually assigned."""
        p1 = self.propensity_used
        return np.where(self.a == 1, p1, 1.0 - p1)

    def propensity_range(self) -> tuple[float, float]:
        return float(self.propensity_used.min()), float(self.propensity_used.max())

    CSV_HEADER = (
        ["t"]
        + [f"x{i}" for i in range(1, N_FEATURES + 1)]
        + ["a", "y_obs", "y0", "y1", "f0", "f1", "propensity_used"]
    )

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="ascii") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.CSV_HEADER)
            for i in range(len(self)):
                row = [int(self.t[i])]
                row += [repr(float(v)) for v in self.x[i]]
                row += [int(self.a[i]), int(self.y_obs[i]), int(self.y0[i]), int(self.y1[i])]
                row += [repr(float(self.f0[i])), repr(float(self.f1[i]))]
                row += [repr(float(self.propensity_used[i]))]
                writer.writerow(row)

    @classmethod
    def from_csv(cls, path) -> "ObservationStream":
        with open(path, newline="", encoding="ascii") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if header != cls.CSV_HEADER:
                raise ValueError(f"unexpected stream header {header!r}")
            rows = list(reader)
        n = len(rows)
        data = np.array([[float(v) for v in row] for row in rows]) if n else np.empty((0, len(cls.CSV_HEADER)))
        return cls(
            t=data[:, 0].astype(np.int64),
            x=data[:, 1 : 1 + N_FEATURES],
            a=data[:, 1 + N_FEATURES].astype(np.int8),
            y_obs=data[:, 2 + N_FEATURES].astype(np.int8),
            y0=data[:, 3 + N_FEATURES].astype(np.int8),
            y1=data[:, 4 + N_FEATURES].astype(np.int8),
            f0=data[:, 5 + N_FEATURES],
            f1=data[:, 6 + N_FEATURES],
            propensity_used=data[:, 7 + N_FEATURES],
        )


def outcome_probabilities(
    x: np.ndarray,
    t: np.ndarray,
    shift: ShiftScenario | None,
    outcome_law: str,
    delta: float,
    f0: np.ndarray,
    f1: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-arm outcome probabilities for a batch of records.

    ``dgp`` draws from the (possibly shifted) generative truth; ``null-boundary``
    draws from the boundary of the calibration null, where each arm's risk sits
    exactly delta beyond the model prediction in the overconfident direction.
    """
    if outcome_law == "dgp":
        p0 = apply_shift(true_risk_pre(x, 0), x, 0, shift, t)
        p1 = apply_shift(true_risk_pre(x, 1), x, 1, shift, t)
    elif outcome_law == "null-boundary":
        s0 = np.where(f0 >= 0.5, 1.0, -1.0)
        s1 = np.where(f1 >= 0.5, 1.0, -1.0)
        p0 = np.clip(f0 - s0 * delta, 0.0, 1.0)
        p1 = np.clip(f1 - s1 * delta, 0.0, 1.0)
    else:
        raise ValueError(f"unknown outcome law {outcome_law!r}")
    return p0, p1


def generate_stream(
    model: RiskModel,
    propensity,
    horizon: int,
    *,
    shift: ShiftScenario | None = None,
    seed: int | np.random.SeedSequence = 0,
    outcome_law: str = "dgp",
    delta: float = 0.0,
    treatment_seed: int | None = None,
) -> ObservationStream:
    """Generate ``horizon`` records under the treatment-feedback causal structure.

    Treatment depends only on (x, per-arm predictions); potential outcomes use
    an independent RNG substream indexed by record position, so a fresh
    ``treatment_seed`` changes assignments without touching (y0, y1).
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    cov_ss, treat_ss, out_ss = ss.spawn(3)
    if treatment_seed is not None:
        treat_ss = np.random.SeedSequence(treatment_seed)

    x = sample_covariates(np.random.default_rng(cov_ss), horizon)
    t = np.arange(1, horizon + 1, dtype=np.int64)
    f0 = model.predict_risk(x, 0)
    f1 = model.predict_risk(x, 1)

    p_treat = np.asarray(propensity.score(f0, f1), dtype=float)
    if np.any(p_treat <= 0.0) or np.any(p_treat >= 1.0):
        raise PositivityViolationError(
            "treatment propensity left (0, 1); positivity fails by construction"
        )
    a = (np.random.default_rng(treat_ss).random(horizon) < p_treat).astype(np.int8)

    p0, p1 = outcome_probabilities(x, t, shift, outcome_law, delta, f0, f1)
    u = np.random.default_rng(out_ss).random((horizon, 2))
    y0 = (u[:, 0] < p0).astype(np.int8)
    y1 = (u[:, 1] < p1).astype(np.int8)
    y_obs = np.where(a == 1, y1, y0).astype(np.int8)

    return ObservationStream(
        t=t, x=x, a=a, y_obs=y_obs, y0=y0, y1=y1, f0=f0, f1=f1, propensity_used=p_treat
    )
