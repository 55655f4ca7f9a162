"""Dynamic control limits from Monte-Carlo bootstrap under the worst-case
calibration null, with uniform alpha spending, plus alarm evaluation.

The bootstrap conditions on a monitored stream's realized covariates,
treatments, and predictions, resampling only the outcomes.  Every monitor's
schedule is built from the same resampled outcomes applied to that monitor's
own chart statistic, which puts the procedures on a comparable Type-I footing.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .simulator import ObservationStream

SIGN_ADJUSTED = "sign-adjusted"
LITERAL = "literal"


def alpha_spending(alpha: float, t: float, horizon: float) -> float:
    """Cumulative Type-I budget spent by time t under the uniform schedule."""
    if not 0 <= t <= horizon:
        raise ValueError(f"t must be in [0, {horizon}], got {t}")
    return alpha * t / horizon


def spending_schedule(alpha: float, n_batches: int, batch_size: int, horizon: int) -> np.ndarray:
    """Cumulative budget at the end of each batch."""
    t_end = np.arange(1, n_batches + 1) * batch_size
    if t_end[-1] != horizon:
        raise ValueError("batch grid does not cover the horizon exactly")
    return alpha * t_end.astype(float) / horizon


def worst_case_probability(f_obs, s, delta: float, variant: str = SIGN_ADJUSTED):
    """Outcome probability at the boundary of the calibration null.

    ``sign-adjusted`` places the true risk delta beyond the prediction in the
    overconfident direction for either predicted class; ``literal`` always adds
    delta.  Results are clamped to [0, 1].
    """
    f_obs = np.asarray(f_obs, dtype=float)
    if variant == SIGN_ADJUSTED:
        p = f_obs - np.asarray(s, dtype=float) * delta
    elif variant == LITERAL:
        p = f_obs + delta
    else:
        raise ValueError(f"unknown worst-case variant {variant!r}")
    p = np.clip(p, 0.0, 1.0)
    if p.ndim == 0:
        return float(p)
    return p


def bootstrap_outcome(
    f_obs: float, s: int, delta: float, rng: np.random.Generator, variant: str = SIGN_ADJUSTED
) -> int:
    """One resampled outcome under the worst-case null, given the observed prediction."""
    p = worst_case_probability(f_obs, s, delta, variant)
    return int(rng.random() < p)


def draw_bootstrap_outcomes(
    stream: ObservationStream,
    delta: float,
    n_paths: int,
    rng: np.random.Generator,
    variant: str = SIGN_ADJUSTED,
) -> np.ndarray:
    """Outcome resamples for every record of a stream: shape (n_paths, T)."""
    f_obs = stream.f_observed()
    s = np.where(f_obs >= 0.5, 1.0, -1.0)
    p = worst_case_probability(f_obs, s, delta, variant)
    return (rng.random((n_paths, len(stream))) < p).astype(np.float64)


@dataclass
class BootstrapPath:
    """Bookkeeping for one bootstrap path while building a schedule."""

    chart: np.ndarray
    outcomes: np.ndarray | None = None
    crossed: bool = False
    crossing_batch: int | None = None


@dataclass
class ControlLimitSchedule:
    """Per-batch control limit h plus the spending and path bookkeeping that
    produced it.  ``spending`` is the nominal cumulative budget; the crossing
    allowance actually enforced is floor(spending_scale * spending * n_paths)."""

    h: np.ndarray
    alpha: float
    horizon: int
    batch_size: int
    n_paths: int
    spending: np.ndarray
    surviving: np.ndarray
    crossed_at: np.ndarray  # per path: 1-based crossing batch, 0 if never
    spending_scale: float = 1.0

    def __post_init__(self):
        if np.any(np.diff(self.spending) < 0):
            raise ValueError("spending must be nondecreasing")
        if not math.isclose(float(self.spending[-1]), self.alpha, rel_tol=1e-9):
            raise ValueError("spending must end at alpha")
        if len(self.h) != len(self.spending):
            raise ValueError("h must be defined at every monitored batch")

    @property
    def n_batches(self) -> int:
        return len(self.h)

    def crossing_fraction(self) -> np.ndarray:
        """Cumulative fraction of bootstrap paths crossed by each batch."""
        counts = np.zeros(self.n_batches)
        for b in self.crossed_at:
            if b > 0:
                counts[b - 1 :] += 1
        return counts / self.n_paths

    def export_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="ascii") as fh:
            writer = csv.writer(fh)
            writer.writerow(["batch_index", "h", "cumulative_spend", "surviving_paths"])
            for j in range(self.n_batches):
                writer.writerow(
                    [j + 1, repr(float(self.h[j])), repr(float(self.spending[j])), int(self.surviving[j])]
                )


def compute_dcl(
    paths,
    spending: np.ndarray,
    alpha: float,
    horizon: int,
    batch_size: int,
    spending_scale: float = 1.0,
) -> ControlLimitSchedule:
    """Choose per-batch limits so cumulative path crossings stay within the
    spent budget.

    At each batch the allowed cumulative crossings are
    floor(spending_scale * spent * n_paths); the limit is the upper order
    statistic of the surviving paths' current values that lets at most the
    remaining allowance cross (strict inequality).  Crossed paths freeze and
    never re-enter later quantiles.
    """
    if isinstance(paths, (list, tuple)):
        chart = np.stack([p.chart for p in paths])
        path_objs = list(paths)
    else:
        chart = np.asarray(paths, dtype=float)
        path_objs = None
    n_paths, nb = chart.shape
    if nb != len(spending):
        raise ValueError("paths and spending must share the batch grid")
    if not 0.0 < spending_scale <= 1.0:
        raise ValueError("spending_scale must be in (0, 1]")

    crossed = np.zeros(n_paths, dtype=bool)
    crossed_at = np.zeros(n_paths, dtype=np.int64)
    h = np.empty(nb)
    surviving = np.empty(nb, dtype=np.int64)
    for j in range(nb):
        allowed_total = int(math.floor(spending_scale * spending[j] * n_paths))
        already = int(crossed.sum())
        allowance = allowed_total - already
        values = chart[~crossed, j]
        if allowance >= values.shape[0]:
            raise ValueError(
                f"alpha budget at batch {j + 1} lets every surviving path cross; "
                "increase the number of bootstrap paths"
            )
        # (allowance+1)-th largest surviving value; paths strictly above it cross
        h[j] = np.partition(values, values.shape[0] - allowance - 1)[
            values.shape[0] - allowance - 1
        ]
        newly = ~crossed & (chart[:, j] > h[j])
        crossed_at[newly] = j + 1
        crossed |= newly
        surviving[j] = n_paths - int(crossed.sum())

    if path_objs is not None:
        for p, b in zip(path_objs, crossed_at):
            p.crossed = bool(b)
            p.crossing_batch = int(b) if b else None

    return ControlLimitSchedule(
        h=h,
        alpha=alpha,
        horizon=horizon,
        batch_size=batch_size,
        n_paths=n_paths,
        spending=np.asarray(spending, dtype=float),
        surviving=surviving,
        crossed_at=crossed_at,
        spending_scale=spending_scale,
    )


def alarm_check(chart: np.ndarray, schedule: ControlLimitSchedule) -> int | None:
    """First 1-based batch where the chart strictly exceeds the limit, else None."""
    chart = np.asarray(chart, dtype=float)
    if chart.shape != schedule.h.shape:
        raise ValueError(
            f"chart has {chart.shape[0]} batches but the schedule has {schedule.n_batches}"
        )
    above = chart > schedule.h
    if not above.any():
        return None
    return int(np.argmax(above)) + 1


def first_crossings(charts: np.ndarray, schedule: ControlLimitSchedule) -> np.ndarray:
    """Vectorized alarm_check for many chart paths: 0 where no crossing."""
    above = np.asarray(charts, dtype=float) > schedule.h
    any_cross = above.any(axis=1)
    first = above.argmax(axis=1) + 1
    return np.where(any_cross, first, 0)


def calibrate_spending_scale(
    build_charts: np.ndarray,
    holdout_charts: np.ndarray,
    spending: np.ndarray,
    alpha: float,
    horizon: int,
    batch_size: int,
    lo: float = 0.2,
    iterations: int = 12,
) -> float:
    """Largest spending scale whose schedule keeps the holdout crossing rate
    at or below alpha.

    The greedy order-statistic schedule overfits its build paths: a fresh path
    from the same law crosses noticeably more often than the nominal rate when
    the number of looks is large relative to the per-look budget.  Shrinking
    the spent budget against an independent set of paths removes that bias.
    """
    best = lo
    hi = 1.0
    full = compute_dcl(build_charts, spending, alpha, horizon, batch_size, 1.0)
    if np.mean(first_crossings(holdout_charts, full) > 0) <= alpha:
        return 1.0
    for _ in range(iterations):
        mid = (lo + hi) / 2.0
        schedule = compute_dcl(build_charts, spending, alpha, horizon, batch_size, mid)
        rate = np.mean(first_crossings(holdout_charts, schedule) > 0)
        if rate <= alpha:
            best = mid
            lo = mid
        else:
            hi = mid
    return best


def compute_calibrated_dcl(
    build_charts: np.ndarray,
    holdout_charts: np.ndarray,
    spending: np.ndarray,
    alpha: float,
    horizon: int,
    batch_size: int,
) -> ControlLimitSchedule:
    """Schedule from the build paths with its spending scale calibrated on an
    independent holdout set of bootstrap paths."""
    scale = calibrate_spending_scale(
        build_charts, holdout_charts, spending, alpha, horizon, batch_size
    )
    return compute_dcl(build_charts, spending, alpha, horizon, batch_size, scale)
