"""CUSUM chart statistics for the seven monitoring procedures.

Labels: 1N (naive average predictive values), 1I/1O (inverse-propensity-weighted
average predictive values on interventional/observational data), 2I/2O
(subgroup predictive values), 3I/3O (calibration residuals).  Each monitor is a
batch-updated CUSUM over per-cell increments; the chart value is the maximum of
the per-cell recursions.

Per-record increments are affine in the binary outcome, so the same coefficient
arrays evaluate both the monitored stream's chart and bootstrap-resampled
charts efficiently.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from .exceptions import DegenerateCellError, PositivityViolationError
from .propensity import PropensityModel
from .simulator import ObservationRecord, ObservationStream, Subgroup

LABEL_MAP = {
    "1N": ("C1", "naive"),
    "1I": ("C1", "ipw-oracle"),
    "1O": ("C1", "ipw-estimated"),
    "2I": ("C2", "ipw-oracle"),
    "2O": ("C2", "ipw-estimated"),
    "3I": ("C3", "none"),
    "3O": ("C3", "none"),
}
INTERVENTIONAL_LABELS = frozenset({"1I", "2I", "3I"})
OBSERVATIONAL_LABELS = frozenset({"1N", "1O", "2O", "3O"})
ALL_LABELS = tuple(LABEL_MAP)

WEIGHT_SD_FLOOR = 1e-6
WEIGHT_CAP = 1e6


@dataclass(frozen=True)
class MonitorSpec:
    """Full description of one chart statistic: criterion, weighting, thresholds,
    subgroups and their weights, tolerance, and batch size."""

    label: str
    thresholds: dict = field(default_factory=dict)
    subgroups: tuple[Subgroup, ...] = ()
    subgroup_weights: dict = field(default_factory=dict)
    delta: float = 0.0
    batch_size: int = 50
    threshold_b: float = 0.5
    propensity_model: PropensityModel | None = None
    weight_clip: float | None = None

    def __post_init__(self):
        if self.label not in LABEL_MAP:
            raise ValueError(f"unknown monitor label {self.label!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        crit = self.criterion
        if crit == "C1":
            expected = {(a, v) for a in (0, 1) for v in (0, 1)}
            if set(self.thresholds) != expected:
                raise ValueError("C1 monitors need thresholds for the 4 (arm, label) cells")
        elif crit == "C2":
            if not self.subgroups:
                raise ValueError("C2 monitors need at least one subgroup")
            expected = {(a, v, s.name) for s in self.subgroups for a in (0, 1) for v in (0, 1)}
            if set(self.thresholds) != expected:
                raise ValueError("C2 monitors need thresholds for all 4K (arm, label, subgroup) cells")
            wexpected = {(s.name, v) for s in self.subgroups for v in (0, 1)}
            if set(self.subgroup_weights) != wexpected:
                raise ValueError("C2 monitors need one weight per (subgroup, label)")
        else:
            if not self.subgroups:
                raise ValueError("C3 monitors need at least one subgroup")
            if self.delta < 0:
                raise ValueError("delta must be >= 0")
            if set(self.subgroup_weights) != {s.name for s in self.subgroups}:
                raise ValueError("C3 monitors need one weight per subgroup")
        for c in self.thresholds.values():
            if not 0.0 < c < 1.0:
                raise ValueError("thresholds must be probabilities in (0, 1)")
        for w in self.subgroup_weights.values():
            if w <= 0:
                raise ValueError("subgroup weights must be positive")

    @property
    def criterion(self) -> str:
        return LABEL_MAP[self.label][0]

    @property
    def weighting(self) -> str:
        return LABEL_MAP[self.label][1]

    def cells(self) -> tuple:
        if self.criterion == "C1":
            return tuple((a, v) for a in (0, 1) for v in (0, 1))
        if self.criterion == "C2":
            return tuple(
                (a, v, s.name) for s in self.subgroups for a in (0, 1) for v in (0, 1)
            )
        return tuple(s.name for s in self.subgroups)

    def cell_labels(self) -> tuple[str, ...]:
        if self.criterion == "C1":
            return tuple(f"a{a}_y{v}" for a, v in self.cells())
        if self.criterion == "C2":
            return tuple(f"a{a}_y{v}_{k}" for a, v, k in self.cells())
        return tuple(self.cells())


def _observed_propensity(record_a, p_treat) -> np.ndarray:
    return np.where(np.asarray(record_a) == 1, p_treat, 1.0 - p_treat)


def _ipw_weight(p_obs, weight_clip):
    p_obs = np.asarray(p_obs, dtype=float)
    if np.any(p_obs <= 0.0) or np.any(p_obs >= 1.0):
        raise PositivityViolationError(
            "observed-treatment propensity outside (0, 1); cannot inverse-weight"
        )
    w = 1.0 / p_obs
    if weight_clip is not None:
        w = np.minimum(w, weight_clip)
    return w


def _record_propensity(record: ObservationRecord, weighting, propensity_model):
    """P(A=1) used by an IPW increment for one record."""
    if weighting == "ipw-estimated" and propensity_model is not None:
        return float(propensity_model.score(record.f0, record.f1))
    return record.propensity_used


def increment_c1(
    record: ObservationRecord,
    a: int,
    upsilon: int,
    c: float,
    weighting: str,
    propensity_model: PropensityModel | None = None,
    threshold_b: float = 0.5,
    weight_clip: float | None = None,
) -> float:
    """Per-record residual for the average-predictive-value charts."""
    if weighting == "naive":
        f_obs = record.f1 if record.a == 1 else record.f0
        gate = (int(f_obs > threshold_b) == upsilon) and (record.a == a)
        return (c - float(record.y_obs == upsilon)) * float(gate)
    f_cell = record.f1 if a == 1 else record.f0
    gate = float(int(f_cell > threshold_b) == upsilon)
    if record.a == a:
        p1 = _record_propensity(record, weighting, propensity_model)
        p_obs = p1 if record.a == 1 else 1.0 - p1
        w = float(_ipw_weight(p_obs, weight_clip))
        matched = float(record.y_obs == upsilon) * w
    else:
        matched = 0.0
    return (c - matched) * gate


def increment_c2(
    record: ObservationRecord,
    a: int,
    upsilon: int,
    subgroup: Subgroup,
    c: float,
    weight: float,
    weighting: str,
    propensity_model: PropensityModel | None = None,
    threshold_b: float = 0.5,
    weight_clip: float | None = None,
) -> float:
    """Subgroup predictive-value residual: the C1 inverse-weighted residual gated
    on subgroup membership and scaled by the subgroup weight."""
    if not subgroup.contains(record.x):
        return 0.0
    inner = increment_c1(
        record, a, upsilon, c, weighting, propensity_model, threshold_b, weight_clip
    )
    return weight * inner


def increment_c3(
    record: ObservationRecord,
    subgroup: Subgroup,
    delta: float,
    weight: float,
) -> float:
    """Calibration residual at the observed treatment; no inverse weights."""
    if not subgroup.contains(record.x):
        return 0.0
    f_obs = record.f1 if record.a == 1 else record.f0
    s = 1.0 if f_obs >= 0.5 else -1.0
    return weight * (s * (f_obs - record.y_obs) - delta)


def increment_coefficients(spec: MonitorSpec, stream: ObservationStream):
    """Arrays (const, ycoef), each (T, n_cells): the increment for record i in
    cell j is const[i, j] + ycoef[i, j] * y_i."""
    n = len(stream)
    f0 = stream.f0
    f1 = stream.f1
    a_obs = stream.a
    yhat = {0: (f0 > spec.threshold_b), 1: (f1 > spec.threshold_b)}

    ipw = None
    if spec.weighting.startswith("ipw"):
        if spec.weighting == "ipw-estimated" and spec.propensity_model is not None:
            p1 = np.asarray(spec.propensity_model.score(f0, f1), dtype=float)
        else:
            p1 = stream.propensity_used
        ipw = _ipw_weight(_observed_propensity(a_obs, p1), spec.weight_clip)

    def ipw_cell_coefs(a, v, c):
        gate = (yhat[a] == bool(v)).astype(float)
        arm = (a_obs == a).astype(float)
        m = gate * arm * ipw
        if v == 1:
            return gate * c, -m
        return gate * c - m, m

    const = np.empty((n, len(spec.cells())))
    ycoef = np.empty_like(const)
    if spec.criterion == "C1" and spec.weighting == "naive":
        yhat_obs = np.where(a_obs == 1, yhat[1], yhat[0])
        for j, (a, v) in enumerate(spec.cells()):
            gate = ((yhat_obs == bool(v)) & (a_obs == a)).astype(float)
            c = spec.thresholds[(a, v)]
            if v == 1:
                const[:, j] = gate * c
                ycoef[:, j] = -gate
            else:
                const[:, j] = gate * (c - 1.0)
                ycoef[:, j] = gate
    elif spec.criterion == "C1":
        for j, (a, v) in enumerate(spec.cells()):
            const[:, j], ycoef[:, j] = ipw_cell_coefs(a, v, spec.thresholds[(a, v)])
    elif spec.criterion == "C2":
        members = {s.name: s.contains_many(stream.x).astype(float) for s in spec.subgroups}
        for j, (a, v, k) in enumerate(spec.cells()):
            cst, yc = ipw_cell_coefs(a, v, spec.thresholds[(a, v, k)])
            w = spec.subgroup_weights[(k, v)]
            const[:, j] = w * (members[k] * cst)
            ycoef[:, j] = w * (members[k] * yc)
    else:
        f_obs = stream.f_observed()
        s = np.where(f_obs >= 0.5, 1.0, -1.0)
        for j, k in enumerate(spec.cells()):
            sub = next(sg for sg in spec.subgroups if sg.name == k)
            gate = sub.contains_many(stream.x).astype(float)
            w = spec.subgroup_weights[k]
            const[:, j] = w * (gate * (s * f_obs - spec.delta))
            ycoef[:, j] = w * (gate * (-s))
    return const, ycoef


def n_batches(spec: MonitorSpec, stream_length: int) -> int:
    if stream_length % spec.batch_size:
        raise ValueError(
            f"stream length {stream_length} is not a multiple of batch size {spec.batch_size}"
        )
    return stream_length // spec.batch_size


def batch_increment_sums(spec: MonitorSpec, stream: ObservationStream, y=None) -> np.ndarray:
    """Per-batch, per-cell increment sums, shape (n_batches, n_cells)."""
    y = stream.y_obs if y is None else y
    nb = n_batches(spec, len(stream))
    const, ycoef = increment_coefficients(spec, stream)
    inc = const + ycoef * np.asarray(y, dtype=float)[:, None]
    return inc.reshape(nb, spec.batch_size, -1).sum(axis=1)


def bootstrap_batch_sums(
    spec: MonitorSpec, stream: ObservationStream, outcomes: np.ndarray
) -> np.ndarray:
    """Batch sums for many outcome resamples at once.

    ``outcomes`` has shape (n_paths, T); returns (n_paths, n_batches, n_cells).
    """
    nb = n_batches(spec, len(stream))
    const, ycoef = increment_coefficients(spec, stream)
    bs = spec.batch_size
    const_sums = const.reshape(nb, bs, -1).sum(axis=1)
    y = np.asarray(outcomes, dtype=float)
    out = np.empty((y.shape[0], nb, const.shape[1]))
    for j in range(nb):
        sl = slice(j * bs, (j + 1) * bs)
        out[:, j, :] = const_sums[j] + y[:, sl] @ ycoef[sl, :]
    return out


def cusum_chart(batch_sums: np.ndarray) -> np.ndarray:
    """CUSUM recursion over batches, maximized over cells.

    ``batch_sums`` has shape (..., n_batches, n_cells); returns (..., n_batches).
    Per cell, M <- batch_sum + max(0, M_prev); the chart is the max over cells,
    which equals the maximum over all batch-boundary changepoints of the suffix
    sums.
    """
    nb = batch_sums.shape[-2]
    m = np.zeros(batch_sums.shape[:-2] + batch_sums.shape[-1:])
    out = np.empty(batch_sums.shape[:-2] + (nb,))
    for j in range(nb):
        m = batch_sums[..., j, :] + np.maximum(m, 0.0)
        out[..., j] = m.max(axis=-1)
    return out


def stream_chart(spec: MonitorSpec, stream: ObservationStream, y=None) -> np.ndarray:
    """Chart values per batch for one outcome sequence."""
    return cusum_chart(batch_increment_sums(spec, stream, y))


def bootstrap_charts(
    spec: MonitorSpec, stream: ObservationStream, outcomes: np.ndarray
) -> np.ndarray:
    """Chart values per batch for each resampled outcome path: (n_paths, n_batches)."""
    return cusum_chart(bootstrap_batch_sums(spec, stream, outcomes))


@dataclass
class MonitorState:
    """Streaming CUSUM state: one accumulator per cell plus the chart trace."""

    cells: tuple
    cell_labels: tuple[str, ...]
    values: np.ndarray
    batch_index: int = 0
    trace: list = field(default_factory=list)

    @property
    def chart_value(self) -> float:
        return float(self.values.max())


def new_monitor_state(spec: MonitorSpec) -> MonitorState:
    cells = spec.cells()
    return MonitorState(
        cells=cells, cell_labels=spec.cell_labels(), values=np.zeros(len(cells))
    )


def cusum_update(state: MonitorState, batch_sums) -> float:
    """Advance the recursion by one batch of summed increments; returns the chart value."""
    batch_sums = np.asarray(batch_sums, dtype=float)
    if batch_sums.shape != state.values.shape:
        raise ValueError(
            f"expected {state.values.shape[0]} per-cell sums, got shape {batch_sums.shape}"
        )
    state.values = batch_sums + np.maximum(state.values, 0.0)
    state.batch_index += 1
    chart = state.chart_value
    state.trace.append((state.batch_index, chart, state.values.copy()))
    return chart


def run_monitor(spec: MonitorSpec, stream: ObservationStream, y=None) -> MonitorState:
    """Feed a whole stream through the batch recursion; returns the final state."""
    state = new_monitor_state(spec)
    for sums in batch_increment_sums(spec, stream, y):
        cusum_update(state, sums)
    return state


def export_chart_trace(state: MonitorState, path) -> None:
    """CSV trace: batch_index, chart_value, then one column per cell."""
    with open(path, "w", newline="", encoding="ascii") as fh:
        writer = csv.writer(fh)
        writer.writerow(["batch_index", "chart_value", *state.cell_labels])
        for batch_index, chart, values in state.trace:
            writer.writerow([batch_index, repr(float(chart)), *[repr(float(v)) for v in values]])


def _unweighted_weight_cell_values(spec: MonitorSpec, stream: ObservationStream):
    """Per weight-cell: (increment values over pre-change records, eligible count).

    C2 weight cells (subgroup, label) pool the per-record residuals of both
    treatment arms; C3 weight cells are per subgroup.
    """
    unit = replace(
        spec,
        subgroup_weights={key: 1.0 for key in spec.subgroup_weights},
    )
    const, ycoef = increment_coefficients(unit, stream)
    inc = const + ycoef * stream.y_obs.astype(float)[:, None]
    cells = unit.cells()
    out = {}
    if spec.criterion == "C2":
        gates = (ycoef != 0.0) | (const != 0.0)
        for s in spec.subgroups:
            for v in (0, 1):
                cols = [j for j, (a, vv, k) in enumerate(cells) if vv == v and k == s.name]
                values = np.concatenate([inc[:, j] for j in cols])
                eligible = int(sum(gates[:, j].sum() for j in cols))
                out[(s.name, v)] = (values, eligible)
    elif spec.criterion == "C3":
        for j, k in enumerate(cells):
            sub = next(sg for sg in spec.subgroups if sg.name == k)
            eligible = int(sub.contains_many(stream.x).sum())
            out[k] = (inc[:, j], eligible)
    else:
        raise ValueError("subgroup weights apply to C2/C3 monitors only")
    return out


def weight_from_sd(sd: float) -> float:
    """Inverse-standard-deviation weight with the degenerate-cell cap."""
    if sd < WEIGHT_SD_FLOOR:
        return WEIGHT_CAP
    return 1.0 / sd


def estimate_subgroup_weights(pre_change: ObservationStream, spec: MonitorSpec) -> dict:
    """Weights = 1 / (sample SD of the cell's unweighted increments over a
    pre-change stream), so every weight cell contributes at comparable scale."""
    out = {}
    for key, (values, eligible) in _unweighted_weight_cell_values(spec, pre_change).items():
        if eligible < 2:
            raise DegenerateCellError(
                f"weight cell {key!r} has {eligible} eligible pre-change records"
            )
        out[key] = weight_from_sd(float(np.std(values, ddof=1)))
    return out
