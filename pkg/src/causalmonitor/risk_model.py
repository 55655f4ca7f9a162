"""Risk prediction model: a locked logistic model over (covariates, treatment).

The model predicts an adverse-event probability for either treatment arm,
binarizes it against a decision threshold, and reports the predicted class
sign used by the calibration monitors.  Models are immutable once built.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import ConvergenceError, DegenerateDataError

N_FEATURES = 10


def sigmoid(z):
    """Numerically stable logistic function; preserves scalar/array shape."""
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    if out.ndim == 0:
        return float(out)
    return out


@dataclass(frozen=True, eq=False)
class RiskModel:
    """Logistic risk model with coefficients over (intercept, x, a, x*a).

    Immutable after construction; safe to share across workers.
    """

    intercept: float
    x_coef: np.ndarray
    a_coef: float
    xa_coef: np.ndarray
    threshold: float = 0.5

    def __post_init__(self):
        x_coef = np.asarray(self.x_coef, dtype=float)
        xa_coef = np.asarray(self.xa_coef, dtype=float)
        if x_coef.ndim != 1 or xa_coef.shape != x_coef.shape:
            raise ValueError("x_coef and xa_coef must be 1-d arrays of equal length")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError(f"threshold must be in (0, 1), got {self.threshold!r}")
        x_coef.setflags(write=False)
        xa_coef.setflags(write=False)
        object.__setattr__(self, "x_coef", x_coef)
        object.__setattr__(self, "xa_coef", xa_coef)
        object.__setattr__(self, "intercept", float(self.intercept))
        object.__setattr__(self, "a_coef", float(self.a_coef))
        object.__setattr__(self, "threshold", float(self.threshold))

    @property
    def n_features(self) -> int:
        return self.x_coef.shape[0]

    def _linear(self, x, a):
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.n_features:
            raise ValueError(
                f"expected covariate dimension {self.n_features}, got {x.shape[-1]}"
            )
        a = np.asarray(a, dtype=float)
        return (
            self.intercept
            + x @ self.x_coef
            + a * self.a_coef
            + a * (x @ self.xa_coef)
        )

    def predict_risk(self, x, a):
        """Predicted adverse-event probability in [0, 1] for arm ``a``."""
        return sigmoid(self._linear(x, a))

    def binarize(self, x, a):
        """Positive-class indicator: 1 iff predicted risk strictly exceeds the threshold."""
        risk = self.predict_risk(x, a)
        out = np.asarray(risk) > self.threshold
        if out.ndim == 0:
            return int(out)
        return out.astype(np.int8)

    def predicted_sign(self, x, a):
        """+1 if predicted risk >= 0.5 else -1 (ties map to +1)."""
        risk = self.predict_risk(x, a)
        out = np.where(np.asarray(risk) >= 0.5, 1, -1)
        if out.ndim == 0:
            return int(out)
        return out.astype(np.int8)

    def save(self, path) -> None:
        """Write a plain-text key-value record that round-trips exactly."""
        with open(path, "w", encoding="ascii") as fh:
            fh.write(f"threshold_b {self.threshold!r}\n")
            fh.write(f"intercept {self.intercept!r}\n")
            for i, v in enumerate(self.x_coef, start=1):
                fh.write(f"x{i} {float(v)!r}\n")
            fh.write(f"a {self.a_coef!r}\n")
            for i, v in enumerate(self.xa_coef, start=1):
                fh.write(f"x{i}:a {float(v)!r}\n")

    @classmethod
    def load(cls, path) -> "RiskModel":
        values: dict[str, float] = {}
        with open(path, encoding="ascii") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                name, raw = line.split(None, 1)
                values[name] = float(raw)
        d = sum(1 for name in values if name.startswith("x") and ":" not in name)
        try:
            x_coef = np.array([values[f"x{i}"] for i in range(1, d + 1)])
            xa_coef = np.array([values[f"x{i}:a"] for i in range(1, d + 1)])
            return cls(
                intercept=values["intercept"],
                x_coef=x_coef,
                a_coef=values["a"],
                xa_coef=xa_coef,
                threshold=values["threshold_b"],
            )
        except KeyError as exc:
            raise ValueError(f"model file {path} is missing field {exc}") from exc


def oracle_model(threshold: float = 0.5) -> RiskModel:
    """The known pre-change generative logistic model, usable as a perfectly
    calibrated deployed model.  Only the first two covariates are active."""
    x_coef = np.zeros(N_FEATURES)
    x_coef[0] = -0.5
    x_coef[1] = -1.0
    xa_coef = np.zeros(N_FEATURES)
    xa_coef[0] = 1.0
    xa_coef[1] = 2.0
    return RiskModel(
        intercept=0.0, x_coef=x_coef, a_coef=0.5, xa_coef=xa_coef, threshold=threshold
    )


@dataclass
class FitConfig:
    max_iter: int = 100
    tol: float = 1e-8
    ridge: float = 1e-6


def fit_logistic(x, a, y, config: FitConfig | None = None, threshold: float = 0.5) -> RiskModel:
    """Fit a ridge-penalized logistic model over (intercept, x, a, x*a) by Newton steps.

    The penalty (excluding the intercept) is for numerical stability only.
    Raises DegenerateDataError for single-class labels and ConvergenceError,
    carrying the last iterate, if the step change never drops below tolerance.
    """
    config = config or FitConfig()
    x = np.asarray(x, dtype=float)
    a = np.asarray(a, dtype=float)
    y = np.asarray(y, dtype=float)
    n, d = x.shape
    if set(np.unique(y)) - {0.0, 1.0}:
        raise ValueError("labels must be binary")
    if len(np.unique(y)) < 2:
        raise DegenerateDataError("all labels identical; logistic fit is not identified")
    design = np.column_stack([np.ones(n), x, a, x * a[:, None]])
    p = design.shape[1]
    if n < p:
        raise ValueError(f"need at least {p} observations for {p} coefficients, got {n}")

    penalty = np.full(p, config.ridge)
    penalty[0] = 0.0  # intercept unpenalized

    def objective(beta):
        eta = design @ beta
        # log(1 + e^eta) - y*eta, stable form
        nll = np.sum(np.logaddexp(0.0, eta) - y * eta)
        return nll + 0.5 * np.sum(penalty * beta * beta)

    beta = np.zeros(p)
    obj = objective(beta)
    for _ in range(config.max_iter):
        mu = sigmoid(design @ beta)
        grad = design.T @ (y - mu) - penalty * beta
        w = np.clip(mu * (1.0 - mu), 1e-12, None)
        hess = design.T @ (design * w[:, None])
        hess[np.diag_indices_from(hess)] += penalty + 1e-12
        step = np.linalg.solve(hess, grad)
        # backtracking keeps Newton stable under near-separation
        scale = 1.0
        for _ in range(30):
            candidate = beta + scale * step
            cand_obj = objective(candidate)
            if cand_obj <= obj:
                break
            scale *= 0.5
        beta = beta + scale * step
        obj = objective(beta)
        if np.max(np.abs(scale * step)) < config.tol:
            return RiskModel(
                intercept=beta[0],
                x_coef=beta[1 : d + 1],
                a_coef=beta[d + 1],
                xa_coef=beta[d + 2 :],
                threshold=threshold,
            )
    raise ConvergenceError(
        f"logistic fit did not converge in {config.max_iter} iterations",
        last_iterate=beta,
    )
