"""Predictive distributions from posterior samples, RMSE evaluation,
training-trace summaries, and the D'Agostino-Pearson normality test.

Multi-step prediction uses stochastic rollouts per posterior sample: the
next state is drawn from the per-sample transition Gaussian, the observation
distribution at each step is N(C mu + d, C Sigma C^T + R), and the summary
combines the per-sample observation variance with the across-sample spread
of the per-sample means (law of total variance).  The across-sample mean of
per-sample means is the point prediction used for RMSE.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InsufficientSamplesError, ShapeError
from .model import WhitenedInducing, transition_moments, unwhiten

NORMALITY_MIN_SAMPLES = 20
MOVING_AVERAGE_WINDOW = 1000


@dataclass(frozen=True)
class PredictiveSummary:
    """Per-step predictive means and standard deviations, shape (H, d_y)."""

    means: np.ndarray
    stds: np.ndarray


@dataclass(frozen=True)
class NormalityRow:
    quantity: str   # "state" or "inducing"
    index: int      # time step t for states, inducing index m otherwise
    dim: int
    k2: float
    p: float


@dataclass(frozen=True)
class NormalityReport:
    """Per-scalar-quantity omnibus statistics plus rejection fractions at
    the 0.05 level."""

    rows: tuple
    state_rejection_fraction: float
    inducing_rejection_fraction: float


def rollout_predict(model, store, controls_future, horizon: int, rng) -> PredictiveSummary:
    """Free simulation for ``horizon`` steps from each posterior sample.

    Starts at the final training state of every draw, recursively samples
    states from the per-sample transition Gaussian, and aggregates the
    per-sample observation moments across samples.
    """
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    if len(store) == 0:
        raise ValueError("sample store is empty")
    if model.d_a > 0:
        controls_future = np.asarray(controls_future, dtype=float)
        if controls_future.ndim != 2 or controls_future.shape[0] < horizon \
                or controls_future.shape[1] != model.d_a:
            raise ShapeError(
                f"need at least {horizon} future control rows of width {model.d_a}"
            )
    S = len(store)
    mean_acc = np.zeros((horizon, model.d_y))
    m2_acc = np.zeros((horizon, model.d_y))
    var_acc = np.zeros((horizon, model.d_y))
    C2 = model.C**2
    for s in range(S):
        x = np.asarray(store.draws[s].states[-1], dtype=float)
        v = WhitenedInducing(v=store.draws[s].v)
        for h in range(horizon):
            ctrl = controls_future[h] if model.d_a > 0 else None
            mu, var = transition_moments(
                model, x[None, :],
                None if ctrl is None else ctrl[None, :], v,
            )
            mu, var = mu[0], var[0]
            y_mean = model.C @ mu + model.d
            y_var = C2 @ var + model.R
            mean_acc[h] += y_mean
            m2_acc[h] += y_mean**2
            var_acc[h] += y_var
            x = mu + np.sqrt(var) * rng.standard_normal(model.d_x)
    means = mean_acc / S
    spread = m2_acc / S - means**2
    total_var = var_acc / S + np.maximum(spread, 0.0)
    return PredictiveSummary(means=means, stds=np.sqrt(total_var))


def rmse(pred, truth) -> float:
    """Root-mean-square error over all entries of two equal-shape sequences."""
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if pred.shape != truth.shape or pred.size == 0:
        raise ShapeError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    return float(np.sqrt(np.mean((pred - truth) ** 2)))


def _skewness_statistic(x: np.ndarray) -> float:
    """D'Agostino (1970) transformed skewness Z1."""
    n = x.shape[0]
    m2 = np.mean((x - x.mean()) ** 2)
    m3 = np.mean((x - x.mean()) ** 3)
    b1 = m3 / m2**1.5
    y = b1 * np.sqrt((n + 1.0) * (n + 3.0) / (6.0 * (n - 2.0)))
    beta2 = (
        3.0 * (n**2 + 27.0 * n - 70.0) * (n + 1.0) * (n + 3.0)
        / ((n - 2.0) * (n + 5.0) * (n + 7.0) * (n + 9.0))
    )
    w2 = -1.0 + np.sqrt(2.0 * (beta2 - 1.0))
    delta = 1.0 / np.sqrt(0.5 * np.log(w2))
    alpha = np.sqrt(2.0 / (w2 - 1.0))
    if y == 0.0:
        y = 1.0
    return float(delta * np.log(y / alpha + np.sqrt((y / alpha) ** 2 + 1.0)))


def _kurtosis_statistic(x: np.ndarray) -> float:
    """Anscombe-Glynn (1983) transformed kurtosis Z2."""
    n = x.shape[0]
    m2 = np.mean((x - x.mean()) ** 2)
    m4 = np.mean((x - x.mean()) ** 4)
    b2 = m4 / m2**2
    mean_b2 = 3.0 * (n - 1.0) / (n + 1.0)
    var_b2 = (
        24.0 * n * (n - 2.0) * (n - 3.0)
        / ((n + 1.0) ** 2 * (n + 3.0) * (n + 5.0))
    )
    xx = (b2 - mean_b2) / np.sqrt(var_b2)
    sqrt_beta1 = (
        6.0 * (n * n - 5.0 * n + 2.0) / ((n + 7.0) * (n + 9.0))
        * np.sqrt(6.0 * (n + 3.0) * (n + 5.0) / (n * (n - 2.0) * (n - 3.0)))
    )
    a = 6.0 + 8.0 / sqrt_beta1 * (
        2.0 / sqrt_beta1 + np.sqrt(1.0 + 4.0 / sqrt_beta1**2)
    )
    term1 = 1.0 - 2.0 / (9.0 * a)
    denom = 1.0 + xx * np.sqrt(2.0 / (a - 4.0))
    term2 = np.sign(denom) * np.cbrt((1.0 - 2.0 / a) / np.abs(denom))
    return float((term1 - term2) / np.sqrt(2.0 / (9.0 * a)))


def normality_test(samples) -> tuple:
    """D'Agostino-Pearson omnibus test: K2 = Z1^2 + Z2^2 against chi^2(2).

    Requires at least 20 samples; the chi-square survival function with two
    degrees of freedom is exp(-K2 / 2).
    """
    x = np.asarray(samples, dtype=float).ravel()
    if x.shape[0] < NORMALITY_MIN_SAMPLES:
        raise InsufficientSamplesError(
            f"normality test needs at least {NORMALITY_MIN_SAMPLES} samples, "
            f"got {x.shape[0]}"
        )
    z1 = _skewness_statistic(x)
    z2 = _kurtosis_statistic(x)
    k2 = z1**2 + z2**2
    p = float(np.exp(-0.5 * k2))
    return float(k2), p


def normality_sweep(store, model=None) -> NormalityReport:
    """Omnibus test on every scalar state x_t^(k) and inducing value.

    With a model supplied, the whitened draws are mapped back to inducing
    values u = m_Z + L_Z v before testing, which is the quantity of interest
    when asking whether the function posterior itself looks Gaussian;
    otherwise the whitened coordinates are tested directly.
    """
    S = len(store)
    if S < NORMALITY_MIN_SAMPLES:
        raise InsufficientSamplesError(
            f"normality sweep needs at least {NORMALITY_MIN_SAMPLES} draws, got {S}"
        )
    states = np.stack([d.states for d in store.draws])  # (S, T+1, d_x)
    rows = []
    n_reject_state = 0
    for t in range(states.shape[1]):
        for k in range(states.shape[2]):
            k2, p = normality_test(states[:, t, k])
            rows.append(NormalityRow("state", t, k, k2, p))
            n_reject_state += p < 0.05
    n_state = states.shape[1] * states.shape[2]

    inducing = np.stack([d.v for d in store.draws])  # (S, d_x, M)
    if model is not None:
        inducing = np.stack([
            unwhiten(model, WhitenedInducing(v=d.v)) for d in store.draws
        ])
    n_reject_ind = 0
    for m in range(inducing.shape[2]):
        for k in range(inducing.shape[1]):
            k2, p = normality_test(inducing[:, k, m])
            rows.append(NormalityRow("inducing", m, k, k2, p))
            n_reject_ind += p < 0.05
    n_ind = inducing.shape[1] * inducing.shape[2]
    return NormalityReport(
        rows=tuple(rows),
        state_rejection_fraction=n_reject_state / n_state,
        inducing_rejection_fraction=n_reject_ind / n_ind,
    )


@dataclass(frozen=True)
class TraceSummary:
    iterations_to_threshold: int | None
    final_moving_average: float


def moving_average(values, window: int = MOVING_AVERAGE_WINDOW) -> np.ndarray:
    """Trailing moving average; entry i averages values[i-window+1 .. i].

    Only defined from index window-1 on; earlier entries are dropped, so the
    returned array has len(values) - window + 1 entries.
    """
    values = np.asarray(values, dtype=float)
    if values.size < window:
        window = values.size
    c = np.concatenate([[0.0], np.cumsum(values)])
    return (c[window:] - c[:-window]) / window


def trace_summary(trace_values, threshold: float,
                  window: int = MOVING_AVERAGE_WINDOW) -> TraceSummary:
    """First iteration whose trailing moving average exceeds the threshold,
    plus the final moving average.  Iterations are 1-based, so a constant
    trace above the threshold crosses at iteration ``window``."""
    values = np.asarray(trace_values, dtype=float)
    if values.size == 0:
        raise ValueError("empty trace")
    window = min(window, values.size)
    ma = moving_average(values, window)
    above = np.nonzero(ma > threshold)[0]
    crossing = int(above[0]) + window if above.size else None
    return TraceSummary(
        iterations_to_threshold=crossing,
        final_moving_average=float(ma[-1]),
    )
