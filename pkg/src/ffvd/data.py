"""Synthetic data generation, benchmark CSV ingestion, standardization, and
train/test splitting.

Dataset CSV schema: header ``y0..y{d_y-1},a0..a{d_a-1}``, one row per time
step, UTF-8, decimal point.  Control alignment follows the package
convention that a_t is the input active during the transition from x_{t-1}
to x_t; loaders expose ``shift_controls`` for files using the opposite
convention.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace

import numpy as np

from .errors import DataError
from .kernels import KernelParams
from .model import GpssmModel, Trajectory, WhitenedInducing, make_model, sample_generative, whiten
from .evaluation import PredictiveSummary

SYNTHETIC_SIGNAL_VARIANCE = 2.0
SYNTHETIC_LENGTHSCALE = 0.5
SYNTHETIC_PROCESS_VARIANCE = 0.01
SYNTHETIC_OBS_VARIANCE = 0.01
SYNTHETIC_NUM_INDUCING = 20
SYNTHETIC_INDUCING_INTERVAL = (-2.0, 2.0)
SYNTHETIC_TRAIN_LEN = 120
SYNTHETIC_TEST_LEN = 30


@dataclass(frozen=True)
class Standardization:
    """Per-column training-portion means and stds for y and a."""

    y_mean: np.ndarray
    y_std: np.ndarray
    a_mean: np.ndarray
    a_std: np.ndarray


@dataclass(frozen=True)
class Dataset:
    """Observations y (T, d_y), controls a (T, d_a) and the train/test split."""

    y: np.ndarray
    a: np.ndarray
    train_len: int
    standardization: Standardization | None = None
    name: str = ""

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        if y.ndim == 1:
            y = y[:, None]
        a = np.asarray(self.a, dtype=float)
        if a.ndim == 1:
            a = a[:, None]
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "a", a)
        if y.shape[0] != a.shape[0]:
            raise DataError("y and a must have the same number of rows")
        if not (1 <= self.train_len <= y.shape[0]):
            raise DataError(
                f"train_len {self.train_len} out of range for T = {y.shape[0]}"
            )
        if not np.all(np.isfinite(y)) or not np.all(np.isfinite(a)):
            raise DataError("dataset contains non-finite values")

    @property
    def T(self) -> int:
        return self.y.shape[0]

    @property
    def d_y(self) -> int:
        return self.y.shape[1]

    @property
    def d_a(self) -> int:
        return self.a.shape[1]

    @property
    def test_len(self) -> int:
        return self.T - self.train_len


@dataclass(frozen=True)
class SyntheticTruth:
    """Ground truth of a synthetic run: the generating model, the latent
    trajectory, the inducing values drawn once, and a transition-mean
    handle."""

    model: GpssmModel
    trajectory: Trajectory
    u: np.ndarray
    v: WhitenedInducing

    def transition_mean(self, x):
        """True transition mean function at scalar or vector input x."""
        from .model import transition_moments

        x = np.atleast_1d(np.asarray(x, dtype=float))
        pts = x.reshape(-1, 1)
        means, _ = transition_moments(self.model, pts, None, self.v)
        return means[:, 0]


def synthetic_model() -> GpssmModel:
    """The generating sparse GPSSM with the fixed synthetic constants."""
    lo, hi = SYNTHETIC_INDUCING_INTERVAL
    Z = np.linspace(lo, hi, SYNTHETIC_NUM_INDUCING)[:, None]
    kern = KernelParams(
        signal_variance=SYNTHETIC_SIGNAL_VARIANCE,
        lengthscales=np.array([SYNTHETIC_LENGTHSCALE]),
    )
    return make_model(
        kernels=(kern,),
        Z=Z,
        Q=np.array([SYNTHETIC_PROCESS_VARIANCE]),
        C=np.array([[1.0]]),
        d=np.array([0.0]),
        R=np.array([SYNTHETIC_OBS_VARIANCE]),
        x0_mean=np.zeros(1),
        x0_var=np.ones(1),
    )


def generate_synthetic(seed: int):
    """Draw one synthetic dataset: u ~ N(m_Z, K_Z) once, then simulate
    120 training plus 30 held-out steps of states and observations.

    Returns (Dataset, SyntheticTruth); the dataset's train_len is 120.
    """
    model = synthetic_model()
    rng = np.random.default_rng(seed)
    cache = model.caches[0]
    u = cache.m_Z + cache.L_Z @ rng.standard_normal(model.M)
    v = whiten(model, u[None, :])
    T_total = SYNTHETIC_TRAIN_LEN + SYNTHETIC_TEST_LEN
    traj, obs = sample_generative(model, v, None, T_total, rng)
    dataset = Dataset(
        y=obs,
        a=np.zeros((T_total, 0)),
        train_len=SYNTHETIC_TRAIN_LEN,
        name=f"synthetic-seed{seed}",
    )
    truth = SyntheticTruth(model=model, trajectory=traj, u=u, v=v)
    return dataset, truth


def synthetic_config(seed: int) -> dict:
    """The constants a synthetic run is generated from, for emission."""
    lo, hi = SYNTHETIC_INDUCING_INTERVAL
    return {
        "signal_variance": SYNTHETIC_SIGNAL_VARIANCE,
        "lengthscale": SYNTHETIC_LENGTHSCALE,
        "Q": SYNTHETIC_PROCESS_VARIANCE,
        "R": SYNTHETIC_OBS_VARIANCE,
        "M": SYNTHETIC_NUM_INDUCING,
        "T": SYNTHETIC_TRAIN_LEN,
        "T_total": SYNTHETIC_TRAIN_LEN + SYNTHETIC_TEST_LEN,
        "inducing_interval": [lo, hi],
        "d_x": 1,
        "seed": seed,
    }


def load_csv(path, d_y: int, d_a: int, train_len: int,
             shift_controls: bool = False, name: str = "") -> Dataset:
    """Parse a dataset CSV with header ``y0..y{d_y-1},a0..a{d_a-1}``.

    With ``shift_controls`` the control column is rolled one step later, for
    files where a_t drives the transition into x_{t+1} rather than x_t.
    """
    expected = [f"y{i}" for i in range(d_y)] + [f"a{i}" for i in range(d_a)]
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot open {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path} is empty") from None
        header = [h.strip() for h in header]
        if header != expected:
            raise DataError(
                f"{path}: header {header} does not match schema {expected}"
            )
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(expected):
                raise DataError(f"{path}:{lineno}: expected {len(expected)} cells")
            parsed = []
            for col, cell in zip(expected, row):
                try:
                    value = float(cell)
                except ValueError:
                    raise DataError(
                        f"{path}:{lineno}: non-numeric cell in column {col}"
                    ) from None
                if not np.isfinite(value):
                    raise DataError(
                        f"{path}:{lineno}: non-finite cell in column {col}"
                    )
                parsed.append(value)
            rows.append(parsed)
    if not rows:
        raise DataError(f"{path} has no data rows")
    arr = np.asarray(rows, dtype=float)
    y = arr[:, :d_y]
    a = arr[:, d_y:]
    if shift_controls and d_a > 0:
        shifted = np.empty_like(a)
        shifted[1:] = a[:-1]
        shifted[0] = a[0]
        a = shifted
    if train_len > arr.shape[0]:
        raise DataError(
            f"train_len {train_len} exceeds the {arr.shape[0]} rows in {path}"
        )
    return Dataset(y=y, a=a, train_len=train_len, name=name or str(path))


def save_csv(dataset: Dataset, path):
    """Write a dataset back out in the schema ``load_csv`` reads."""
    header = [f"y{i}" for i in range(dataset.d_y)] + [
        f"a{i}" for i in range(dataset.d_a)
    ]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for t in range(dataset.T):
            writer.writerow(
                [repr(float(x)) for x in dataset.y[t]]
                + [repr(float(x)) for x in dataset.a[t]]
            )


def standardize(dataset: Dataset) -> Dataset:
    """Subtract the training-portion mean and divide by the training-portion
    std, per column of y and a; statistics are stored for inversion."""
    y_train = dataset.y[: dataset.train_len]
    a_train = dataset.a[: dataset.train_len]
    y_std = y_train.std(axis=0)
    a_std = a_train.std(axis=0)
    if np.any(y_std <= 0.0) or np.any(a_std <= 0.0):
        raise DataError("cannot standardize a zero-variance column")
    stats = Standardization(
        y_mean=y_train.mean(axis=0),
        y_std=y_std,
        a_mean=a_train.mean(axis=0) if dataset.d_a else np.zeros(0),
        a_std=a_std if dataset.d_a else np.ones(0),
    )
    return replace(
        dataset,
        y=(dataset.y - stats.y_mean) / stats.y_std,
        a=(dataset.a - stats.a_mean) / stats.a_std if dataset.d_a else dataset.a,
        standardization=stats,
    )


def unstandardize_predictions(summary: PredictiveSummary,
                              stats: Standardization) -> PredictiveSummary:
    """Affine inverse on predictive means; stds scale by the column std."""
    return PredictiveSummary(
        means=summary.means * stats.y_std + stats.y_mean,
        stds=summary.stds * stats.y_std,
    )
