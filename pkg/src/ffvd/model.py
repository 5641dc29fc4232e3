"""GPSSM parameterization, whitening, transition predictive, generative
sampling, and data-driven initialization.

The model is immutable after construction: hyperparameter updates build a new
model via :func:`with_hypers`, which also refreshes the per-dimension gram
caches.  The mean function is the identity on the latent coordinates, so for
an augmented input [x; a] the d-th transition mean offset is x_d and control
coordinates contribute only through the kernel.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np
from scipy.linalg import solve_triangular

from .errors import InitializationError, ShapeError
from .kernels import GramCache, KernelParams, build_gram_cache, gram

CHECKPOINT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class GpssmModel:
    """All model parameters of the sparse GPSSM.

    One SE-ARD kernel per latent dimension, a shared set of inducing inputs
    Z of shape (M, d_x + d_a), diagonal process variances Q (length d_x),
    a linear-Gaussian likelihood y ~ N(C x + d, diag R), and a diagonal
    Gaussian prior on the initial state.
    """

    kernels: tuple
    Z: np.ndarray
    caches: tuple
    Q: np.ndarray
    C: np.ndarray
    d: np.ndarray
    R: np.ndarray
    x0_mean: np.ndarray
    x0_var: np.ndarray

    @property
    def d_x(self) -> int:
        return len(self.kernels)

    @property
    def d_a(self) -> int:
        return self.Z.shape[1] - self.d_x

    @property
    def d_y(self) -> int:
        return self.C.shape[0]

    @property
    def M(self) -> int:
        return self.Z.shape[0]


@dataclass(frozen=True)
class Trajectory:
    """Latent states x_{0:T} of shape (T+1, d_x) plus aligned controls of
    shape (T, d_a); control a_t enters the transition producing x_t."""

    states: np.ndarray
    controls: np.ndarray

    def __post_init__(self):
        states = np.asarray(self.states, dtype=float)
        controls = np.asarray(self.controls, dtype=float)
        if states.ndim != 2 or controls.ndim != 2:
            raise ShapeError("states and controls must be 2-D arrays")
        if states.shape[0] != controls.shape[0] + 1:
            raise ShapeError(
                f"states must have one more row than controls, got "
                f"{states.shape[0]} and {controls.shape[0]}"
            )
        if states.shape[0] < 2:
            raise ShapeError("a trajectory needs at least one transition")
        if not np.all(np.isfinite(states)) or not np.all(np.isfinite(controls)):
            raise ShapeError("trajectory contains non-finite entries")
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "controls", controls)

    @property
    def T(self) -> int:
        return self.controls.shape[0]

    def transition_inputs(self) -> np.ndarray:
        """Stacked [x_{t-1}; a_t] rows, shape (T, d_x + d_a)."""
        return np.concatenate([self.states[:-1], self.controls], axis=1)


@dataclass(frozen=True)
class WhitenedInducing:
    """One whitened inducing vector per output dimension, shape (d_x, M)."""

    v: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.v, dtype=float)
        if v.ndim != 2:
            raise ShapeError("v must be a (d_x, M) matrix")
        if not np.all(np.isfinite(v)):
            raise ShapeError("whitened inducing values contain non-finite entries")
        object.__setattr__(self, "v", v)


def make_model(kernels, Z, Q, C, d, R, x0_mean=None, x0_var=None) -> GpssmModel:
    """Build a model, constructing the gram caches from (kernels, Z).

    The identity mean function at the inducing inputs is the latent block of
    Z, so m_Z for dimension k is Z[:, k].
    """
    kernels = tuple(kernels)
    Z = np.asarray(Z, dtype=float)
    d_x = len(kernels)
    if Z.ndim != 2 or Z.shape[1] < d_x:
        raise ShapeError("Z must be (M, d_x + d_a) with d_a >= 0")
    Q = np.asarray(Q, dtype=float).ravel()
    R = np.asarray(R, dtype=float).ravel()
    C = np.atleast_2d(np.asarray(C, dtype=float))
    d = np.asarray(d, dtype=float).ravel()
    if Q.shape[0] != d_x or np.any(Q <= 0.0):
        raise ValueError("Q must be d_x positive process variances")
    if np.any(R <= 0.0):
        raise ValueError("R must be positive observation variances")
    if C.shape != (R.shape[0], d_x) or d.shape[0] != R.shape[0]:
        raise ShapeError("C, d, R are inconsistent with d_x / d_y")
    x0_mean = np.zeros(d_x) if x0_mean is None else np.asarray(x0_mean, dtype=float)
    x0_var = np.ones(d_x) if x0_var is None else np.asarray(x0_var, dtype=float)
    if x0_mean.shape != (d_x,) or x0_var.shape != (d_x,) or np.any(x0_var <= 0):
        raise ValueError("x0 prior must be a diagonal Gaussian over d_x dims")
    caches = tuple(
        build_gram_cache(kernels[k], Z, Z[:, k]) for k in range(d_x)
    )
    return GpssmModel(
        kernels=kernels, Z=Z, caches=caches, Q=Q, C=C, d=d, R=R,
        x0_mean=x0_mean, x0_var=x0_var,
    )


def with_hypers(model: GpssmModel, kernels=None, Z=None, Q=None, C=None,
                d=None, R=None, x0_mean=None) -> GpssmModel:
    """Functional update of hyperparameters; rebuilds caches when the
    kernels or inducing inputs change."""
    new_kernels = tuple(kernels) if kernels is not None else model.kernels
    new_Z = np.asarray(Z, dtype=float) if Z is not None else model.Z
    if kernels is not None or Z is not None:
        caches = tuple(
            build_gram_cache(new_kernels[k], new_Z, new_Z[:, k])
            for k in range(len(new_kernels))
        )
    else:
        caches = model.caches
    return replace(
        model,
        kernels=new_kernels,
        Z=new_Z,
        caches=caches,
        Q=model.Q if Q is None else np.asarray(Q, dtype=float),
        C=model.C if C is None else np.asarray(C, dtype=float),
        d=model.d if d is None else np.asarray(d, dtype=float),
        R=model.R if R is None else np.asarray(R, dtype=float),
        x0_mean=model.x0_mean if x0_mean is None else np.asarray(x0_mean, dtype=float),
    )


def whiten(model: GpssmModel, u) -> WhitenedInducing:
    """Map inducing values u (d_x, M) to whitened coordinates
    v = L_Z^{-1}(u - m_Z), per output dimension."""
    u = np.atleast_2d(np.asarray(u, dtype=float))
    if u.shape != (model.d_x, model.M):
        raise ShapeError(f"u must be (d_x, M) = ({model.d_x}, {model.M})")
    v = np.empty_like(u)
    for k in range(model.d_x):
        cache = model.caches[k]
        v[k] = solve_triangular(cache.L_Z, u[k] - cache.m_Z, lower=True)
    return WhitenedInducing(v=v)


def unwhiten(model: GpssmModel, v: WhitenedInducing) -> np.ndarray:
    """Inverse of :func:`whiten`: u = m_Z + L_Z v per output dimension."""
    out = np.empty_like(v.v)
    for k in range(model.d_x):
        cache = model.caches[k]
        out[k] = cache.m_Z + cache.L_Z @ v.v[k]
    return out


def transition_moments(model: GpssmModel, x_prev, controls, v: WhitenedInducing):
    """Per-dimension Gaussian transition moments for a batch of inputs.

    x_prev has shape (n, d_x) and controls shape (n, d_a) or None when
    d_a = 0.  Returns means and variances, both (n, d_x), with
    mean_k = x_prev[:, k] + k_k(x~, Z) L_k^{-T} v_k and
    var_k = B_k(x~) + Q_k.
    """
    x_prev = np.atleast_2d(np.asarray(x_prev, dtype=float))
    n = x_prev.shape[0]
    if controls is None:
        controls = np.zeros((n, model.d_a))
    controls = np.atleast_2d(np.asarray(controls, dtype=float))
    x_in = np.concatenate([x_prev, controls], axis=1)
    means = np.empty((n, model.d_x))
    variances = np.empty((n, model.d_x))
    for k in range(model.d_x):
        cache = model.caches[k]
        k_xz = gram(model.kernels[k], x_in, model.Z)  # (n, M)
        half = solve_triangular(cache.L_Z, k_xz.T, lower=True)  # (M, n)
        proj = solve_triangular(cache.L_Z.T, v.v[k], lower=False)  # L^{-T} v
        means[:, k] = x_prev[:, k] + k_xz @ proj
        B = model.kernels[k].signal_variance - np.sum(half * half, axis=0)
        variances[:, k] = np.maximum(B, 0.0) + model.Q[k]
    return means, variances


def transition_predictive(model: GpssmModel, x_prev, a, v: WhitenedInducing):
    """One-step transition predictive at a single input; returns
    (mean, variance) vectors of length d_x."""
    x_prev = np.asarray(x_prev, dtype=float).ravel()
    ctrl = None if model.d_a == 0 else np.asarray(a, dtype=float).reshape(1, -1)
    means, variances = transition_moments(model, x_prev[None, :], ctrl, v)
    return means[0], variances[0]


def log_likelihood_obs(model: GpssmModel, x, y) -> float:
    """Gaussian observation log-density log N(y; C x + d, diag R)."""
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    if x.shape[0] != model.d_x or y.shape[0] != model.d_y:
        raise ShapeError("x or y has the wrong dimension")
    resid = y - model.C @ x - model.d
    return float(
        -0.5 * np.sum(np.log(2.0 * np.pi * model.R) + resid**2 / model.R)
    )


def sample_generative(model: GpssmModel, v: WhitenedInducing, controls, T: int, rng):
    """Simulate the generative process for T steps.

    Draws x_0 from the initial-state prior, each transition from the sparse
    conditional given v, and observations from the linear-Gaussian
    likelihood.  Deterministic given the generator state.
    """
    if T < 1:
        raise ValueError("T must be at least 1")
    if controls is None:
        controls = np.zeros((T, model.d_a))
    controls = np.asarray(controls, dtype=float)
    if controls.shape != (T, model.d_a):
        raise ShapeError(f"controls must be (T, d_a) = ({T}, {model.d_a})")
    states = np.empty((T + 1, model.d_x))
    obs = np.empty((T, model.d_y))
    states[0] = model.x0_mean + np.sqrt(model.x0_var) * rng.standard_normal(model.d_x)
    for t in range(1, T + 1):
        mean, var = transition_predictive(model, states[t - 1], controls[t - 1], v)
        states[t] = mean + np.sqrt(var) * rng.standard_normal(model.d_x)
        obs[t - 1] = (
            model.C @ states[t] + model.d
            + np.sqrt(model.R) * rng.standard_normal(model.d_y)
        )
    return Trajectory(states=states, controls=controls), obs


def _kmeans(points: np.ndarray, k: int, seed: int, n_iters: int = 20) -> np.ndarray:
    """Plain Lloyd iterations with seeded initialization; deterministic."""
    rng = np.random.default_rng(seed)
    n = points.shape[0]
    if k > n:
        raise InitializationError(
            f"cannot place {k} inducing inputs on {n} training pairs"
        )
    centers = points[rng.choice(n, size=k, replace=False)].copy()
    for _ in range(n_iters):
        d2 = np.sum((points[:, None, :] - centers[None, :, :]) ** 2, axis=2)
        assign = np.argmin(d2, axis=1)
        for j in range(k):
            mask = assign == j
            if np.any(mask):
                centers[j] = points[mask].mean(axis=0)
    return centers


def init_from_data(dataset, d_x: int, M: int, seed: int = 0):
    """Deterministic initialization of (model, trajectory, whitened inducing).

    States come from mapping observations through the pseudo-inverse of the
    initial C (the first d_y x d_x block of the identity, d = 0); latent
    dimensions left constant by that map receive small seeded jitter so the
    embedded pairs are non-degenerate.  Z is k-means over the embedded
    [x_{t-1}; a_t] pairs, lengthscales are per-input-dimension standard
    deviations of those pairs, the signal variance is the per-dimension
    variance of the transition targets, and Q = R = 0.1 * data variance.
    """
    y = np.asarray(dataset.y, dtype=float)[: dataset.train_len]
    a = np.asarray(dataset.a, dtype=float)[: dataset.train_len]
    T, d_y = y.shape
    d_a = a.shape[1]
    if T < 2:
        raise InitializationError("need at least 2 training observations")
    y_var = y.var(axis=0)
    if np.any(y_var <= 0.0):
        raise InitializationError("observations have zero variance")

    C = np.eye(d_y, d_x)
    d_vec = np.zeros(d_y)
    states = np.empty((T + 1, d_x))
    states[1:] = y @ np.linalg.pinv(C).T
    states[0] = states[1]
    rng = np.random.default_rng(seed)
    for k in range(d_x):
        if states[:, k].var() == 0.0:
            states[:, k] += 0.1 * rng.standard_normal(T + 1)

    traj = Trajectory(states=states, controls=a)
    pairs = traj.transition_inputs()
    targets = states[1:]
    lengthscales = pairs.std(axis=0)
    lengthscales = np.maximum(lengthscales, 1e-3)
    sig_var = np.maximum(targets.var(axis=0), 1e-4)
    kernels = tuple(
        KernelParams(signal_variance=sig_var[k], lengthscales=lengthscales.copy())
        for k in range(d_x)
    )
    Z = _kmeans(pairs, M, seed=seed)
    Q = np.maximum(0.1 * targets.var(axis=0), 1e-6)
    R = np.maximum(0.1 * y_var, 1e-6)
    model = make_model(kernels, Z, Q, C, d_vec, R)
    v = WhitenedInducing(v=np.zeros((d_x, model.M)))
    return model, traj, v


def save_checkpoint(model: GpssmModel, path):
    """Serialize the model as a flat key-value JSON document."""
    doc = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "d_x": model.d_x,
        "d_a": model.d_a,
        "d_y": model.d_y,
        "M": model.M,
        "signal_variance": [k.signal_variance for k in model.kernels],
        "lengthscales": [k.lengthscales.tolist() for k in model.kernels],
        "Z": model.Z.tolist(),
        "Q": model.Q.tolist(),
        "C": model.C.tolist(),
        "d": model.d.tolist(),
        "R": model.R.tolist(),
        "x0_mean": model.x0_mean.tolist(),
        "x0_var": model.x0_var.tolist(),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path) -> GpssmModel:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    version = doc.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format_version: {version}")
    kernels = tuple(
        KernelParams(signal_variance=s, lengthscales=np.asarray(ls))
        for s, ls in zip(doc["signal_variance"], doc["lengthscales"])
    )
    return make_model(
        kernels=kernels,
        Z=np.asarray(doc["Z"]),
        Q=np.asarray(doc["Q"]),
        C=np.asarray(doc["C"]),
        d=np.asarray(doc["d"]),
        R=np.asarray(doc["R"]),
        x0_mean=np.asarray(doc["x0_mean"]),
        x0_var=np.asarray(doc["x0_var"]),
    )
