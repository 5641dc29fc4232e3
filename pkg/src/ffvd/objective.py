"""The three log-density targets and their gradients.

Targets
-------
* ``log_q_joint``: the whitened joint target over (v, x_{0:T}),

      log N(v; 0, I) + log p(x_0)
      + sum_t [ log p(y_t | x_t)
                + sum_k log N(x_t^k; x_{t-1}^k + A~_k(x~_{t-1}) v_k, Q_k)
                - B_k(x~_{t-1}) / (2 Q_k) ]

  with A~_k(x~) = k_k(x~, Z) L_k^{-T} and B_k the sparse conditional
  variance.
* ``log_q_collapsed``: the marginal over trajectories after integrating the
  whitened inducing variables out analytically; per dimension this adds
  0.5 log det H_k + 0.5 x~_k^T H_k x~_k on top of the mean-function
  random-walk transitions, where

      H_k = (I + sum_t A~_k^T A~_k / Q_k)^{-1},
      x~_k = sum_t A~_k^T (x_t^k - x_{t-1}^k) / Q_k.

* ``sample_conditional_inducing``: draws from the closed-form conditional
  q(v_k | x_{0:T}) = N(g_k, H_k) with g_k = H_k x~_k.

Gradients are analytic (chain rule through the kernel, the triangular
solves, and the collapsed statistics, including reverse-mode differentiation
of the Cholesky factorization); ``finite_difference_grad`` exists for
testing only.  All functions are pure; evaluation over independent
(trajectory, v) points may run concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np
from scipy.linalg import solve_triangular

from .errors import NumericalError, ShapeError
from .kernels import KernelParams, cholesky_jittered, gram
from .model import GpssmModel, Trajectory, WhitenedInducing, with_hypers

LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class CollapsedStats:
    """Per-dimension collapsed posterior statistics: conditional mean g,
    covariance H, and the projected residual x~ with g = H x~."""

    g: np.ndarray       # (d_x, M)
    H: np.ndarray       # (d_x, M, M)
    x_proj: np.ndarray  # (d_x, M)


@dataclass
class GradientBundle:
    """Partial derivatives of a target; fields are None when not requested.

    Shapes mirror the primal quantities: states (T+1, d_x), v (d_x, M),
    log_signal_variance (d_x,), log_lengthscales (d_x, D), Z (M, D),
    C (d_y, d_x), d (d_y,), log_R (d_y,), log_Q (d_x,), x0_mean (d_x,).
    """

    states: np.ndarray | None = None
    v: np.ndarray | None = None
    log_signal_variance: np.ndarray | None = None
    log_lengthscales: np.ndarray | None = None
    Z: np.ndarray | None = None
    C: np.ndarray | None = None
    d: np.ndarray | None = None
    log_R: np.ndarray | None = None
    log_Q: np.ndarray | None = None
    x0_mean: np.ndarray | None = None

    def add(self, other: "GradientBundle") -> "GradientBundle":
        """Field-wise sum, treating None as absent."""
        out = GradientBundle()
        for f in fields(self):
            a = getattr(self, f.name)
            b = getattr(other, f.name)
            if a is None:
                setattr(out, f.name, None if b is None else b.copy())
            elif b is None:
                setattr(out, f.name, a.copy())
            else:
                setattr(out, f.name, a + b)
        return out

    def check_finite(self):
        for f in fields(self):
            arr = getattr(self, f.name)
            if arr is not None and not np.all(np.isfinite(arr)):
                bad = np.argwhere(~np.isfinite(np.atleast_1d(arr)))[0]
                raise NumericalError(
                    f"non-finite gradient in {f.name} at coordinate {tuple(bad)}"
                )
        return self


def _phi_lower_half_diag(A: np.ndarray) -> np.ndarray:
    out = np.tril(A)
    np.fill_diagonal(out, 0.5 * np.diag(A))
    return out


def _cholesky_reverse(L: np.ndarray, L_bar: np.ndarray) -> np.ndarray:
    """Adjoint of K -> chol(K): returns K_bar given L_bar.

    Uses K_bar = 0.5 (W + W^T) with W = L^{-T} Phi(L^T L_bar) L^{-1} and
    Phi the lower-triangle-with-halved-diagonal projection.
    """
    P = _phi_lower_half_diag(L.T @ L_bar)
    U = solve_triangular(L, P, lower=True, trans="T")        # L^{-T} P
    W = solve_triangular(L, U.T, lower=True, trans="T").T    # U L^{-1}
    return 0.5 * (W + W.T)


def _check_shapes(model: GpssmModel, traj: Trajectory, v, obs):
    obs = np.asarray(obs, dtype=float)
    if traj.states.shape[1] != model.d_x:
        raise ShapeError("trajectory latent dimension does not match the model")
    if traj.controls.shape[1] != model.d_a:
        raise ShapeError("trajectory control dimension does not match the model")
    if obs.shape != (traj.T, model.d_y):
        raise ShapeError(
            f"observations must be (T, d_y) = ({traj.T}, {model.d_y}), "
            f"got {obs.shape}"
        )
    if v is not None and v.v.shape != (model.d_x, model.M):
        raise ShapeError("whitened inducing values do not match the model")
    return obs


def _evaluate(model, traj, v, obs, collapsed, grad_groups=()):
    """Single forward (and optional backward) pass shared by all targets.

    grad_groups is a subset of {"states", "v", "hypers"}.  Returns
    (value, bundle_or_None, aux) where aux carries the training
    log-likelihood term and, for the collapsed target, the per-dimension
    (g, H, x_proj) statistics.
    """
    obs = _check_shapes(model, traj, v, obs)
    want_states = "states" in grad_groups
    want_v = "v" in grad_groups
    want_hypers = "hypers" in grad_groups
    want_grad = bool(grad_groups)

    X = traj.states
    T = traj.T
    d_x, d_y, M = model.d_x, model.d_y, model.M
    X_in = traj.transition_inputs()
    D = X_in.shape[1]

    terms = {}
    # initial-state prior
    z0 = X[0] - model.x0_mean
    terms["x0_prior"] = -0.5 * np.sum(
        np.log(2.0 * np.pi * model.x0_var) + z0**2 / model.x0_var
    )
    # observation likelihood
    E = obs - X[1:] @ model.C.T - model.d
    loglik_t = -0.5 * np.sum(np.log(2.0 * np.pi * model.R) + E**2 / model.R, axis=1)
    terms["likelihood"] = float(np.sum(loglik_t))

    bundle = GradientBundle() if want_grad else None
    if want_grad:
        dX = np.zeros_like(X)
        dX[0] += -z0 / model.x0_var
        W_lik = E / model.R
        dX[1:] += W_lik @ model.C
        if want_v:
            bundle.v = np.zeros((d_x, M))
        if want_hypers:
            bundle.C = W_lik.T @ X[1:]
            bundle.d = W_lik.sum(axis=0)
            bundle.log_R = np.sum(-0.5 + E**2 / (2.0 * model.R), axis=0)
            bundle.log_Q = np.zeros(d_x)
            bundle.log_signal_variance = np.zeros(d_x)
            bundle.log_lengthscales = np.zeros((d_x, D))
            bundle.Z = np.zeros((M, D))
            bundle.x0_mean = z0 / model.x0_var

    stats_g = np.empty((d_x, M)) if collapsed else None
    stats_H = np.empty((d_x, M, M)) if collapsed else None
    stats_xp = np.empty((d_x, M)) if collapsed else None

    value = terms["x0_prior"] + terms["likelihood"]
    if not collapsed:
        value += -0.5 * float(np.sum(v.v**2)) - 0.5 * d_x * M * LOG_2PI

    for k in range(d_x):
        kern = model.kernels[k]
        cache = model.caches[k]
        Q_k = model.Q[k]
        sig2 = kern.signal_variance
        ell2 = kern.lengthscales**2

        Kxz = gram(kern, X_in, model.Z)                       # (T, M)
        half = solve_triangular(cache.L_Z, Kxz.T, lower=True)  # L^{-1} Kzx
        At = half.T                                            # Kxz L^{-T}
        Bt = np.maximum(sig2 - np.sum(At * At, axis=1), 0.0)
        r = X[1:, k] - X[:-1, k]

        trace_term = -float(np.sum(Bt)) / (2.0 * Q_k)
        if not collapsed:
            e = (r - At @ v.v[k]) / Q_k
            trans_term = (
                -0.5 * T * np.log(2.0 * np.pi * Q_k)
                - 0.5 * Q_k * float(e @ e)
            )
            terms[f"transition_dim{k}"] = trans_term + trace_term
            value += trans_term + trace_term
        else:
            trans_term = (
                -0.5 * T * np.log(2.0 * np.pi * Q_k)
                - float(r @ r) / (2.0 * Q_k)
            )
            P = np.eye(M) + (At.T @ At) / Q_k
            Lp = np.linalg.cholesky(P)
            x_proj = (At.T @ r) / Q_k
            sol = solve_triangular(Lp, x_proj, lower=True)
            g = solve_triangular(Lp.T, sol, lower=False)
            logdet_H = -2.0 * float(np.sum(np.log(np.diag(Lp))))
            coupling = 0.5 * logdet_H + 0.5 * float(sol @ sol)
            terms[f"transition_dim{k}"] = trans_term + trace_term + coupling
            value += trans_term + trace_term + coupling
            stats_xp[k] = x_proj
            stats_g[k] = g
            H = solve_triangular(
                Lp.T, solve_triangular(Lp, np.eye(M), lower=True), lower=False
            )
            stats_H[k] = 0.5 * (H + H.T)

        if not want_grad:
            continue

        # ----- backward pass for this dimension -----
        if not collapsed:
            r_bar = -e
            A_bar = np.outer(e, v.v[k]) + At / Q_k
            if want_v:
                bundle.v[k] = -v.v[k] + At.T @ e
            if want_hypers:
                bundle.log_Q[k] = (
                    -0.5 * T + 0.5 * Q_k * float(e @ e)
                    + float(np.sum(Bt)) / (2.0 * Q_k)
                )
        else:
            Hg = stats_H[k] + np.outer(g, g)
            r_bar = -r / Q_k + (At @ g) / Q_k
            A_bar = (At + np.outer(r, g) - At @ Hg) / Q_k
            if want_hypers:
                bundle.log_Q[k] = (
                    -0.5 * T
                    + float(r @ r) / (2.0 * Q_k)
                    + float(np.sum(Bt)) / (2.0 * Q_k)
                    + float(np.sum(Hg * (At.T @ At))) / (2.0 * Q_k)
                    - float(g @ x_proj)
                )

        dX[1:, k] += r_bar
        dX[:-1, k] -= r_bar

        # input-side chain through Kxz (L_Z does not depend on the states)
        Kxz_bar = solve_triangular(cache.L_Z, A_bar.T, lower=True, trans="T").T
        W1 = Kxz_bar * Kxz
        rows1 = W1.sum(axis=1)
        dX_in = (W1 @ model.Z - rows1[:, None] * X_in) / ell2
        dX[:-1, :] += dX_in[:, :d_x]

        if want_hypers:
            # chain through L_Z^{-T} and the Cholesky factorization
            Mtmp = A_bar.T @ At
            L_bar = -np.tril(
                solve_triangular(cache.L_Z, Mtmp, lower=True, trans="T")
            )
            Kz_bar = _cholesky_reverse(cache.L_Z, L_bar)
            W2 = Kz_bar * cache.K_Z
            rows2 = W2.sum(axis=1)
            Zcol = model.Z

            bundle.log_signal_variance[k] += (
                float(W1.sum()) + float(W2.sum()) - T * sig2 / (2.0 * Q_k)
            )
            sq_xz = (
                (X_in**2 * rows1[:, None]).sum(axis=0)
                - 2.0 * np.einsum("tj,tj->j", X_in, W1 @ Zcol)
                + (Zcol**2 * W1.sum(axis=0)[:, None]).sum(axis=0)
            )
            sq_zz = 2.0 * (
                (Zcol**2 * rows2[:, None]).sum(axis=0)
                - np.einsum("mj,mj->j", Zcol, W2 @ Zcol)
            )
            bundle.log_lengthscales[k] += (sq_xz + sq_zz) / ell2
            bundle.Z += (W1.T @ X_in - W1.sum(axis=0)[:, None] * Zcol) / ell2
            bundle.Z += 2.0 * (W2 @ Zcol - rows2[:, None] * Zcol) / ell2

    if not np.isfinite(value):
        for name, term in terms.items():
            if not np.isfinite(term):
                raise NumericalError(f"non-finite target: offending term {name}")
        raise NumericalError("non-finite target value")

    aux = {"train_loglik": terms["likelihood"]}
    if collapsed:
        aux["stats"] = CollapsedStats(g=stats_g, H=stats_H, x_proj=stats_xp)
    if want_grad:
        if want_states:
            bundle.states = dX
        bundle.check_finite()
    return float(value), bundle, aux


def log_q_joint(model: GpssmModel, traj: Trajectory, v: WhitenedInducing, obs) -> float:
    """Whitened joint log target over (v, x_{0:T}); unnormalized in the
    trajectory but fully normalized as a density over v."""
    value, _, _ = _evaluate(model, traj, v, obs, collapsed=False)
    return value


def log_q_collapsed(model: GpssmModel, traj: Trajectory, obs) -> float:
    """Collapsed log target over trajectories with v integrated out."""
    value, _, _ = _evaluate(model, traj, None, obs, collapsed=True)
    return value


def collapsed_stats(model: GpssmModel, traj: Trajectory) -> CollapsedStats:
    """Conditional statistics (g, H, x~) of q(v | x_{0:T}) per dimension."""
    T = traj.T
    dummy_obs = np.zeros((T, model.d_y))
    _, _, aux = _evaluate(model, traj, None, dummy_obs, collapsed=True)
    return aux["stats"]


def sample_conditional_inducing(model: GpssmModel, traj: Trajectory, rng) -> WhitenedInducing:
    """Draw v ~ prod_k N(v_k; g_k, H_k) given a trajectory."""
    stats = collapsed_stats(model, traj)
    v = np.empty((model.d_x, model.M))
    for k in range(model.d_x):
        L = cholesky_jittered(stats.H[k])
        v[k] = stats.g[k] + L @ rng.standard_normal(model.M)
    return WhitenedInducing(v=v)


def value_and_grad(model, traj, v, obs, objective: str, grad_groups=("states",)):
    """Evaluate the selected target and its gradients in one pass.

    objective is "joint" or "collapsed"; grad_groups is a subset of
    {"states", "v", "hypers"}.  Returns (value, GradientBundle, aux).
    """
    if objective == "joint":
        if v is None:
            raise ValueError("the joint target requires v")
        return _evaluate(model, traj, v, obs, collapsed=False, grad_groups=grad_groups)
    if objective == "collapsed":
        groups = tuple(g for g in grad_groups if g != "v")
        return _evaluate(model, traj, None, obs, collapsed=True, grad_groups=groups)
    raise ValueError(f"unknown objective {objective!r}")


def grad(objective: str, model, traj, v, obs, grad_groups=("states", "v", "hypers")):
    """Analytic gradients of the selected target; see value_and_grad."""
    _, bundle, _ = value_and_grad(model, traj, v, obs, objective, grad_groups)
    return bundle


def log_hyper_prior(model: GpssmModel) -> float:
    """Standard-normal log prior over C, d, (1/2) log R and log Q entries.

    The initial-state prior is part of the sampling targets, not of this
    term, and the kernel hyperparameters and Z carry no prior.
    """
    coords = np.concatenate([
        model.C.ravel(),
        model.d,
        0.5 * np.log(model.R),
        np.log(model.Q),
    ])
    return float(-0.5 * np.sum(coords**2) - 0.5 * coords.size * LOG_2PI)


def hyper_prior_grad(model: GpssmModel) -> GradientBundle:
    """Gradient of :func:`log_hyper_prior` w.r.t. the log-parameterized
    hyperparameters, with zeros for the prior-free kernel groups."""
    D = model.Z.shape[1]
    return GradientBundle(
        C=-model.C.copy(),
        d=-model.d.copy(),
        log_R=-0.25 * np.log(model.R),
        log_Q=-np.log(model.Q),
        log_signal_variance=np.zeros(model.d_x),
        log_lengthscales=np.zeros((model.d_x, D)),
        Z=np.zeros((model.M, D)),
    )


# ---------------------------------------------------------------------------
# Finite-difference fallback (testing only)
# ---------------------------------------------------------------------------

def apply_hyper_perturbation(model: GpssmModel, name: str, delta: np.ndarray) -> GpssmModel:
    """Additively perturb one log-parameterized hyperparameter group."""
    if name == "log_signal_variance":
        kernels = tuple(
            KernelParams(
                signal_variance=float(np.exp(np.log(k.signal_variance) + delta[i])),
                lengthscales=k.lengthscales,
            )
            for i, k in enumerate(model.kernels)
        )
        return with_hypers(model, kernels=kernels)
    if name == "log_lengthscales":
        kernels = tuple(
            KernelParams(
                signal_variance=k.signal_variance,
                lengthscales=np.exp(np.log(k.lengthscales) + delta[i]),
            )
            for i, k in enumerate(model.kernels)
        )
        return with_hypers(model, kernels=kernels)
    if name == "Z":
        return with_hypers(model, Z=model.Z + delta)
    if name == "C":
        return with_hypers(model, C=model.C + delta)
    if name == "d":
        return with_hypers(model, d=model.d + delta)
    if name == "log_R":
        return with_hypers(model, R=np.exp(np.log(model.R) + delta))
    if name == "log_Q":
        return with_hypers(model, Q=np.exp(np.log(model.Q) + delta))
    if name == "x0_mean":
        return with_hypers(model, x0_mean=model.x0_mean + delta)
    raise ValueError(f"unknown hyperparameter group {name!r}")


def finite_difference_grad(objective, model, traj, v, obs, group, rel_step=1e-5):
    """Central finite differences of the selected target w.r.t. one group.

    Testing fallback only; the analytic path is :func:`grad`.
    """

    def evaluate(m, states, vv):
        t = Trajectory(states=states, controls=traj.controls)
        if objective == "joint":
            return log_q_joint(m, t, vv, obs)
        return log_q_collapsed(m, t, obs)

    def shaped(name):
        if name == "states":
            return traj.states
        if name == "v":
            return v.v
        if name == "log_signal_variance":
            return np.zeros(model.d_x)
        if name == "log_lengthscales":
            return np.zeros((model.d_x, model.Z.shape[1]))
        if name == "Z":
            return np.zeros_like(model.Z)
        if name == "C":
            return np.zeros_like(model.C)
        if name == "d":
            return np.zeros_like(model.d)
        if name == "log_R":
            return np.zeros(model.d_y)
        if name == "log_Q":
            return np.zeros(model.d_x)
        if name == "x0_mean":
            return np.zeros(model.d_x)
        raise ValueError(name)

    base = shaped(group)
    out = np.zeros_like(base, dtype=float)
    it = np.nditer(base, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        scale = max(abs(float(base[idx])), 1.0)
        h = rel_step * scale
        delta = np.zeros_like(base)
        delta[idx] = h
        if group == "states":
            f_plus = evaluate(model, traj.states + delta, v)
            f_minus = evaluate(model, traj.states - delta, v)
        elif group == "v":
            f_plus = evaluate(model, traj.states, WhitenedInducing(v.v + delta))
            f_minus = evaluate(model, traj.states, WhitenedInducing(v.v - delta))
        else:
            f_plus = evaluate(apply_hyper_perturbation(model, group, delta), traj.states, v)
            f_minus = evaluate(apply_hyper_perturbation(model, group, -delta), traj.states, v)
        out[idx] = (f_plus - f_minus) / (2.0 * h)
        it.iternext()
    return out
