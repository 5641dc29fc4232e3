"""SGHMC over (x_{0:T}, v) or collapsed x_{0:T}, interleaved Adam updates for
hyperparameters, and Particle MCMC over trajectories.

A single chain is strictly sequential; multiple chains with distinct seeds
may run concurrently, each owning its generator and model copy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError, WeightCollapseError
from .kernels import KernelParams
from .model import (
    GpssmModel,
    Trajectory,
    WhitenedInducing,
    init_from_data,
    transition_moments,
    with_hypers,
)
from . import objective as obj

VARIANTS = ("ffvd-m", "ffvd-c-m", "ffvd-p")

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
MAX_STEP_HALVINGS = 5


@dataclass(frozen=True)
class SghmcConfig:
    """Settings for the SGHMC chain.

    The discretized underdamped Langevin update with step size eta, friction
    gamma and mass m is

        p   <- (1 - eta * gamma / m) p + eta * grad log q + N(0, 2 eta gamma)
        Psi <- Psi + (eta / m) p

    with no Metropolis correction.  ``mass`` may be a scalar or a mapping
    from coordinate-group name to scalar.
    """

    step_size: float = 0.01
    friction: float = 0.05
    n_iters: int = 1000
    burn_in: int = 0
    thin: int = 1
    mass: float | dict = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.step_size <= 0 or self.friction <= 0:
            raise ValueError("step_size and friction must be positive")
        if self.step_size * self.friction >= 1.0:
            raise ValueError("require step_size * friction < 1")
        if not 0 <= self.burn_in < self.n_iters:
            raise ValueError("require 0 <= burn_in < n_iters")
        if self.thin < 1:
            raise ValueError("thin must be at least 1")

    def mass_for(self, key: str) -> float:
        if isinstance(self.mass, dict):
            return float(self.mass.get(key, 1.0))
        return float(self.mass)

    @property
    def n_draws(self) -> int:
        return (self.n_iters - self.burn_in) // self.thin


@dataclass(frozen=True)
class PmcmcConfig:
    """Conditional SMC settings: S particles, one of them pinned."""

    n_particles: int = 32
    n_sweeps: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.n_particles < 1:
            raise ValueError("need at least one particle")
        if self.n_sweeps < 1:
            raise ValueError("need at least one sweep")


@dataclass
class Draw:
    """One retained posterior draw: raw coordinate arrays plus the target
    value and the iteration it was recorded at."""

    state: dict
    log_target: float
    iteration: int

    @property
    def states(self):
        return self.state.get("states")

    @property
    def v(self):
        return self.state.get("v")


@dataclass
class SampleStore:
    """Retained posterior draws with the variant tag and a config snapshot."""

    draws: list = field(default_factory=list)
    variant: str = ""
    config: dict = field(default_factory=dict)
    controls: np.ndarray | None = None

    def __len__(self):
        return len(self.draws)

    def trajectory(self, i: int) -> Trajectory:
        if self.controls is None:
            raise ValueError("store has no controls; draws are not trajectories")
        return Trajectory(states=self.draws[i].states, controls=self.controls)

    def inducing(self, i: int) -> WhitenedInducing:
        return WhitenedInducing(v=self.draws[i].v)


def sghmc_run(target, init_state: dict, config: SghmcConfig, rng,
              callback=None) -> SampleStore:
    """Run SGHMC on a dict-of-arrays state.

    ``target(state) -> (log_q, grads)`` returns the log density and a dict of
    gradients matching the state keys.  Momentum is drawn at the start and
    redrawn once burn-in ends.  A non-finite evaluation triggers step-size
    halving (retried up to five times across the run) before aborting with
    the iteration index.  Deterministic given the generator.
    """
    state = {k: np.array(a, dtype=float, copy=True) for k, a in init_state.items()}
    keys = list(state.keys())
    mass = {k: config.mass_for(k) for k in keys}
    momentum = {
        k: math.sqrt(mass[k]) * rng.standard_normal(state[k].shape) for k in keys
    }
    log_q, grads = target(state)
    if not np.isfinite(log_q):
        raise NumericalError("target is not finite at the initial state")

    store = SampleStore(variant="sghmc", config={"sghmc": config.__dict__.copy()})
    eta = config.step_size
    gamma = config.friction
    halvings = 0
    it = 1
    while it <= config.n_iters:
        proposal = {}
        new_momentum = {}
        for k in keys:
            m_k = mass[k]
            noise = math.sqrt(2.0 * eta * gamma) * rng.standard_normal(state[k].shape)
            p = (1.0 - eta * gamma / m_k) * momentum[k] + eta * grads[k] + noise
            new_momentum[k] = p
            proposal[k] = state[k] + (eta / m_k) * p
        try:
            finite = all(np.all(np.isfinite(proposal[k])) for k in keys)
            if finite:
                # overflow in a diverging proposal surfaces as a non-finite
                # target, handled below; keep it from warning
                with np.errstate(over="ignore", invalid="ignore"):
                    new_log_q, new_grads = target(proposal)
                finite = np.isfinite(new_log_q)
            else:
                new_log_q = new_grads = None
        except (NumericalError, np.linalg.LinAlgError):
            finite = False
            new_log_q = new_grads = None
        if not finite:
            halvings += 1
            if halvings > MAX_STEP_HALVINGS:
                raise NumericalError(
                    f"sghmc diverged at iteration {it} after "
                    f"{MAX_STEP_HALVINGS} step-size halvings"
                )
            eta *= 0.5
            continue

        state, momentum = proposal, new_momentum
        log_q, grads = new_log_q, new_grads
        if it == config.burn_in:
            momentum = {
                k: math.sqrt(mass[k]) * rng.standard_normal(state[k].shape)
                for k in keys
            }
        if it > config.burn_in and (it - config.burn_in) % config.thin == 0:
            store.draws.append(
                Draw(
                    state={k: state[k].copy() for k in keys},
                    log_target=float(log_q),
                    iteration=it,
                )
            )
        if callback is not None:
            callback(it, state, float(log_q))
        it += 1
    return store


@dataclass
class AdamState:
    """First/second moment accumulators per hyperparameter group."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_learning_rate(lr0: float, decay: float, step: int) -> float:
    return lr0 / (1.0 + decay * step)


def adam_hyper_step(model: GpssmModel, bundle, opt_state: AdamState,
                    lr0: float = 0.01, decay: float = 0.05):
    """One Adam ascent step on the log-parameterized hyperparameters.

    Uses default moment settings (beta1 = 0.9, beta2 = 0.999, eps = 1e-8)
    with learning rate lr0 / (1 + decay * t).  The bundle must already
    contain every gradient contribution (hyper prior included); a zero
    bundle leaves the parameters unchanged while the moments decay.
    Returns the updated model and optimizer state.
    """
    opt_state.t += 1
    lr = adam_learning_rate(lr0, decay, opt_state.t)
    current = {
        "log_signal_variance": np.log(
            np.array([k.signal_variance for k in model.kernels])
        ),
        "log_lengthscales": np.log(
            np.stack([k.lengthscales for k in model.kernels])
        ),
        "Z": model.Z.copy(),
        "C": model.C.copy(),
        "d": model.d.copy(),
        "log_R": np.log(model.R),
        "log_Q": np.log(model.Q),
    }
    updated = {}
    for name, theta in current.items():
        g = getattr(bundle, name, None)
        if g is None:
            updated[name] = theta
            continue
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite hyperparameter gradient for {name}")
        m = opt_state.m.get(name, np.zeros_like(theta))
        s = opt_state.v.get(name, np.zeros_like(theta))
        with np.errstate(over="ignore"):
            m = ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * g
            s = ADAM_BETA2 * s + (1.0 - ADAM_BETA2) * g**2
        opt_state.m[name] = m
        opt_state.v[name] = s
        m_hat = m / (1.0 - ADAM_BETA1**opt_state.t)
        s_hat = s / (1.0 - ADAM_BETA2**opt_state.t)
        updated[name] = theta + lr * m_hat / (np.sqrt(s_hat) + ADAM_EPS)

    kernels = tuple(
        KernelParams(
            signal_variance=float(np.exp(updated["log_signal_variance"][k])),
            lengthscales=np.exp(updated["log_lengthscales"][k]),
        )
        for k in range(model.d_x)
    )
    new_model = with_hypers(
        model,
        kernels=kernels,
        Z=updated["Z"],
        C=updated["C"],
        d=updated["d"],
        R=np.exp(updated["log_R"]),
        Q=np.exp(updated["log_Q"]),
    )
    return new_model, opt_state


def pmcmc_sweep(model: GpssmModel, v: WhitenedInducing, reference: Trajectory,
                obs, config: PmcmcConfig, rng) -> Trajectory:
    """One conditional-SMC sweep with the last particle pinned to the
    reference trajectory.

    Particles 1..S-1 are propagated from the transition predictive, weights
    are the observation likelihoods, ancestors for the free particles are
    multinomially resampled at every t < T, and at t = T a single index is
    drawn from the normalized weights and that particle's full path is
    returned.  Weight normalization happens in log space with max
    subtraction; an all--infinity step raises ``WeightCollapseError``.
    """
    S = config.n_particles
    T = reference.T
    obs = np.asarray(obs, dtype=float)
    if obs.shape != (T, model.d_y):
        raise NumericalError(
            f"observations must be (T, d_y) = ({T}, {model.d_y}), got {obs.shape}"
        )
    if S == 1:
        return Trajectory(
            states=reference.states.copy(), controls=reference.controls.copy()
        )

    paths = np.empty((S, T + 1, model.d_x))
    paths[S - 1] = reference.states
    paths[: S - 1, 0] = model.x0_mean + np.sqrt(model.x0_var) * rng.standard_normal(
        (S - 1, model.d_x)
    )
    for t in range(1, T + 1):
        ctrl = None
        if model.d_a > 0:
            ctrl = np.repeat(reference.controls[t - 1][None, :], S - 1, axis=0)
        means, variances = transition_moments(model, paths[: S - 1, t - 1], ctrl, v)
        paths[: S - 1, t] = means + np.sqrt(variances) * rng.standard_normal(
            (S - 1, model.d_x)
        )
        resid = obs[t - 1][None, :] - paths[:, t] @ model.C.T - model.d
        with np.errstate(over="ignore"):
            log_w = -0.5 * np.sum(
                np.log(2.0 * np.pi * model.R) + resid**2 / model.R, axis=1
            )
        if np.any(np.isnan(log_w)):
            raise NumericalError(f"NaN particle weight at t={t}")
        w_max = np.max(log_w)
        if not np.isfinite(w_max):
            raise WeightCollapseError(f"all particle weights vanished at t={t}", t=t)
        w = np.exp(log_w - w_max)
        w /= w.sum()
        if t < T:
            ancestors = rng.choice(S, size=S - 1, replace=True, p=w)
            paths[: S - 1, : t + 1] = paths[ancestors, : t + 1]
        else:
            j = int(rng.choice(S, p=w))
            return Trajectory(
                states=paths[j].copy(), controls=reference.controls.copy()
            )
    raise AssertionError("unreachable")


@dataclass(frozen=True)
class FitConfig:
    """Everything a fit run needs besides the dataset."""

    variant: str = "ffvd-c-m"
    d_x: int = 4
    M: int = 100
    sghmc: SghmcConfig = field(default_factory=SghmcConfig)
    n_particles: int = 32
    adam_lr: float = 0.01
    adam_decay: float = 0.05
    learn_hypers: bool = True
    sample_hypers: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(
                f"unknown variant {self.variant!r}; choose one of {VARIANTS}"
            )


def _hyper_bundle(bundle, model):
    return bundle.add(obj.hyper_prior_grad(model))


def _fold_hyper_state(model):
    return {
        "log_signal_variance": np.log(
            np.array([k.signal_variance for k in model.kernels])
        ),
        "log_lengthscales": np.log(np.stack([k.lengthscales for k in model.kernels])),
        "Z": model.Z.copy(),
    }


def _apply_folded_hypers(model, state):
    kernels = tuple(
        KernelParams(
            signal_variance=float(np.exp(state["log_signal_variance"][k])),
            lengthscales=np.exp(state["log_lengthscales"][k]),
        )
        for k in range(model.d_x)
    )
    return with_hypers(model, kernels=kernels, Z=state["Z"])


def fit(dataset, variant: str, config: FitConfig, rng=None,
        initial=None):
    """Fit one of the three inference variants to a dataset.

    * ``ffvd-m``: SGHMC on (x_{0:T}, v) under the joint target.
    * ``ffvd-c-m``: SGHMC on x_{0:T} under the collapsed target, drawing v
      per retained sample from the closed-form conditional afterwards.
    * ``ffvd-p``: alternating conditional-SMC sweeps over x_{0:T} with
      conditional draws of v.

    All variants interleave one Adam hyperparameter step per sampler
    iteration (unless ``learn_hypers`` is off).  ``initial`` may supply
    (model, trajectory, v) to skip data-driven initialization, e.g. when
    parameters are pinned to known values.  Returns
    (model, SampleStore, trace) where trace rows are
    (iteration, log_target, train_loglik).
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; choose one of {VARIANTS}")
    if rng is None:
        rng = np.random.default_rng(config.seed)
    if initial is None:
        model, traj, v = init_from_data(
            dataset, d_x=config.d_x, M=config.M, seed=config.seed
        )
    else:
        model, traj, v = initial
    obs = np.asarray(dataset.y, dtype=float)[: dataset.train_len]
    controls = np.asarray(dataset.a, dtype=float)[: dataset.train_len]
    scfg = config.sghmc
    trace = []
    holder = {"model": model, "adam": AdamState(), "bundle": None}
    snapshot = {
        "variant": variant,
        "seed": config.seed,
        "sghmc": scfg.__dict__.copy(),
        "n_particles": config.n_particles,
        "adam_lr": config.adam_lr,
        "adam_decay": config.adam_decay,
        "learn_hypers": config.learn_hypers,
        "sample_hypers": config.sample_hypers,
    }

    def maybe_adam():
        if config.learn_hypers and holder["bundle"] is not None:
            bundle = _hyper_bundle(holder["bundle"], holder["model"])
            if config.sample_hypers:
                # kernel groups live in the SGHMC state instead
                bundle.log_signal_variance = None
                bundle.log_lengthscales = None
                bundle.Z = None
            holder["model"], holder["adam"] = adam_hyper_step(
                holder["model"],
                bundle,
                holder["adam"],
                lr0=config.adam_lr,
                decay=config.adam_decay,
            )

    if variant in ("ffvd-m", "ffvd-c-m"):
        joint = variant == "ffvd-m"
        grad_groups = ["states"]
        if joint:
            grad_groups.append("v")
        if config.learn_hypers or config.sample_hypers:
            grad_groups.append("hypers")
        state = {"states": traj.states.copy()}
        if joint:
            state["v"] = v.v.copy()
        if config.sample_hypers:
            state.update(_fold_hyper_state(model))

        def target(st):
            m = holder["model"]
            if config.sample_hypers:
                m = _apply_folded_hypers(m, st)
                holder["model"] = m
            t = Trajectory(states=st["states"], controls=controls)
            vv = WhitenedInducing(v=st["v"]) if joint else None
            value, bundle, aux = obj.value_and_grad(
                m, t, vv, obs,
                objective="joint" if joint else "collapsed",
                grad_groups=tuple(grad_groups),
            )
            holder["bundle"] = bundle
            holder["loglik"] = aux["train_loglik"]
            grads = {"states": bundle.states}
            if joint:
                grads["v"] = bundle.v
            if config.sample_hypers:
                grads["log_signal_variance"] = bundle.log_signal_variance
                grads["log_lengthscales"] = bundle.log_lengthscales
                grads["Z"] = bundle.Z
            return value, grads

        def callback(it, st, log_q):
            maybe_adam()
            trace.append((it, log_q, holder["loglik"]))

        store = sghmc_run(target, state, scfg, rng, callback=callback)
        store.variant = variant
        store.config = snapshot
        store.controls = controls.copy()
        if variant == "ffvd-c-m":
            for draw in store.draws:
                t = Trajectory(states=draw.states, controls=controls)
                draw.state["v"] = obj.sample_conditional_inducing(
                    holder["model"], t, rng
                ).v
        return holder["model"], store, trace

    # ffvd-p
    pcfg = PmcmcConfig(
        n_particles=config.n_particles, n_sweeps=scfg.n_iters, seed=config.seed
    )
    store = SampleStore(variant=variant, config=snapshot, controls=controls.copy())
    current = Trajectory(states=traj.states.copy(), controls=controls)
    current_v = WhitenedInducing(v=v.v.copy())
    for it in range(1, scfg.n_iters + 1):
        current = pmcmc_sweep(holder["model"], current_v, current, obs, pcfg, rng)
        current_v = obj.sample_conditional_inducing(holder["model"], current, rng)
        groups = ("hypers",) if config.learn_hypers else ()
        value, bundle, aux = obj.value_and_grad(
            holder["model"], current, current_v, obs,
            objective="joint", grad_groups=groups,
        )
        holder["bundle"] = bundle if config.learn_hypers else None
        maybe_adam()
        trace.append((it, value, aux["train_loglik"]))
        if it > scfg.burn_in and (it - scfg.burn_in) % scfg.thin == 0:
            store.draws.append(
                Draw(
                    state={"states": current.states.copy(), "v": current_v.v.copy()},
                    log_target=value,
                    iteration=it,
                )
            )
    return holder["model"], store, trace
