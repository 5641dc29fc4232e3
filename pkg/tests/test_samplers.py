"""SGHMC, Adam, conditional-SMC, and fit orchestration tests."""

import numpy as np
import pytest
from scipy.stats import multivariate_normal

import ffvd
from ffvd.data import generate_synthetic
from ffvd.errors import NumericalError, WeightCollapseError
from ffvd.objective import collapsed_stats
from ffvd.samplers import (
    AdamState,
    FitConfig,
    PmcmcConfig,
    SghmcConfig,
    adam_hyper_step,
    adam_learning_rate,
    fit,
    pmcmc_sweep,
    sghmc_run,
)

import oracles


def gaussian_target(mu, var):
    mu = np.asarray(mu, dtype=float)
    var = np.asarray(var, dtype=float)

    def target(state):
        x = state["x"]
        val = -0.5 * np.sum(np.log(2 * np.pi * var) + (x - mu) ** 2 / var)
        return val, {"x": -(x - mu) / var}

    return target


class TestSghmcConfig:
    def test_invariants(self):
        with pytest.raises(ValueError):
            SghmcConfig(step_size=0.5, friction=3.0, n_iters=10)
        with pytest.raises(ValueError):
            SghmcConfig(n_iters=10, burn_in=10)
        with pytest.raises(ValueError):
            SghmcConfig(n_iters=10, thin=0)

    def test_draw_count(self):
        cfg = SghmcConfig(n_iters=107, burn_in=7, thin=10)
        target = gaussian_target([0.0], [1.0])
        store = sghmc_run(target, {"x": np.zeros(1)}, cfg, np.random.default_rng(0))
        assert len(store) == cfg.n_draws == 10


class TestSghmc:
    def test_known_gaussian_moments(self):
        # smaller sibling of the acceptance check
        cfg = SghmcConfig(
            step_size=0.1, friction=2.0, n_iters=20000, burn_in=2000, seed=0
        )
        target = gaussian_target([0.5, -0.3], [0.25, 0.16])
        store = sghmc_run(target, {"x": np.zeros(2)}, cfg, np.random.default_rng(0))
        draws = np.stack([d.state["x"] for d in store.draws])
        np.testing.assert_allclose(draws.mean(axis=0), [0.5, -0.3], atol=0.05)
        np.testing.assert_allclose(draws.var(axis=0), [0.25, 0.16], rtol=0.15)

    def test_ballistic_drift_with_zero_gradient(self):
        # zero gradient field, vanishing noise: position drifts linearly by
        # the initial momentum
        def target(state):
            return 0.0, {"x": np.zeros_like(state["x"])}

        cfg = SghmcConfig(
            step_size=0.1, friction=1e-12, n_iters=10, burn_in=0, thin=1, seed=3
        )
        rng = np.random.default_rng(3)
        p0 = rng.standard_normal(2)  # first draw inside sghmc_run
        store = sghmc_run(target, {"x": np.zeros(2)}, cfg, np.random.default_rng(3))
        # noise scale sqrt(2 * eta * gamma) ~ 4e-7: drift dominates
        final = store.draws[-1].state["x"]
        np.testing.assert_allclose(final, 10 * cfg.step_size * p0, atol=1e-4)

    def test_seed_determinism(self):
        cfg = SghmcConfig(step_size=0.05, friction=1.0, n_iters=500, burn_in=100)
        target = gaussian_target([0.0, 0.0], [1.0, 1.0])
        a = sghmc_run(target, {"x": np.zeros(2)}, cfg, np.random.default_rng(11))
        b = sghmc_run(target, {"x": np.zeros(2)}, cfg, np.random.default_rng(11))
        assert all(
            np.array_equal(x.state["x"], y.state["x"]) and x.log_target == y.log_target
            for x, y in zip(a.draws, b.draws)
        )

    def test_divergence_aborts_with_iteration(self):
        # enormous gradients push the proposal to overflow at every retry
        def target(state):
            x = state["x"]
            with np.errstate(over="ignore"):
                value = float(np.sum(x**4))
            return value, {"x": 1e200 * np.ones_like(x)}

        cfg = SghmcConfig(step_size=0.9, friction=1.0, n_iters=50, burn_in=1)
        with pytest.raises(NumericalError, match="iteration"):
            sghmc_run(target, {"x": np.ones(1)}, cfg, np.random.default_rng(0))


class TestAdam:
    @staticmethod
    def _model():
        kern = ffvd.KernelParams(1.0, np.array([1.0]))
        return ffvd.make_model(
            (kern,), np.array([[0.0]]), Q=[1.0], C=[[0.5]], d=[0.1], R=[1.0]
        )

    def test_zero_gradient_keeps_parameters(self):
        model = self._model()
        zero = ffvd.GradientBundle(
            log_signal_variance=np.zeros(1),
            log_lengthscales=np.zeros((1, 1)),
            Z=np.zeros((1, 1)),
            C=np.zeros((1, 1)),
            d=np.zeros(1),
            log_R=np.zeros(1),
            log_Q=np.zeros(1),
        )
        state = AdamState()
        new_model, state = adam_hyper_step(model, zero, state)
        assert new_model.C[0, 0] == pytest.approx(model.C[0, 0])
        assert new_model.Q[0] == pytest.approx(model.Q[0])
        assert state.t == 1

    def test_first_step_magnitude_is_lr_sign(self):
        model = self._model()
        g = ffvd.GradientBundle(C=np.array([[3.7]]))
        state = AdamState()
        new_model, _ = adam_hyper_step(model, g, state, lr0=0.01, decay=0.05)
        lr1 = adam_learning_rate(0.01, 0.05, 1)
        assert new_model.C[0, 0] - model.C[0, 0] == pytest.approx(lr1, rel=1e-6)

    def test_learning_rate_decay_schedule(self):
        assert adam_learning_rate(0.01, 0.05, 0) == pytest.approx(0.01)
        assert adam_learning_rate(0.01, 0.05, 20) == pytest.approx(0.005)

    def test_concave_quadratic_convergence(self):
        # ascent on -(C - 2)^2 drives C to 2 within 1e-2 after 1000 steps
        model = self._model()
        state = AdamState()
        for _ in range(1000):
            g = ffvd.GradientBundle(C=-2.0 * (model.C - 2.0))
            model, state = adam_hyper_step(model, g, state, lr0=0.01, decay=0.0)
        assert abs(model.C[0, 0] - 2.0) < 1e-2


class TestPmcmc:
    @staticmethod
    def _setup(signal_variance=1.0, Q=0.05, R=0.1, T=12, seed=0):
        rng = np.random.default_rng(seed)
        kern = ffvd.KernelParams(signal_variance, np.array([1.0]))
        model = ffvd.make_model(
            (kern,), np.linspace(-2, 2, 5)[:, None],
            Q=[Q], C=[[1.0]], d=[0.0], R=[R],
        )
        v = ffvd.WhitenedInducing(0.3 * rng.standard_normal((1, 5)))
        ref = ffvd.Trajectory(rng.standard_normal((T + 1, 1)), np.zeros((T, 0)))
        obs = rng.standard_normal((T, 1))
        return model, v, ref, obs

    def test_single_particle_returns_reference(self):
        model, v, ref, obs = self._setup()
        cfg = PmcmcConfig(n_particles=1, n_sweeps=1, seed=0)
        out = pmcmc_sweep(model, v, ref, obs, cfg, np.random.default_rng(0))
        assert np.array_equal(out.states, ref.states)

    def test_flat_likelihood_returns_realized_particle_path(self):
        model, v, ref, obs = self._setup(R=1e12)
        cfg = PmcmcConfig(n_particles=8, n_sweeps=1, seed=0)
        hits = 0
        n = 400
        for i in range(n):
            out = pmcmc_sweep(model, v, ref, obs, cfg, np.random.default_rng(i))
            hits += np.array_equal(out.states, ref.states)
        # reference survives the final uniform index draw with probability
        # >= 1/S; resampled copies can only raise the hit rate
        assert hits / n > 0.5 / cfg.n_particles
        assert hits / n < 0.9

    def test_weight_collapse_reports_time(self):
        model, v, ref, obs = self._setup(R=1e-300)
        bad_obs = obs + 1e160
        cfg = PmcmcConfig(n_particles=4, n_sweeps=1, seed=0)
        with np.errstate(over="ignore"):
            with pytest.raises((WeightCollapseError, NumericalError)):
                pmcmc_sweep(model, v, ref, bad_obs, cfg, np.random.default_rng(0))

    def test_degenerate_random_walk_matches_kalman_smoother(self):
        # shorter sibling of the acceptance check
        T, Q, R = 25, 0.05, 0.1
        kern = ffvd.KernelParams(1e-12, np.array([1.0]))
        model = ffvd.make_model(
            (kern,), np.linspace(-2, 2, 5)[:, None],
            Q=[Q], C=[[1.0]], d=[0.0], R=[R],
        )
        v = ffvd.WhitenedInducing(np.zeros((1, 5)))
        rng = np.random.default_rng(100)
        x = np.zeros(T + 1)
        x[0] = rng.standard_normal()
        for t in range(1, T + 1):
            x[t] = x[t - 1] + np.sqrt(Q) * rng.standard_normal()
        y = x[1:] + np.sqrt(R) * rng.standard_normal(T)
        ms, _ = oracles.kalman_smoother_random_walk(0.0, 1.0, Q, 1.0, 0.0, R, y)
        cfg = PmcmcConfig(n_particles=32, n_sweeps=1, seed=0)
        cur = ffvd.Trajectory(np.zeros((T + 1, 1)), np.zeros((T, 0)))
        chain_rng = np.random.default_rng(1)
        n_sweeps, burn = 1200, 200
        draws = np.zeros((n_sweeps - burn, T + 1))
        for i in range(n_sweeps):
            cur = pmcmc_sweep(model, v, cur, y[:, None], cfg, chain_rng)
            if i >= burn:
                draws[i - burn] = cur.states[:, 0]
        emp = draws.mean(axis=0)
        for t in range(T + 1):
            tau = oracles.integrated_autocorrelation_time(draws[:, t])
            se = draws[:, t].std(ddof=1) / np.sqrt(len(draws) / tau)
            assert abs(emp[t] - ms[t]) < 3.5 * se, f"t={t}"

    def test_weights_normalized_before_every_draw(self, monkeypatch):
        model, v, ref, obs = self._setup()
        cfg = PmcmcConfig(n_particles=6, n_sweeps=1, seed=0)
        seen = []

        class SpyRng:
            def __init__(self, rng):
                self._rng = rng

            def standard_normal(self, *a, **k):
                return self._rng.standard_normal(*a, **k)

            def choice(self, n, size=None, replace=True, p=None):
                seen.append(float(np.sum(p)))
                return self._rng.choice(n, size=size, replace=replace, p=p)

        pmcmc_sweep(model, v, ref, obs, cfg, SpyRng(np.random.default_rng(0)))
        assert len(seen) == ref.T  # one ancestor draw per t<T plus the final draw
        assert all(abs(s - 1.0) < 1e-12 for s in seen)


class TestFit:
    @staticmethod
    def _tiny_cfg(variant, seed=0, iters=60, learn=True):
        scfg = SghmcConfig(
            step_size=0.005, friction=0.05, n_iters=iters, burn_in=iters // 2,
            thin=5, seed=seed,
        )
        return FitConfig(
            variant=variant, d_x=1, M=6, sghmc=scfg, n_particles=6,
            learn_hypers=learn, seed=seed,
        )

    @pytest.mark.parametrize("variant", ["ffvd-m", "ffvd-c-m", "ffvd-p"])
    def test_smoke_and_determinism(self, variant):
        ds, _ = generate_synthetic(0)
        cfg = self._tiny_cfg(variant)
        m1, s1, t1 = fit(ds, variant, cfg, np.random.default_rng(0))
        m2, s2, t2 = fit(ds, variant, cfg, np.random.default_rng(0))
        assert t1 == t2
        assert len(s1) == len(s2) > 0
        for a, b in zip(s1.draws, s2.draws):
            assert np.array_equal(a.states, b.states)
            assert np.array_equal(a.v, b.v)
        assert all(np.isfinite(d.log_target) for d in s1.draws)

    def test_unknown_variant(self):
        ds, _ = generate_synthetic(0)
        with pytest.raises(ValueError, match="ffvd-c-m"):
            fit(ds, "nope", self._tiny_cfg("ffvd-m"), np.random.default_rng(0))

    def test_collapsed_retained_pairs_satisfy_conditional_consistency(self):
        ds, truth = generate_synthetic(1)
        T = ds.train_len
        y = ds.y[:T]
        traj0 = ffvd.Trajectory(
            np.concatenate([[y[0]], y]).reshape(-1, 1), np.zeros((T, 0))
        )
        v0 = ffvd.WhitenedInducing(np.zeros((1, truth.model.M)))
        scfg = SghmcConfig(
            step_size=0.01, friction=0.05, n_iters=200, burn_in=100, thin=20, seed=1
        )
        cfg = FitConfig(
            variant="ffvd-c-m", d_x=1, M=truth.model.M, sghmc=scfg,
            learn_hypers=False, seed=1,
        )
        model, store, _ = fit(
            ds, "ffvd-c-m", cfg, np.random.default_rng(1),
            initial=(truth.model, traj0, v0),
        )
        obs = ds.y[:T]
        for i in range(len(store)):
            traj = store.trajectory(i)
            v = store.inducing(i)
            stats = collapsed_stats(model, traj)
            lj = ffvd.log_q_joint(model, traj, v, obs)
            lc = ffvd.log_q_collapsed(model, traj, obs)
            cond = multivariate_normal.logpdf(v.v[0], stats.g[0], stats.H[0])
            assert lj - cond - lc == pytest.approx(0.0, abs=1e-6)

    def test_collapsed_trace_trend_is_monotone_from_cold_start(self):
        # from an uninformed (all-zero) trajectory the training
        # log-likelihood climbs; its 1000-iteration moving average is
        # non-decreasing up to small chain noise over the first 8000 iters
        from ffvd.evaluation import moving_average

        ds, truth = generate_synthetic(0)
        T = ds.train_len
        traj0 = ffvd.Trajectory(np.zeros((T + 1, 1)), np.zeros((T, 0)))
        v0 = ffvd.WhitenedInducing(np.zeros((1, truth.model.M)))
        scfg = SghmcConfig(
            step_size=0.005, friction=0.05, n_iters=8000, burn_in=4000,
            thin=80, seed=0,
        )
        cfg = FitConfig(
            variant="ffvd-c-m", d_x=1, M=truth.model.M, sghmc=scfg,
            learn_hypers=False, seed=0,
        )
        _, _, trace = fit(
            ds, "ffvd-c-m", cfg, np.random.default_rng(0),
            initial=(truth.model, traj0, v0),
        )
        ma = moving_average(np.array([row[2] for row in trace]), 1000)
        rise = ma.max() - ma.min()
        assert rise > 0
        backslide = np.max(np.maximum.accumulate(ma) - ma)
        assert backslide <= 0.02 * rise
        assert ma[-1] > ma[0] + 0.9 * rise

    def test_joint_variant_keeps_finite_log_target_with_fixed_hypers(self):
        ds, truth = generate_synthetic(2)
        T = ds.train_len
        y = ds.y[:T]
        traj0 = ffvd.Trajectory(
            np.concatenate([[y[0]], y]).reshape(-1, 1), np.zeros((T, 0))
        )
        v0 = ffvd.WhitenedInducing(np.zeros((1, truth.model.M)))
        cfg = self._tiny_cfg("ffvd-m", seed=2, learn=False)
        cfg = FitConfig(
            variant="ffvd-m", d_x=1, M=truth.model.M, sghmc=cfg.sghmc,
            learn_hypers=False, seed=2,
        )
        model, store, trace = fit(
            ds, "ffvd-m", cfg, np.random.default_rng(2),
            initial=(truth.model, traj0, v0),
        )
        assert all(np.isfinite(d.log_target) for d in store.draws)
        assert all(np.isfinite(row[1]) and np.isfinite(row[2]) for row in trace)
        # retained joint draws satisfy the conditional-consistency identity
        obs = ds.y[: ds.train_len]
        for i in range(len(store)):
            traj = store.trajectory(i)
            v = store.inducing(i)
            stats = collapsed_stats(model, traj)
            lj = ffvd.log_q_joint(model, traj, v, obs)
            lc = ffvd.log_q_collapsed(model, traj, obs)
            cond = multivariate_normal.logpdf(v.v[0], stats.g[0], stats.H[0])
            assert lj - cond - lc == pytest.approx(0.0, abs=1e-6)

    def test_sample_hypers_flag_runs(self):
        ds, _ = generate_synthetic(3)
        scfg = SghmcConfig(
            step_size=0.002, friction=0.05, n_iters=30, burn_in=15, thin=5, seed=3
        )
        cfg = FitConfig(
            variant="ffvd-m", d_x=1, M=5, sghmc=scfg, learn_hypers=True,
            sample_hypers=True, seed=3,
        )
        model, store, trace = fit(ds, "ffvd-m", cfg, np.random.default_rng(3))
        assert len(store) == 3
        assert np.all(np.isfinite([row[1] for row in trace]))
