import os
import subprocess
import sys

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal
from scipy.integrate import cumulative_trapezoid

from sepuq.errors import NumericalError, ValidationError
from sepuq.gp import GPBank, GPHyper
from sepuq.mcmc import (ChainState, McmcConfig, Target, batch_means_se, log_posterior,
                        run_chain, step)
from sepuq.vb import ObservationSet, ThetaPrior, VBState

from _toy import GRID, dense_moments, toy_problem


def ks_distance(samples, grid, density):
    cdf = cumulative_trapezoid(density, grid, initial=0.0)
    cdf /= cdf[-1]
    x = np.sort(samples)
    model = np.interp(x, grid, cdf)
    n = x.size
    return max(np.max(np.arange(1, n + 1) / n - model), np.max(model - np.arange(n) / n))


class TestLogPosterior:
    def test_zero_quadratic(self):
        gps, obs = toy_problem()
        t = Target.from_observations(gps, None)
        theta = np.array([0.3, -0.2])
        a = np.stack([gps.mean(j, theta[j]) for j in range(2)], axis=1)
        var = gps.variance(theta)
        expected = -np.log(var).sum() - 0.5 * (theta**2).sum()
        assert_allclose(log_posterior(theta, a, t), expected, rtol=1e-12)

    def test_noise_scaling(self):
        gps, obs = toy_problem()
        theta = np.zeros(2)
        a = np.full((2, 2), 1.1)
        base = Target.from_observations(gps, None)
        t1 = Target.from_observations(gps, obs)
        t2 = Target(gps, obs.values, obs.V, 2 * obs.sigma_y)
        q1 = log_posterior(theta, a, t1) - log_posterior(theta, a, base)
        q2 = log_posterior(theta, a, t2) - log_posterior(theta, a, base)
        assert_allclose(q1, 4 * q2, rtol=1e-12)

    def test_hand_computed(self):
        gps, _ = toy_problem(n1=1, n2=1)
        y = np.array([0.5, -1.0])
        V = np.array([[2.0, 1.0]])
        t = Target(gps, y, V, 0.5, ThetaPrior(0.2, 2.0))
        theta, a = 0.7, 1.3
        mu, var = gps.predict(0, theta)
        expected = (-((0.5 - 2.6) ** 2 + (-1.0 - 1.3) ** 2) / (2 * 0.25)
                    - (a - mu[0]) ** 2 / (2 * var) - 0.5 * np.log(var)
                    - (theta - 0.2) ** 2 / 8)
        assert_allclose(log_posterior([theta], [[a]], t), expected, rtol=1e-12)

    def test_shape_check(self):
        gps, obs = toy_problem()
        with pytest.raises(ValidationError):
            log_posterior(np.zeros(3), np.ones((2, 2)), Target.from_observations(gps, obs))


class TestKernel:
    def test_cache_consistent_after_sweeps(self):
        gps, obs = toy_problem()
        st = ChainState.initial(Target.from_observations(gps, obs))
        step(st, np.random.default_rng(0), 500)
        assert st.check_cache() <= 1e-8 * max(1.0, abs(st.log_posterior))

    def test_tiny_steps_accept(self):
        gps, obs = toy_problem()
        st = ChainState.initial(Target.from_observations(gps, obs))
        st.step_theta[:] = 1e-7
        st.step_a[:] = 1e-7
        _, acc_t, acc_a = step(st, np.random.default_rng(0), 200)
        assert acc_t.min() >= 195 and acc_a.min() >= 195

    def test_stale_cache_detected(self):
        gps, obs = toy_problem()
        st = ChainState.initial(Target.from_observations(gps, obs))
        st.loglik[0] += 1.0
        with pytest.raises(NumericalError):
            st.check_cache()

    def test_backends_agree(self):
        code = ("import sys, json, numpy as np; sys.path.insert(0, 'tests');"
                "from _toy import toy_problem;"
                "from sepuq.mcmc import ChainState, Target, step;"
                "from sepuq import _kernels;"
                "gps, obs = toy_problem();"
                "st = ChainState.initial(Target.from_observations(gps, obs));"
                "tr, _, _ = step(st, np.random.default_rng(3), 300);"
                "print(json.dumps([_kernels.BACKEND, tr.tolist(), st.a.tolist()]))")
        root = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
        runs = {}
        for flag in ("0", "1"):
            env = dict(os.environ, SEPUQ_DISABLE_NUMBA=flag)
            out = subprocess.run([sys.executable, "-c", code], env=env, cwd=root,
                                 capture_output=True, text=True, check=True)
            runs[flag] = eval(out.stdout)  # JSON lists of floats are valid literals
        assert runs["0"][0] != runs["1"][0]
        assert_allclose(runs["0"][1], runs["1"][1], rtol=1e-12)
        assert_allclose(runs["0"][2], runs["1"][2], rtol=1e-12)


class TestChain:
    def test_prior_only(self):
        gps, _ = toy_problem()
        prior = ThetaPrior(0.5, 0.8)
        res = run_chain(gps, None, McmcConfig(iterations=60_000, burn_in=5_000, thin=5), prior)
        se = batch_means_se(res.samples)
        assert (np.abs(res.theta_mean - 0.5) <= 3 * se + 1e-3).all()
        se_sq = batch_means_se((res.samples - 0.5) ** 2)
        assert (np.abs(((res.samples - 0.5) ** 2).mean(0) - 0.64) <= 3 * se_sq + 1e-3).all()

    def test_exact_marginal_ks(self):
        gps, obs = toy_problem(n1=2, n2=1)
        res = run_chain(gps, obs, McmcConfig(iterations=220_000, burn_in=20_000, thin=20))
        *_, theta, marg = dense_moments(VBState.initial(gps), obs, gps, 0,
                                        n_theta=401, n_a=161)
        assert ks_distance(res.samples[:, 0], theta, marg) < 0.02

    def test_reproducible(self):
        gps, obs = toy_problem()
        cfg = McmcConfig(iterations=3000, burn_in=1000, seed=7)
        r1 = run_chain(gps, obs, cfg)
        r2 = run_chain(gps, obs, cfg)
        assert_array_equal(r1.samples, r2.samples)
        assert_array_equal(r1.step_a, r2.step_a)
        r3 = run_chain(gps, obs, McmcConfig(iterations=3000, burn_in=1000, seed=8))
        assert not np.array_equal(r1.samples, r3.samples)

    def test_thinning_count(self):
        gps, obs = toy_problem()
        res = run_chain(gps, obs, McmcConfig(iterations=2500, burn_in=500, thin=10, chunk=333))
        assert res.samples.shape == (200, 2)
        assert_allclose(res.running_mean[-1], res.theta_mean)

    def test_acceptance_in_window(self):
        gps, obs = toy_problem()
        res = run_chain(gps, obs, McmcConfig(iterations=20_000, burn_in=5_000))
        assert not res.warnings
        assert (res.accept_theta > 0.1).all() and (res.accept_a > 0.1).all()

    def test_log_kappa_moments(self):
        from sepuq.kle import CovarianceSpec, build_kl_basis
        from sepuq.mesh import build_mesh
        basis = build_kl_basis(build_mesh(5, 5), CovarianceSpec(), 2)
        gps, obs = toy_problem()
        res = run_chain(gps, obs, McmcConfig(iterations=3000, burn_in=1000))
        mean, std = res.log_kappa_moments(basis, batch=37)
        lk = res.samples @ basis.modes
        assert_allclose(mean, lk.mean(0), atol=1e-12)
        assert_allclose(std, lk.std(0), atol=1e-10)


@pytest.mark.parametrize("kw", [dict(burn_in=100, iterations=100), dict(step_theta=0.0),
                                dict(thin=0), dict(target_accept=(0.5, 0.4))])
def test_config_validation(kw):
    with pytest.raises(ValidationError):
        McmcConfig(**kw)


def test_batch_means_iid(rng):
    x = rng.standard_normal((100_000, 2))
    assert_allclose(batch_means_se(x), 1 / np.sqrt(x.shape[0]), rtol=0.35)
    with pytest.raises(ValidationError):
        batch_means_se(np.zeros(10))
