from types import SimpleNamespace

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal
from scipy.integrate import trapezoid

from sepuq.errors import ValidationError
from sepuq.gp import GPBank, GPHyper
from sepuq.kle import CovarianceSpec, build_kl_basis
from sepuq.mesh import build_mesh
from sepuq.vb import (ObservationSet, ThetaPrior, VBConfig, VBState, compute_R_moments,
                      posterior_log_kappa, q_theta_unnormalized, run_vb, sigma_beta,
                      surrogate_prediction, theta_moments, theta_nodes, update_a, update_theta)

from _toy import GRID, dense_moments, log_group_density, perturbed_state, toy_problem


@pytest.fixture(scope="module")
def toy():
    return toy_problem()


def no_data(n1):
    return SimpleNamespace(V=np.zeros((n1, 0)), values=np.zeros(0), sigma_y=1.0)


def const_var_bank(tables):
    """GP bank with tiny noise so the predictive variance is nearly flat inside the grid."""
    return GPBank.fit(GRID, tables, GPHyper(1.0, 0.05, 1.0))


class TestRMoments:
    def test_single_dimension_is_one(self, toy):
        gps, _ = toy_problem(n2=1)
        er, er2, err = compute_R_moments(VBState.initial(gps), 0)
        assert_array_equal(er, 1.0)
        assert_array_equal(er2, 1.0)
        assert_array_equal(err, 1.0)

    def test_unit_deterministic_factors(self):
        st = VBState(np.zeros(3), np.ones(3), np.ones((2, 3)), np.zeros((2, 3)))
        er, er2, _ = compute_R_moments(st, 1)
        assert_array_equal(er, 1.0)
        assert_array_equal(er2, 1.0)

    def test_monte_carlo(self, rng):
        st = VBState(np.zeros(3), np.ones(3), rng.uniform(0.5, 1.5, (2, 3)),
                     rng.uniform(0.01, 0.2, (2, 3)))
        n = 1_000_000
        draws = st.a_mean + np.sqrt(st.a_var) * rng.standard_normal((n, 2, 3))
        R = np.prod(np.delete(draws, 0, axis=2), axis=2)  # (n, 2)
        er, er2, err = compute_R_moments(st, 0)
        for est, samples in ((er, R), (er2, R**2), (err[0, 1], R[:, 0] * R[:, 1])):
            mc = samples.mean(0)
            se = samples.std(0) / np.sqrt(n)
            assert (np.abs(mc - est) <= 3 * se).all()


class TestSigmaBeta:
    def test_no_data(self, toy):
        gps, _ = toy
        st = perturbed_state(gps)
        theta = np.array([-1.0, 0.3])
        sigma, beta = sigma_beta(theta, st, no_data(2), gps, 0)
        var = gps.variance(theta)
        for t in range(2):
            assert_allclose(sigma[t], np.diag([0.5 / var[t]] * 2))
        assert_allclose(beta, gps.mean(0, theta).T / var[:, None])

    def test_scalar_formula(self):
        gps, obs = toy_problem(n1=1, n2=2)
        st = perturbed_state(gps)
        sigma, beta = sigma_beta(0.4, st, obs, gps, 1)
        mu, var = gps.predict(1, 0.4)
        a, v = st.a_mean[0, 0], st.a_var[0, 0]
        V = obs.V[0]
        s2 = obs.sigma_y**2
        assert_allclose(sigma[0, 0], (a * a + v) * V @ V / (2 * s2) + 1 / (2 * var), rtol=1e-13)
        assert_allclose(beta[0], a * V @ obs.values / s2 + mu[0] / var, rtol=1e-13)

    def test_symmetric_positive(self, toy):
        gps, obs = toy
        sigma, _ = sigma_beta(GRID, perturbed_state(gps), obs, gps, 1)
        assert_allclose(sigma, np.swapaxes(sigma, -1, -2), atol=1e-12)
        assert (np.linalg.eigvalsh(sigma) > 0).all()


class TestQTheta:
    def test_empty_model_is_prior(self):
        gps = GPBank.fit(GRID, np.zeros((0, 2, 21)))
        prior = ThetaPrior(0.7, 0.8)
        st = VBState.initial(gps, prior)
        m, v = update_theta(st, no_data(0), gps, 0)
        assert abs(m - 0.7) <= 1e-3
        assert abs(v - 0.64) <= 1e-3

    def test_ratio_to_dense_lattice_is_constant(self, toy):
        gps, obs = toy
        st = perturbed_state(gps)
        theta = np.linspace(0.5, 2.5, 9)
        a = np.linspace(0.0, 2.5, 601)
        A = np.stack(np.meshgrid(a, a, indexing="ij"), -1)
        logs = log_group_density(st, obs, gps, 0, theta, A)
        dense = trapezoid(trapezoid(np.exp(logs - logs.max()), a, axis=2), a, axis=1)
        ratio = q_theta_unnormalized(theta, st, obs, gps, 0) / dense
        assert np.ptp(ratio) <= 1e-4 * ratio.mean()

    def test_term_permutation(self, toy):
        gps, obs = toy
        st = perturbed_state(gps)
        perm = [1, 0]
        gps_p = GPBank(gps.inputs, gps.hyper, gps.weights[perm], gps.lower)
        obs_p = ObservationSet(obs.locations, obs.values, obs.sigma_y, obs.V[perm])
        st_p = VBState(st.theta_mean, st.theta_var, st.a_mean[perm], st.a_var[perm])
        assert_allclose(q_theta_unnormalized(GRID, st_p, obs_p, gps_p, 0),
                        q_theta_unnormalized(GRID, st, obs, gps, 0), rtol=1e-10)

    def test_scale_invariance(self, toy):
        gps, obs = toy
        nodes, logq = theta_nodes(perturbed_state(gps), obs, gps, 0, VBConfig())
        m1, v1, _ = theta_moments(nodes, logq)
        m2, v2, _ = theta_moments(nodes, logq + 650.0)
        assert abs(m1 - m2) <= 1e-10 and abs(v1 - v2) <= 1e-10


class TestUpdates:
    def test_symmetric_q_has_mean_theta0(self):
        tables = np.broadcast_to(1 + 0.2 * np.cos(GRID), (2, 1, 21))
        gps = const_var_bank(np.ascontiguousarray(tables))
        obs = ObservationSet(np.full((1, 2), 0.5), np.array([0.3]), 0.1, np.zeros((2, 1)))
        m, _ = update_theta(VBState.initial(gps), obs, gps, 0)
        assert abs(m) <= 1e-10

    def test_toy_against_dense(self, toy):
        gps, obs = toy
        st = perturbed_state(gps)
        for k in range(2):
            et, vt, ea, va, _, _ = dense_moments(st, obs, gps, k, n_theta=401, n_a=161)
            s = st.copy()
            assert_allclose(update_theta(s, obs, gps, k), (et, vt), atol=1e-3)
            for p in range(2):
                s = st.copy()
                assert_allclose(update_a(s, obs, gps, p, k), (ea[p], va[p]), atol=1e-3)

    def test_prior_only_a(self):
        tables = np.stack([1 + 0.3 * np.tanh(0.5 * GRID), 0.8 + 0.1 * GRID / 5])[:, None]
        gps = const_var_bank(tables)
        st = VBState.initial(gps)
        obs = no_data(2)
        nodes, logq = theta_nodes(st, obs, gps, 0, VBConfig())
        _, _, q = theta_moments(nodes, logq)
        for p in range(2):
            expected = trapezoid(gps.mean(0, nodes)[p] * q, nodes)
            m, _ = update_a(st.copy(), obs, gps, p, 0)
            assert abs(m - expected) <= 1e-3

    def test_window_doubling(self, toy):
        gps, obs = toy
        st = perturbed_state(gps)
        for p in range(2):
            base = update_a(st.copy(), obs, gps, p, 0, VBConfig())
            wide = update_a(st.copy(), obs, gps, p, 0, VBConfig(a_window=10.0, a_intervals=100))
            assert_allclose(base, wide, atol=1e-4)

    def test_variances_nonnegative(self, toy):
        gps, obs = toy
        st, _ = run_vb(gps, obs)
        assert (st.theta_var >= 0).all() and (st.a_var >= 0).all()


class TestRunVB:
    def test_exact_data_at_origin(self):
        gps, obs = toy_problem(sigma_y=0.1)
        y = surrogate_prediction(VBState.initial(gps), obs)
        obs0 = ObservationSet(obs.locations, y, 1e-4, obs.V)
        st, hist = run_vb(gps, obs0)
        assert hist.converged and hist.n_iters <= 5
        assert obs0.misfit(surrogate_prediction(st, obs0)) <= obs0.sigma_y
        assert np.abs(st.theta_mean).max() <= 0.2

    def test_deterministic(self, toy):
        gps, obs = toy
        _, h1 = run_vb(gps, obs)
        _, h2 = run_vb(gps, obs)
        assert_array_equal(h1.delta_mu, h2.delta_mu)

    def test_max_iters_flag(self, toy):
        gps, obs = toy
        _, hist = run_vb(gps, obs, VBConfig(max_iters=1))
        assert not hist.converged and hist.n_iters == 1

    def test_mismatched_terms(self, toy):
        gps, obs = toy
        bad = ObservationSet(obs.locations, obs.values, obs.sigma_y, obs.V[:1])
        with pytest.raises(ValidationError):
            run_vb(gps, bad)


class TestPosteriorLogKappa:
    @pytest.fixture(scope="class")
    @staticmethod
    def basis():
        return build_kl_basis(build_mesh(6, 6), CovarianceSpec(), 3)

    def test_zero_state(self, basis):
        st = VBState(np.zeros(3), np.zeros(3), np.ones((1, 3)), np.zeros((1, 3)))
        mean, var = posterior_log_kappa(st, basis)
        assert_array_equal(mean, 0.0)
        assert_array_equal(var, 0.0)

    def test_single_mode(self, basis):
        st = VBState(np.array([0, 1.5, 0]), np.array([0, 0.2, 0]), np.ones((1, 3)),
                     np.zeros((1, 3)))
        mean, var = posterior_log_kappa(st, basis)
        assert_allclose(mean, 1.5 * basis.modes[1])
        assert_allclose(var, 0.2 * basis.modes[1] ** 2)


def test_observation_set_validation():
    with pytest.raises(ValidationError):
        ObservationSet(np.zeros((0, 2)), np.zeros(0), 1.0, np.zeros((1, 0)))
    with pytest.raises(ValidationError):
        ObservationSet(np.zeros((2, 2)), np.zeros(2), 0.0, np.zeros((1, 2)))
    with pytest.raises(ValidationError):
        VBConfig(theta_intervals=1)
