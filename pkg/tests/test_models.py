import numpy as np
import pytest
from scipy.integrate import quad

from branchvi.data import BranchData, BranchDataset
from branchvi.errors import InvalidDataError
from branchvi.gaussmath import LOG_2PI, mvn_logpdf
from branchvi.models import (
    PreferenceConfig,
    SyntheticConfig,
    preference_forward_sample,
    preference_global_dim,
    preference_model,
    synthetic_forward_sample,
    synthetic_model,
    synthetic_oracle,
)
from branchvi.rng import RngStream


def _fd_grads(f, x, h=1e-6):
    g = np.empty_like(x)
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = h
        g[j] = (f(x + e) - f(x - e)) / (2 * h)
    return g


class TestSyntheticModel:
    def test_prior_at_zero(self):
        m = synthetic_model(2, 1, [1])
        assert m.log_prior(np.zeros(2)) == pytest.approx(-1.837877, abs=1e-6)
        assert m.log_prior(np.zeros(2)) == pytest.approx(-LOG_2PI)

    def test_branch_at_zero(self):
        m = synthetic_model(1, 1, [1])
        d = BranchData(np.array([[1.0]]), np.array([0.0]))
        # log N(0|0,1) + log N(0|0,1)
        assert m.log_branch(np.zeros(1), np.zeros(1), d) == pytest.approx(-1.837877, abs=1e-6)

    def test_gradients_match_central_differences(self):
        gen = RngStream(10).generator()
        m = synthetic_model(3, 1, [5])
        d = BranchData(gen.standard_normal((5, 3)), gen.standard_normal(5))
        theta = gen.standard_normal(3)
        z = gen.standard_normal(3)
        val, gt, gz = m.log_branch_grad(theta, z, d)
        assert val == pytest.approx(m.log_branch(theta, z, d))
        fd_t = _fd_grads(lambda t: m.log_branch(t, z, d), theta)
        fd_z = _fd_grads(lambda u: m.log_branch(theta, u, d), z)
        assert np.allclose(gt, fd_t, rtol=1e-5, atol=1e-8)
        assert np.allclose(gz, fd_z, rtol=1e-5, atol=1e-8)
        vp, gp = m.log_prior_grad(theta)
        assert np.allclose(gp, _fd_grads(m.log_prior, theta), rtol=1e-5, atol=1e-8)

    def test_log_obs_plus_local_prior_is_log_branch(self):
        gen = RngStream(11).generator()
        m = synthetic_model(2, 1, [4])
        d = BranchData(gen.standard_normal((4, 2)), gen.standard_normal(4))
        theta, z = gen.standard_normal(2), gen.standard_normal(2)
        local_prior = -0.5 * float((z - theta) @ (z - theta)) - LOG_2PI
        assert m.log_branch(theta, z, d) == pytest.approx(
            local_prior + m.log_obs(theta, z, d), rel=1e-12)

    def test_branch_marginalizes_to_gaussian_quadrature(self):
        # integral over z of exp(log_branch) must equal N(y | x theta, 1 + x^2)
        m = synthetic_model(1, 1, [1])
        gen = RngStream(12).generator()
        for _ in range(20):
            theta, x, y = gen.standard_normal(3) * 1.5
            d = BranchData(np.array([[x]]), np.array([y]))
            val, _ = quad(lambda z: np.exp(m.log_branch(np.array([theta]),
                                                        np.array([z]), d)),
                          -12, 12)
            var = 1.0 + x * x
            ref = np.exp(-0.5 * (y - x * theta) ** 2 / var) / np.sqrt(2 * np.pi * var)
            assert val == pytest.approx(ref, abs=1e-6)


class TestForwardSampling:
    def test_reproducible(self):
        cfg = SyntheticConfig(2, 3, (4, 5, 6))
        d1, l1 = synthetic_forward_sample(cfg, RngStream(5))
        d2, l2 = synthetic_forward_sample(cfg, RngStream(5))
        assert np.array_equal(l1.theta, l2.theta)
        for a, b in zip(d1.branches, d2.branches):
            assert np.array_equal(a.x, b.x) and np.array_equal(a.y, b.y)

    def test_observation_mean_is_zero(self):
        # E[y] = 0 marginally; CLT bound over 10^5 draws
        cfg = SyntheticConfig(1, 100, (10,) * 100)
        ys = []
        for rep in range(100):
            data, _ = synthetic_forward_sample(cfg, RngStream(13, rep))
            ys.append(np.concatenate([b.y for b in data.branches]))
        ys = np.concatenate(ys)
        assert ys.size == 100_000
        se = ys.std() / np.sqrt(ys.size)
        assert abs(ys.mean()) < 3 * se

    def test_shape_validation(self):
        with pytest.raises(InvalidDataError):
            SyntheticConfig(2, 3, (4, 5))
        with pytest.raises(InvalidDataError):
            SyntheticConfig(2, 0, ())


class TestSyntheticOracle:
    def test_single_obs_marginal(self):
        # N=1, n=1, D=1, x=1, y=0: marginal variance 1 + 2 = 3
        ds = BranchDataset([BranchData(np.array([[1.0]]), np.array([0.0]))], 1)
        o = synthetic_oracle(ds)
        assert o.log_marginal == pytest.approx(-0.5 * np.log(2 * np.pi * 3.0), rel=1e-12)

    def test_zero_covariate_recovers_prior(self):
        ds = BranchDataset([BranchData(np.array([[0.0]]), np.array([0.7]))], 1)
        o = synthetic_oracle(ds)
        assert np.allclose(o.posterior_global.mean, 0.0, atol=1e-12)
        assert np.allclose(o.posterior_global.cov(), 1.0, atol=1e-12)

    def test_posterior_local_moments(self):
        gen = RngStream(14).generator()
        ds = BranchDataset([BranchData(gen.standard_normal((3, 2)),
                                       gen.standard_normal(3))], 2)
        o = synthetic_oracle(ds)
        theta = gen.standard_normal(2)
        spec = o.posterior_local(theta, 0)
        b = ds.branches[0]
        prec = np.eye(2) + b.x.T @ b.x
        cov = np.linalg.inv(prec)
        assert np.allclose(spec.cov(), cov, atol=1e-10)
        assert np.allclose(spec.mean, cov @ (b.x.T @ b.y + theta), atol=1e-10)

    def test_marginal_against_importance_sampling(self):
        cfg = SyntheticConfig(1, 2, (2, 2))
        data, _ = synthetic_forward_sample(cfg, RngStream(15))
        o = synthetic_oracle(data)
        gen = RngStream(16).generator()
        K = 2_000_000
        theta = gen.standard_normal(K)
        logw = np.zeros(K)
        for b in data.branches:
            z = theta + gen.standard_normal(K)
            resid = b.y[None, :] - np.outer(z, b.x[:, 0])
            logw += -0.5 * np.sum(resid**2, axis=1) - 0.5 * b.n * LOG_2PI
        top = logw.max()
        w = np.exp(logw - top)
        est = top + np.log(w.mean())
        # delta-method standard error on the log estimate
        se = w.std() / (w.mean() * np.sqrt(K))
        assert abs(est - o.log_marginal) < 3 * se

    def test_elbo_identity_by_quadrature(self):
        # log Z = ELBO(q) + KL(q || posterior) for a q over theta, D=1
        cfg = SyntheticConfig(1, 2, (2, 3))
        data, _ = synthetic_forward_sample(cfg, RngStream(17))
        o = synthetic_oracle(data)

        def log_lik(theta):  # log p(y | x, theta), z marginalized per branch
            total = 0.0
            for b in data.branches:
                C = np.eye(b.n) + b.x @ b.x.T
                r = b.y - b.x[:, 0] * theta
                total += (-0.5 * r @ np.linalg.solve(C, r)
                          - 0.5 * np.linalg.slogdet(C)[1] - 0.5 * b.n * LOG_2PI)
            return total

        def log_prior(theta):
            return -0.5 * theta * theta - 0.5 * LOG_2PI

        mu_q, sd_q = 0.3, 1.4  # an arbitrary Gaussian over theta

        def log_q(theta):
            return -0.5 * ((theta - mu_q) / sd_q) ** 2 - np.log(sd_q) - 0.5 * LOG_2PI

        def log_post(theta):
            return mvn_logpdf(o.posterior_global, np.array([theta]))

        q_pdf = lambda t: np.exp(log_q(t))
        elbo, _ = quad(lambda t: q_pdf(t) * (log_prior(t) + log_lik(t) - log_q(t)),
                       mu_q - 12 * sd_q, mu_q + 12 * sd_q, limit=200)
        kl, _ = quad(lambda t: q_pdf(t) * (log_q(t) - log_post(t)),
                     mu_q - 12 * sd_q, mu_q + 12 * sd_q, limit=200)
        assert elbo + kl == pytest.approx(o.log_marginal, abs=1e-4)


class TestPreferenceModel:
    def test_example_values(self):
        m = preference_model(1, 1, [1])
        d = BranchData(np.array([[0.0]]), np.array([1.0]))
        # log N(0 | 0, psi(0)^2) + log(1/2)
        assert m.log_branch(np.zeros(2), np.zeros(1), d) == pytest.approx(
            -0.918939 - 0.693147, abs=1e-6)

    def test_dims(self):
        m = preference_model(3, 1, [1])
        assert m.global_dim == preference_global_dim(3) == 3 + 6
        assert m.local_dim == 3
        assert m.symmetric

    def test_log_sigmoid_stability(self):
        m = preference_model(1, 1, [1])
        d = BranchData(np.array([[1.0]]), np.array([1.0]))
        val = m.log_obs(np.zeros(2), np.array([-40.0]), d)
        assert val == pytest.approx(-40.0, abs=1e-12)
        val = m.log_obs(np.zeros(2), np.array([700.0]), d)
        assert np.isfinite(val)

    def test_rejects_non_binary(self):
        m = preference_model(1, 1, [1])
        d = BranchData(np.array([[1.0]]), np.array([0.5]))
        with pytest.raises(InvalidDataError):
            m.log_branch(np.zeros(2), np.zeros(1), d)

    def test_gradients_match_central_differences(self):
        gen = RngStream(18).generator()
        D = 2
        m = preference_model(D, 1, [6])
        d = BranchData(gen.standard_normal((6, D)), (gen.random(6) < 0.5).astype(float))
        theta = gen.standard_normal(m.global_dim) * 0.5
        z = gen.standard_normal(D)
        val, gt, gz = m.log_branch_grad(theta, z, d)
        assert val == pytest.approx(m.log_branch(theta, z, d))
        fd_t = _fd_grads(lambda t: m.log_branch(t, z, d), theta)
        fd_z = _fd_grads(lambda u: m.log_branch(theta, u, d), z)
        assert np.allclose(gt, fd_t, rtol=1e-4, atol=1e-7)
        assert np.allclose(gz, fd_z, rtol=1e-4, atol=1e-7)

    def test_permutation_invariance_exact(self):
        gen = RngStream(19).generator()
        m = preference_model(3, 1, [20])
        d = BranchData(gen.standard_normal((20, 3)), (gen.random(20) < 0.4).astype(float))
        theta = gen.standard_normal(m.global_dim)
        z = gen.standard_normal(3)
        base = m.log_branch(theta, z, d)
        for _ in range(10):
            perm = gen.permutation(20)
            dp = BranchData(d.x[perm], d.y[perm])
            assert m.log_branch(theta, z, dp) == base  # exact equality

    def test_forward_sampling(self):
        cfg = PreferenceConfig(2, 4, (5, 5, 5, 5))
        d1, _ = preference_forward_sample(cfg, RngStream(20))
        d2, _ = preference_forward_sample(cfg, RngStream(20))
        for a, b in zip(d1.branches, d2.branches):
            assert np.array_equal(a.y, b.y)
            assert set(np.unique(a.y)) <= {0.0, 1.0}
