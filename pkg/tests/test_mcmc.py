import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shortflow import mcmc


class TestVelocityMove:
    def test_zero_scale(self):
        x = np.array([[1.0, 2.0]])
        np.testing.assert_array_equal(mcmc.velocity_move(x, x * 9, 0.0, 0.5), x)

    def test_zero_field(self):
        x = np.array([[1.0, 2.0]])
        np.testing.assert_array_equal(
            mcmc.velocity_move(x, np.zeros_like(x), 1.0, 0.5), x
        )

    def test_arithmetic(self):
        out = mcmc.velocity_move(
            np.array([1.0, 1.0]), np.array([2.0, -2.0]), 1.0, 0.5
        )
        np.testing.assert_array_equal(out, [2.0, 0.0])


def std_normal_logp(x):
    return -0.5 * np.sum(x * x, axis=-1)


def std_normal_grad(x):
    return -x


class TestHmc:
    def test_zero_step_size_returns_start(self):
        cfg = mcmc.HmcConfig(n_hmc_steps=3, n_leapfrog=5, step_size=0.0)
        x0 = np.random.default_rng(0).normal(size=(8, 2))
        out = mcmc.hmc(x0, std_normal_logp, std_normal_grad, cfg, np.random.default_rng(1))
        np.testing.assert_array_equal(out, x0)

    def test_gaussian_moments(self):
        # 256 chains x 400 kept steps ~ 1e5 samples
        cfg = mcmc.HmcConfig(n_hmc_steps=1, n_leapfrog=8, step_size=0.5)
        rng = np.random.default_rng(2)
        x = rng.normal(size=(256, 1)) * 2.0
        keep = []
        for step in range(500):
            x = mcmc.hmc(x, std_normal_logp, std_normal_grad, cfg, rng)
            if step >= 100:
                keep.append(x.copy())
        s = np.concatenate(keep).ravel()
        se_mean = s.std() / np.sqrt(256 * 400 / 4)  # conservative ESS
        assert abs(s.mean()) < 3 * se_mean
        assert abs(s.var() - 1.0) < 0.05

    def test_leapfrog_reversibility(self):
        rng = np.random.default_rng(3)
        x0 = rng.normal(size=(6, 3))
        p0 = rng.normal(size=(6, 3))
        x1, p1 = mcmc.leapfrog(x0, p0, std_normal_grad, 25, 0.1)
        x2, p2 = mcmc.leapfrog(x1, -p1, std_normal_grad, 25, 0.1)
        assert np.max(np.abs(x2 - x0)) < 1e-10
        assert np.max(np.abs(-p2 - p0)) < 1e-10

    def test_nonfinite_target_rows_rejected(self):
        def logp(x):
            out = std_normal_logp(x)
            return np.where(x[:, 0] > 1.0, -np.inf, out)

        def grad(x):
            g = std_normal_grad(x)
            return np.where(x[:, :1] > 1.0, np.nan, g)

        cfg = mcmc.HmcConfig(n_hmc_steps=5, n_leapfrog=5, step_size=0.3)
        x0 = np.zeros((16, 2))
        stats = {}
        out = mcmc.hmc(x0, logp, grad, cfg, np.random.default_rng(4), stats=stats)
        assert np.all(np.isfinite(out))
        assert np.all(out[:, 0] <= 1.0)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            mcmc.HmcConfig(n_hmc_steps=-1)
        with pytest.raises(ValueError):
            mcmc.HmcConfig(n_leapfrog=0)
        mcmc.HmcConfig(n_hmc_steps=0)  # no-refinement arm is allowed

    def test_task_defaults(self):
        cfg = mcmc.HmcConfig.for_task("gmm40")
        assert (cfg.n_hmc_steps, cfg.n_leapfrog, cfg.step_size) == (3, 5, 0.1)
        cfg = mcmc.HmcConfig.for_task("mw32")
        assert (cfg.n_hmc_steps, cfg.n_leapfrog, cfg.step_size) == (6, 10, 0.1)
        for task in ("dw4", "lj13"):
            cfg = mcmc.HmcConfig.for_task(task)
            assert (cfg.n_hmc_steps, cfg.n_leapfrog, cfg.step_size) == (10, 10, 0.01)


class TestEss:
    def test_uniform(self):
        assert abs(mcmc.ess(np.full(128, 1 / 128)) - 128.0) < 1e-9

    def test_one_hot(self):
        w = np.zeros(10)
        w[3] = 1.0
        assert mcmc.ess(w) == 1.0

    def test_arithmetic(self):
        assert abs(mcmc.ess(np.array([0.5, 0.25, 0.25])) - 1 / 0.375) < 1e-12

    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError, match="negative"):
            mcmc.ess(np.array([1.2, -0.2]))

    def test_unnormalized_rejected(self):
        with pytest.raises(ValueError, match="sum"):
            mcmc.ess(np.array([0.5, 0.6]))

    @given(seed=st.integers(0, 2 ** 16), k=st.integers(2, 64))
    @settings(max_examples=50, deadline=None)
    def test_bounds_on_simplex(self, seed, k):
        rng = np.random.default_rng(seed)
        w = rng.dirichlet(np.ones(k) * rng.uniform(0.2, 5.0))
        w = w / w.sum()
        val = mcmc.ess(w)
        assert 1.0 - 1e-9 <= val <= k + 1e-9


class TestSystematicResample:
    def test_one_hot(self):
        w = np.zeros(5)
        w[2] = 1.0
        idx = mcmc.systematic_resample(w, 7, np.random.default_rng(0))
        assert np.all(idx == 2)

    def test_uniform_divisible(self):
        w = np.full(8, 1 / 8)
        idx = mcmc.systematic_resample(w, 8, np.random.default_rng(1))
        assert sorted(idx.tolist()) == list(range(8))

    def test_offspring_floor_ceil(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            w = rng.dirichlet(np.ones(6))
            K = 32
            idx = mcmc.systematic_resample(w, K, rng)
            counts = np.bincount(idx, minlength=6)
            assert np.all(counts >= np.floor(K * w))
            assert np.all(counts <= np.ceil(K * w))

    def test_unbiasedness_07_03(self):
        w = np.array([0.7, 0.3])
        K = 10
        counts = np.zeros(2)
        n_seeds = 10 ** 4
        rng = np.random.default_rng(3)
        for _ in range(n_seeds):
            idx = mcmc.systematic_resample(w, K, rng)
            counts += np.bincount(idx, minlength=2)
        mean = counts / n_seeds
        # offspring of particle 0 is 7 or 8 w.p. (0.7, 0.3)-ish; its std is
        # <= 0.5, so 4 sigma of the mean over 1e4 seeds is ~0.02
        assert abs(mean[0] - 7.0) < 0.02
        assert abs(mean[1] - 3.0) < 0.02

    def test_unbiasedness_random_weights(self):
        rng = np.random.default_rng(4)
        w = rng.dirichlet(np.ones(5))
        K = 16
        total = np.zeros(5)
        n_seeds = 4000
        for _ in range(n_seeds):
            total += np.bincount(
                mcmc.systematic_resample(w, K, rng), minlength=5
            )
        mean = total / n_seeds
        assert np.max(np.abs(mean - K * w)) < 4 * 0.5 / np.sqrt(n_seeds) + 0.02
