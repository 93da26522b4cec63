import numpy as np
import pytest
from scipy.stats import kstest

from shortflow import targets as tg


def fd_score(en, x, h=1e-6):
    g = np.zeros_like(x)
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (en.log_unnorm(xp) - en.log_unnorm(xm)) / (2 * h)
    return g


def random_point(en, rng):
    if en.name == "lj13":
        base = tg._init_particles(en, 1, rng)[0]
        return base + 0.03 * rng.normal(size=en.dim)
    if en.name == "dw4":
        return tg._init_particles(en, 1, rng)[0] + 0.3 * rng.normal(size=en.dim)
    if en.name == "gmm40":
        return rng.uniform(-40, 40, size=2)
    return rng.normal(size=en.dim) * 1.5


ALL_TARGETS = [
    tg.gmm40,
    tg.mw32,
    tg.dw4,
    lambda: tg.lj13(smoothed=True),
    lambda: tg.lj13(smoothed=False),
    lambda: tg.gauss_shift().path.target,
]


@pytest.mark.parametrize("make", ALL_TARGETS)
def test_analytic_score_matches_finite_differences(make):
    en = make()
    rng = np.random.default_rng(11)
    for _ in range(100):
        x = random_point(en, rng)
        g = en.grad_log_unnorm(x)
        fd = fd_score(en, x)
        rel = np.max(np.abs(g - fd)) / max(1.0, np.max(np.abs(fd)))
        assert rel < 1e-5


class TestAnnealedPath:
    def setup_method(self):
        self.fx = tg.gauss_shift()
        self.path = self.fx.path
        self.rng = np.random.default_rng(0)

    def test_endpoints_exact(self):
        x = self.rng.normal(size=(8, 2))
        np.testing.assert_array_equal(
            self.path.log_tilde(0.0, x), self.path.base.log_unnorm(x)
        )
        np.testing.assert_array_equal(
            self.path.log_tilde(1.0, x), self.path.target.log_unnorm(x)
        )

    def test_midpoint_hand_value(self):
        # base N(0, I), target N(mu, I), t = 0.5, x = 0 in 2D:
        # 0.5 * logN(0; mu, I) + 0.5 * logN(0; 0, I)
        mu = self.fx.mu
        x = np.zeros(2)
        expected = 0.5 * (-np.log(2 * np.pi) - 0.5 * np.dot(mu, mu)) + 0.5 * (
            -np.log(2 * np.pi)
        )
        assert abs(self.path.log_tilde(0.5, x) - expected) < 1e-12

    def test_time_out_of_range(self):
        with pytest.raises(ValueError):
            self.path.log_tilde(1.5, np.zeros(2))
        with pytest.raises(ValueError):
            self.path.log_tilde(-0.1, np.zeros(2))

    def test_dt_log_tilde_trivial_path(self):
        base = tg.gaussian_base(3, 1.0)
        path = tg.AnnealedPath(base=base, target=base)
        x = self.rng.normal(size=(16, 3))
        np.testing.assert_allclose(path.dt_log_tilde(x), 0.0)

    def test_dt_log_tilde_1d_shift(self):
        # base N(0,1), target N(2,1) kernel, x=0: x*mu - mu^2/2 = -2
        fx = tg.gauss_shift(dim=1, shift_norm=2.0)
        assert abs(fx.path.dt_log_tilde(np.zeros(1)) - (-2.0)) < 1e-12

    def test_dt_log_tilde_gmm_mode(self):
        g = tg.gmm40()
        path = tg.make_path("gmm40")
        center = tg.gmm40_means()[3]
        expected = g.log_unnorm(center) - path.base.log_unnorm(center)
        assert abs(path.dt_log_tilde(center) - expected) < 1e-12

    def test_dtlogz_oracle_vs_quadrature(self):
        # independent check of (t - 1/2)||mu||^2 by differentiating a grid
        # quadrature of Z_t
        mu = self.fx.mu
        xs = np.linspace(-8.0, 12.0, 401)
        X, Y = np.meshgrid(xs, xs, indexing="ij")
        pts = np.stack([X.ravel(), Y.ravel()], axis=1)
        cell = (xs[1] - xs[0]) ** 2

        def logz(t):
            vals = t * self.path.target.log_unnorm(pts) + (
                1 - t
            ) * self.path.base.log_unnorm(pts)
            m = vals.max()
            return m + np.log(np.sum(np.exp(vals - m)) * cell)

        for t in (0.2, 0.5, 0.8):
            h = 1e-5
            fd = (logz(t + h) - logz(t - h)) / (2 * h)
            assert abs(fd - self.fx.dtlogz(t)) < 1e-6

    def test_pt_is_shifted_gaussian(self):
        # log_tilde(t, x) differs from logN(x; t*mu, I) by an x-independent
        # constant
        x = self.rng.normal(size=(64, 2)) * 2.0
        t = 0.37
        lt = self.path.log_tilde(t, x)
        diff = x - t * self.fx.mu
        ln = -np.log(2 * np.pi) - 0.5 * np.sum(diff * diff, axis=-1)
        gap = lt - ln
        assert np.max(np.abs(gap - gap[0])) < 1e-10


class TestGMM40:
    def setup_method(self):
        self.en = tg.gmm40()
        self.means = tg.gmm40_means()

    def test_density_vs_direct_sum(self):
        rng = np.random.default_rng(2)
        var = 40.0
        for _ in range(20):
            x = rng.uniform(-45, 45, size=2)
            direct = np.log(
                np.sum(
                    np.exp(-0.5 * np.sum((x - self.means) ** 2, axis=1) / var)
                    / (40 * 2 * np.pi * var)
                )
            )
            assert abs(self.en.log_unnorm(x) - direct) < 1e-10

    def test_exact_sampler_component_frequencies(self):
        rng = np.random.default_rng(3)
        n = 10 ** 6
        _, labels = tg.gmm40_sample_with_labels(n, rng)
        counts = np.bincount(labels, minlength=40)
        p = 1.0 / 40
        sigma = np.sqrt(n * p * (1 - p))
        # 40 simultaneous checks at 3 sigma: expected false-positive rate
        # 40 * 0.0027 ~ 0.11, so allow a whisker of slack
        assert np.all(np.abs(counts - n * p) < 3.5 * sigma)

    def test_far_tail_underflows_gracefully(self):
        val = self.en.log_unnorm(np.array([1.0e3, -1.0e3]))
        assert np.isfinite(val) and val < -1e4


class TestMW32:
    def setup_method(self):
        self.en = tg.mw32()

    def test_origin_is_zero(self):
        assert self.en.log_unnorm(np.zeros(32)) == 0.0

    def test_single_well_value(self):
        # one well at (1, 0), all others at the origin: -1 + 6 + 0.5 = 5.5
        x = np.zeros(32)
        x[4] = 1.0
        assert abs(self.en.log_unnorm(x) - 5.5) < 1e-12

    def test_separability(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=32)
        total = self.en.log_unnorm(x)
        parts = 0.0
        for w in range(16):
            xi = np.zeros(32)
            xi[2 * w : 2 * w + 2] = x[2 * w : 2 * w + 2]
            parts += self.en.log_unnorm(xi)
        assert abs(total - parts) < 1e-9

    def test_rejection_rate_guard(self):
        centers, sigmas, weights, c, ref = tg._mw_envelope()
        with pytest.raises(RuntimeError, match="acceptance rate"):
            tg._sample_well_x1(
                1000, np.random.default_rng(0), centers, sigmas, weights,
                c * 1e7, ref,
            )


def _dw4_direct(x, d0=4.0, a=0.0, b=-4.0, c=0.9, tau=1.0):
    conf = x.reshape(4, 2)
    e = 0.0
    for i in range(4):
        for j in range(i + 1, 4):
            u = np.linalg.norm(conf[i] - conf[j]) - d0
            e += (a * u + b * u ** 2 + c * u ** 4) / (2 * tau)
    return e


class TestDW4:
    def setup_method(self):
        self.en = tg.dw4()

    def test_pair_bracket_vanishes_at_d0(self):
        # four mutually equidistant points do not exist in the plane, so the
        # example is checked at the pair level: any pair at separation d0
        # contributes zero
        x = np.array([0.0, 0.0, 4.0, 0.0, 100.0, 0.0, 104.0, 0.0])
        far = _dw4_direct(x)
        e = -self.en.log_unnorm(x)
        assert abs(e - far) < 1e-9

    def test_direct_formula_oracle(self):
        rng = np.random.default_rng(5)
        for _ in range(25):
            x = rng.normal(size=8) * 2.5
            assert abs(-self.en.log_unnorm(x) - _dw4_direct(x)) < 1e-9

    def test_single_pair_contribution(self):
        # a pair at separation d0 + 1 contributes (1/2)(b + c); checked at
        # the pair level since no planar embedding can hold every other
        # pair fixed at d0
        def phi(dist, d0=4.0, a=0.0, b=-4.0, c=0.9, tau=1.0):
            u = dist - d0
            return (a * u + b * u ** 2 + c * u ** 4) / (2 * tau)

        assert abs(phi(5.0) - 0.5 * (-4.0 + 0.9)) < 1e-12
        assert phi(4.0) == 0.0
        # and the implementation matches the same pair decomposition
        rng = np.random.default_rng(12)
        x = rng.normal(size=8) * 2.5
        conf = x.reshape(4, 2)
        total = sum(
            phi(np.linalg.norm(conf[i] - conf[j]))
            for i in range(4)
            for j in range(i + 1, 4)
        )
        assert abs(-self.en.log_unnorm(x) - total) < 1e-9

    def test_translation_invariance(self):
        rng = np.random.default_rng(6)
        x = rng.normal(size=8) * 2
        shift = np.tile(rng.normal(size=2), 4)
        assert abs(self.en.log_unnorm(x) - self.en.log_unnorm(x + shift)) < 1e-9


class TestLJ13:
    def test_pair_minimum(self):
        assert abs(tg._lj_pair(1.0) - (-1.0)) < 1e-12

    def test_tail_vanishes(self):
        assert abs(tg._lj_pair(1e3)) < 1e-15

    def test_smoothing_matches_value_slope_curvature(self):
        r = tg.LJ_R_MIN
        sm = tg.lj13(smoothed=True)
        h = 1e-6

        def pair_energy(d, en):
            # two isolated particles (others far away contribute a constant)
            x = np.zeros(39)
            x[3] = d
            x = x.reshape(13, 3)
            x[2:] = 1e3 * np.arange(11)[:, None] + np.array([0.0, 1e3, 2e3])
            return -en.log_unnorm(x.reshape(-1))

        raw = tg.lj13(smoothed=False)
        v_s = lambda d: pair_energy(d, sm)
        v_r = lambda d: pair_energy(d, raw)
        assert abs(v_s(r) - v_r(r)) < 1e-9
        ds_s = (v_s(r + h) - v_s(r - h)) / (2 * h)
        ds_r = (v_r(r + h) - v_r(r - h)) / (2 * h)
        assert abs(ds_s - ds_r) / abs(ds_r) < 1e-6
        dd_s = (v_s(r + h) - 2 * v_s(r) + v_s(r - h)) / h ** 2
        dd_r = (v_r(r + h) - 2 * v_r(r) + v_r(r - h)) / h ** 2
        assert abs(dd_s - dd_r) / abs(dd_r) < 1e-3

    def test_smoothed_finite_below_rmin(self):
        en = tg.lj13(smoothed=True)
        x = np.zeros(39)
        x[3] = 0.3  # one pair far inside the core
        x = x.reshape(13, 3)
        x[2:] = 10.0 * (1 + np.arange(11))[:, None]
        assert np.isfinite(en.log_unnorm(x.reshape(-1)))

    def test_coincident_particles_raw_energy_is_infinite(self):
        en = tg.lj13(smoothed=False)
        x = np.zeros(39)  # all thirteen particles coincide
        assert en.log_unnorm(x) == -np.inf
        with pytest.raises(ValueError, match="coincident"):
            en.grad_log_unnorm(x)

    def test_harmonic_term(self):
        # spread particles far enough apart that pair terms vanish; energy
        # reduces to half the squared deviation from the center of mass
        en = tg.lj13(smoothed=False)
        conf = 1e3 * np.arange(13)[:, None] * np.array([1.0, 0, 0])
        com = conf.mean(axis=0)
        expected = 0.5 * np.sum((conf - com) ** 2)
        assert abs(-en.log_unnorm(conf.reshape(-1)) - expected) / expected < 1e-9


class TestReferenceSamples:
    def test_gmm40_mean(self):
        en = tg.gmm40()
        rng = np.random.default_rng(7)
        s, meta = tg.reference_samples(en, 1000, rng)
        assert meta["method"] == "exact"
        mix_mean = tg.gmm40_means().mean(axis=0)
        mix_cov_diag = 40.0 + tg.gmm40_means().var(axis=0)
        se = np.sqrt(mix_cov_diag / 1000)
        assert np.all(np.abs(s.mean(axis=0) - mix_mean) < 3 * se)

    def test_mw32_x2_marginal_is_normal(self):
        en = tg.mw32()
        rng = np.random.default_rng(8)
        s, _ = tg.reference_samples(en, 1500, rng)
        x2 = s[:, 1::2].ravel()
        assert kstest(x2, "norm").pvalue > 0.01

    def test_dw4_energy_histogram_stationary(self):
        # sample order is chronological (per-step blocks), so comparing
        # halves detects residual drift; bins/sample counts keep the iid
        # noise floor (~sqrt(bins / (pi * n_half))) well below the bound
        en = tg.dw4()
        rng = np.random.default_rng(9)
        s, meta = tg.reference_samples(en, 6000, rng)
        assert meta["method"] == "hmc"
        e = en.potential(s)
        half = len(e) // 2
        lo, hi = e.min(), e.max()
        h1, _ = np.histogram(e[:half], bins=10, range=(lo, hi))
        h2, _ = np.histogram(e[half:], bins=10, range=(lo, hi))
        tv = 0.5 * np.abs(h1 / half - h2 / (len(e) - half)).sum()
        assert tv < 0.05
