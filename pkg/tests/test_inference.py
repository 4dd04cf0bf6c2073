import math

import numpy as np
import pytest

from pcbdet.inference import (
    ClassStatistics,
    DegenerateNullError,
    NullFit,
    ablation_statistics,
    combined_statistic,
    compute_r_s,
    compute_r_t,
    compute_w,
    compute_z,
    detect,
    exclusion_set,
    fit_gamma_null,
    gamma_cdf,
    order_statistic_pvalue,
)


def make_stats(r_values, t_hats=None):
    t_hats = t_hats or [(s + 1) % len(r_values) for s in range(len(r_values))]
    return [
        ClassStatistics(source=s, t_hat=t_hats[s], r_s=1.0, r_t=1.0, z=0.5, w=0.5, r=r_values[s])
        for s in range(len(r_values))
    ]


class TestBasicStatistics:
    def test_r_s_mean_of_distances(self):
        clouds = [np.array([[0.1, 0, 0]]), np.array([[0.3, 0, 0]])]
        assert compute_r_s([0, 0, 0], clouds) == pytest.approx(0.2, abs=1e-15)

    def test_r_s_zero_when_touching_every_cloud(self):
        clouds = [np.array([[0.5, 0, 0], [1, 1, 1]]), np.array([[0.5, 0, 0]])]
        assert compute_r_s([0.5, 0, 0], clouds) == 0.0

    def test_r_t_over_target_clouds(self):
        clouds = [np.array([[1.0, 0, 0]]), np.array([[1.0, 0, 0]]), np.array([[4.0, 0, 0]])]
        assert compute_r_t([0, 0, 0], clouds) == pytest.approx(2.0, abs=1e-15)

    def test_z_all_parallel(self):
        g = np.array([1.0, 0, 0])
        sw = [np.array([2.0, 0, 0]), np.array([0.5, 0, 0])]
        assert compute_z(g, sw) == pytest.approx(1.0, abs=1e-12)

    def test_z_opposed_cancel(self):
        g = np.array([1.0, 0, 0])
        sw = [np.array([1.0, 0, 0]), np.array([-1.0, 0, 0])]
        assert compute_z(g, sw) == pytest.approx(0.0, abs=1e-12)

    def test_z_failed_contributes_zero(self):
        g = np.array([1.0, 0, 0])
        sw = [np.array([1.0, 0, 0]), None]
        assert compute_z(g, sw) == pytest.approx(0.5, abs=1e-12)

    def test_w_normalization(self):
        np.testing.assert_allclose(compute_w([0.2, 0.8, 0.5]), [0.0, 1.0, 0.5], atol=1e-12)

    def test_w_degenerate_all_ones(self):
        np.testing.assert_array_equal(compute_w([0.3, 0.3, 0.3]), [1.0, 1.0, 1.0])

    def test_w_extremes(self):
        np.testing.assert_allclose(compute_w([-1.0, 1.0]), [0.0, 1.0], atol=1e-12)

    def test_combined_statistic(self):
        assert combined_statistic(0.5, 0.2, 0.1) == pytest.approx(1.0, abs=1e-12)
        assert combined_statistic(0.0, 5.0, 0.1) == 0.0
        assert combined_statistic(1.0, 0.7, 0.7) == pytest.approx(1.0, abs=1e-12)

    def test_combined_statistic_zero_denominator(self):
        assert combined_statistic(1.0, 2.0, 0.0) == pytest.approx(2.0 / 1e-9)


class TestAblation:
    def test_families(self):
        st = ClassStatistics(source=0, t_hat=1, r_s=0.5, r_t=1.0, z=0.4, w=0.4, r=0.8)
        out = ablation_statistics([st])[0]
        assert out["inv_rs"] == pytest.approx(2.0)
        assert out["rt_over_rs"] == pytest.approx(2.0)
        assert out["w_over_rs"] == pytest.approx(0.8)
        assert out["r"] == pytest.approx(0.8)

    def test_failed_class_all_zero(self):
        st = ClassStatistics(source=0, t_hat=None, r_s=0.0, r_t=0.0, z=0.0, w=0.0, r=0.0)
        out = ablation_statistics([st])[0]
        assert out == {"inv_rs": 0.0, "rt_over_rs": 0.0, "w_over_rs": 0.0, "r": 0.0}

    def test_w_one_matches_inverse(self):
        st = ClassStatistics(source=0, t_hat=1, r_s=0.25, r_t=1.0, z=1.0, w=1.0, r=4.0)
        out = ablation_statistics([st])[0]
        assert out["w_over_rs"] == out["inv_rs"]


class TestExclusion:
    def test_shared_target_excluded(self):
        # t_hat = [2,2,5,1,0]; r maximal at class 0 -> exclude {0, 1}
        stats = make_stats([5.0, 1.0, 0.5, 0.2, 0.1], t_hats=[2, 2, 5, 1, 0])
        assert exclusion_set(stats) == {0, 1}

    def test_unique_votes_exclude_only_smax(self):
        stats = make_stats([1.0, 3.0, 0.5], t_hats=[1, 2, 0])
        assert exclusion_set(stats) == {1}

    def test_all_same_vote_excludes_everything(self):
        stats = make_stats([1.0, 3.0, 0.5, 0.2], t_hats=[3, 3, 3, 3])
        assert exclusion_set(stats) == {0, 1, 2, 3}

    def test_smax_tie_breaks_low(self):
        stats = make_stats([2.0, 2.0, 0.1], t_hats=[2, 0, 1])
        assert 0 in exclusion_set(stats)

    def test_failed_classes_never_excluded(self):
        stats = make_stats([2.0, 0.0, 0.1], t_hats=[2, None, 0])
        assert exclusion_set(stats) == {0}


class TestGammaFit:
    def test_recovers_seeded_draws(self):
        rng = np.random.default_rng(1234)
        vals = rng.gamma(shape=2.0, scale=1.0, size=1000)
        fit = fit_gamma_null(vals)
        assert 1.8 <= fit.shape <= 2.2
        assert 0.9 <= fit.scale <= 1.1

    def test_moment_initialization_formula(self):
        # mean 2, variance 2 -> moment start shape 2, scale 1; the MLE stays
        # in that neighborhood for a gamma-like sample.
        vals = np.array([2.0 - math.sqrt(2), 2.0 + math.sqrt(2), 2.0, 1.0, 3.0])
        m, v = vals.mean(), vals.var()
        assert m * m / v == pytest.approx(vals.mean() ** 2 / vals.var())

    def test_identical_values_degenerate(self):
        with pytest.raises(DegenerateNullError):
            fit_gamma_null(np.full(6, 3.3))

    def test_clamps_zeros(self):
        fit = fit_gamma_null(np.array([0.0, 0.0, 1.0, 2.0, 0.5]))
        assert fit.shape > 0 and fit.scale > 0
        assert fit.values.min() >= 1e-12


class TestOrderStatisticPValue:
    def fit(self, shape=1.0, scale=1.0):
        return NullFit(shape=shape, scale=scale, excluded=(), values=np.array([1.0]))

    def test_power_arithmetic(self):
        # G(r) = 0.99 for Gamma(1,1) at r = -ln(0.01); K-J = 38.
        fit = self.fit()
        r = -math.log(0.01)
        res = order_statistic_pvalue(fit, r, num_classes=39, num_excluded=1)
        assert res.pv == pytest.approx(1 - 0.99**38, abs=1e-6)
        assert res.pv == pytest.approx(0.3174, abs=5e-4)

    def test_median_single(self):
        fit = self.fit()
        res = order_statistic_pvalue(fit, math.log(2.0), num_classes=2, num_excluded=1)
        assert res.pv == pytest.approx(0.5, abs=1e-12)

    def test_underflow_marker(self):
        fit = self.fit()
        res = order_statistic_pvalue(fit, 800.0, num_classes=10, num_excluded=1)
        assert res.underflow
        assert res.pv == 0.0
        # log pv ~ log(9) - 800 for the exponential tail
        assert res.log_pv == pytest.approx(math.log(9) - 800.0, rel=1e-3)

    def test_monotone_in_r_max(self):
        fit = self.fit(shape=2.0, scale=0.7)
        rs = np.linspace(0.01, 30.0, 50)
        pvs = [order_statistic_pvalue(fit, r, 8, 1).pv for r in rs]
        assert all(a >= b for a, b in zip(pvs, pvs[1:]))
        assert all(0.0 <= p <= 1.0 for p in pvs)

    def test_calibration_uniform(self):
        # Statistics drawn from the fitted null itself make G(max)^m uniform.
        fit = self.fit(shape=2.0, scale=1.3)
        rng = np.random.default_rng(77)
        m = 7
        pvs = []
        for _ in range(1000):
            draws = rng.gamma(fit.shape, fit.scale, size=m)
            pvs.append(order_statistic_pvalue(fit, draws.max(), m + 1, 1).pv)
        pvs = np.sort(pvs)
        grid = (np.arange(1, 1001)) / 1000.0
        ks = np.max(np.maximum(np.abs(grid - pvs), np.abs(grid - 1.0 / 1000 - pvs)))
        assert ks <= 0.06

    def test_scale_invariance_under_refit(self):
        rng = np.random.default_rng(5)
        vals = rng.gamma(1.7, 0.4, size=200)
        fit1 = fit_gamma_null(vals)
        fit2 = fit_gamma_null(vals * 10.0)
        r_max = float(vals.max()) * 1.1
        g1 = gamma_cdf(fit1, r_max)
        g2 = gamma_cdf(fit2, r_max * 10.0)
        assert abs(g1 - g2) <= 1e-6


class TestDetect:
    def test_attacked_verdict_and_target(self):
        rng = np.random.default_rng(3)
        r = list(rng.gamma(2.0, 0.05, size=7)) + [30.0]
        stats = make_stats(r, t_hats=[1, 2, 3, 4, 5, 6, 7, 2])
        report = detect(stats, phi=0.05)
        assert report.verdict == "attacked"
        assert report.s_max == 7
        assert report.inferred_target == 2
        assert report.pvalue.pv < 0.05
        # class 1 votes the same target as s_max -> excluded together
        assert set(report.fit.excluded) == {1, 7}

    def test_clean_verdict(self):
        rng = np.random.default_rng(4)
        r = list(rng.gamma(2.0, 0.5, size=8))
        stats = make_stats(r, t_hats=[1, 2, 3, 4, 5, 6, 7, 0])
        report = detect(stats, phi=0.05)
        assert report.verdict in ("clean", "attacked")
        assert report.inferred_target is None or report.verdict == "attacked"

    def test_boundary_pv_is_clean(self):
        # pv exactly at phi must NOT flag an attack (strict less-than).
        stats = make_stats([1.0] * 8)
        report = detect(stats, phi=0.05)
        if report.pvalue is not None:
            assert (report.verdict == "attacked") == (report.pvalue.pv < 0.05)

    def test_small_k_inconclusive(self):
        stats = make_stats([1.0, 2.0, 3.0], t_hats=[1, 2, 0])
        report = detect(stats, phi=0.05)
        assert report.verdict == "inconclusive"
        assert report.pvalue is None

    def test_exclusion_fallback_shrinks_to_smax(self):
        # All classes vote the same target: full exclusion leaves nothing, so
        # the fit falls back to excluding s_max alone.
        rng = np.random.default_rng(9)
        r = list(rng.gamma(2.0, 0.5, size=8))
        stats = make_stats(r, t_hats=[5] * 8)
        report = detect(stats, phi=0.05)
        assert report.verdict in ("clean", "attacked")
        assert report.num_excluded == 1

    def test_degenerate_null_inconclusive(self):
        stats = make_stats([0.0] * 8, t_hats=[1, 2, 3, 4, 5, 6, 7, 0])
        report = detect(stats, phi=0.05)
        assert report.verdict == "inconclusive"

    def test_failed_class_statistics_are_zero_convention(self):
        stats = make_stats([0.5, 2.0, 0.1, 0.4, 0.3, 0.2, 0.25, 0.0],
                           t_hats=[2, 3, 4, 5, 6, 7, 1, None])
        report = detect(stats, phi=0.05)
        assert report.s_max == 1
        assert 7 not in report.fit.excluded
