import math

import numpy as np
import pytest

from frailmort.baseline import BaselineParams, baseline_grid, fit_weighted_poisson, poisson_loglik
from frailmort.data import (
    CumulativeHazardTable,
    HazardMode,
    LexisWindow,
    MortalitySurface,
    cumulative_hazard,
    death_rates,
    simulate_surface,
)
from frailmort.errors import ParameterDomainError, StructuralError
from frailmort.estimation import (
    FitMode,
    backtest_sigma2,
    em_fit_additive,
    fit_fixed_frailty,
    gamma_sigma2_derivatives,
    gamma_sigma2_step,
    golden_section_max,
    profile_fit,
    profile_grid,
    pseudo_log_likelihood,
    switching_fit,
)
from frailmort.frailty import FrailtySpec

from conftest import gompertz_truth, pseudo_exact_surface


@pytest.fixture(scope="module")
def exact_gamma():
    w = LexisWindow(1950, 1959, 50, 79)
    truth = gompertz_truth(w)
    return truth, pseudo_exact_surface(FrailtySpec.gamma(0.5), truth, w, 1e6)


@pytest.fixture(scope="module")
def degenerate_lee_carter():
    w = LexisWindow(1960, 1999, 40, 89)
    n_t, n_x = w.shape
    a = np.linspace(math.log(0.002), math.log(0.15), n_x)
    k = np.linspace(40, -40, n_t)
    truth = BaselineParams.lee_carter(w.years, w.ages, a, 1.0 / n_x, k)
    s = simulate_surface(FrailtySpec.degenerate(), truth, w, 1e6, seed=7)
    return s, LexisWindow(1960, 1989, 40, 89), LexisWindow(1990, 1999, 40, 89)


class TestPseudoLikelihood:
    def test_single_cell(self):
        w = LexisWindow(2000, 2000, 60, 60)
        s = MortalitySurface(w, [[2.0]], [[10.0]])
        table = CumulativeHazardTable(w, [[0.0]], HazardMode.COHORT)
        base = BaselineParams.constant([2000], [60], math.log(0.2))
        ll = pseudo_log_likelihood(FrailtySpec.gamma(0.5), base, s, table)
        assert ll == pytest.approx(-5.2188758, abs=1e-7)

    def test_degenerate_is_plain_poisson(self, small_window, rng):
        truth = gompertz_truth(small_window)
        s = simulate_surface(FrailtySpec.degenerate(), truth, small_window, 1e4, seed=3)
        table = cumulative_hazard(death_rates(s), HazardMode.COHORT)
        ll = pseudo_log_likelihood(FrailtySpec.degenerate(), truth, s, table)
        assert ll == poisson_loglik(s.deaths, s.exposures, truth.grid())

    def test_triple_loop_oracle(self, rng):
        w = LexisWindow(2000, 2002, 60, 62)
        D = rng.poisson(20, size=w.shape).astype(float)
        E = rng.uniform(500, 1500, size=w.shape)
        s = MortalitySurface(w, D, E)
        base = BaselineParams.gompertz(w.years, w.ages, [-6.0, -6.1, -6.2], 0.05)
        table = cumulative_hazard(death_rates(s), HazardMode.COHORT)
        spec = FrailtySpec.gamma(0.3)
        total = 0.0
        for i, t in enumerate(w.years):
            for j, x in enumerate(w.ages):
                F = math.exp(base.theta[i, 0] + base.theta[i, 1] * x)
                mu = math.exp(-0.3 * table.values[i, j]) * F
                total += D[i, j] * math.log(mu) - mu * E[i, j]
        assert pseudo_log_likelihood(spec, base, s, table) == pytest.approx(total, abs=1e-10)

    def test_window_mismatch(self, small_window):
        s = simulate_surface(FrailtySpec.degenerate(), gompertz_truth(small_window), small_window, 1e4, seed=1)
        other = LexisWindow(1950, 1958, 50, 79)
        table = CumulativeHazardTable(other, np.zeros(other.shape), HazardMode.COHORT)
        with pytest.raises(StructuralError):
            pseudo_log_likelihood(FrailtySpec.degenerate(), gompertz_truth(small_window), s, table)


class TestFixedFrailty:
    def test_degenerate_equals_baseline_fit(self, small_window):
        s = simulate_surface(FrailtySpec.degenerate(), gompertz_truth(small_window), small_window, 1e5, seed=2)
        fitted = fit_fixed_frailty(FrailtySpec.degenerate(), s, "cohort", "gompertz")
        plain = fit_weighted_poisson("gompertz", s.deaths, s.exposures, small_window)
        np.testing.assert_array_equal(fitted.baseline.theta, plain.params.theta)
        assert fitted.loglik == pytest.approx(plain.loglik, rel=1e-12)

    def test_gamma_period_lee_carter_uses_adjusted_exposure(self):
        w = LexisWindow(1970, 1989, 50, 79)
        a = np.linspace(-6, -3, w.shape[1])
        truth = BaselineParams.lee_carter(w.years, w.ages, a, 1.0 / w.shape[1], np.linspace(20, -20, w.shape[0]))
        s = simulate_surface(FrailtySpec.degenerate(), truth, w, 1e5, seed=4)
        fitted = fit_fixed_frailty(FrailtySpec.gamma(0.4), s, "period", "lee_carter")
        H = cumulative_hazard(death_rates(s), HazardMode.PERIOD).values
        ref = fit_weighted_poisson("lee_carter", s.deaths, np.exp(-0.4 * H) * s.exposures, w)
        np.testing.assert_allclose(fitted.baseline.grid(), ref.params.grid(), rtol=1e-12)
        assert fitted.hazard_table.mode is HazardMode.PERIOD

    def test_additive_mode_rejected(self, small_window):
        s = simulate_surface(FrailtySpec.degenerate(), gompertz_truth(small_window), small_window, 1e4, seed=1)
        with pytest.raises(ParameterDomainError):
            fit_fixed_frailty(FrailtySpec.gamma(0.2), s, "additive", "gompertz")

    def test_period_additive_is_not_a_mode(self):
        with pytest.raises(ParameterDomainError):
            FitMode.parse("period_additive")


class TestGammaStep:
    def make_problem(self, rng, n=60):
        H = rng.uniform(0.0, 3.0, n)
        FE = rng.uniform(1.0, 100.0, n)
        D = rng.poisson(FE * np.exp(-0.5 * H)).astype(float)
        return D, H, FE

    def test_concavity(self, rng):
        for _ in range(100):
            D, H, FE = self.make_problem(rng)
            s = rng.uniform(0.0, 5.0)
            assert gamma_sigma2_derivatives(s, D, H, FE)[2] <= 0

    def test_derivatives_match_finite_differences(self, rng):
        D, H, FE = self.make_problem(rng)
        s, h = 0.7, 1e-5
        v, d1, d2 = gamma_sigma2_derivatives(s, D, H, FE)
        vp, d1p, _ = gamma_sigma2_derivatives(s + h, D, H, FE)
        vm, d1m, _ = gamma_sigma2_derivatives(s - h, D, H, FE)
        assert d1 == pytest.approx((vp - vm) / (2 * h), rel=1e-6)
        assert d2 == pytest.approx((d1p - d1m) / (2 * h), rel=1e-4)

    @pytest.mark.parametrize("sigma2", [0.05, 0.5, 3.0])
    def test_noise_free_stationary_point(self, sigma2, rng):
        w = LexisWindow(2000, 2004, 50, 59)
        H = rng.uniform(0.0, 2.0, size=w.shape)
        FE = rng.uniform(10.0, 1000.0, size=w.shape)
        s = MortalitySurface(w, np.exp(-sigma2 * H) * FE, np.ones(w.shape))
        table = CumulativeHazardTable(w, H, HazardMode.COHORT)
        assert gamma_sigma2_step(s, table, FE) == pytest.approx(sigma2, abs=1e-8)

    def test_zero_hazard_gives_boundary(self):
        w = LexisWindow(2000, 2001, 50, 52)
        s = MortalitySurface(w, np.full(w.shape, 5.0), np.ones(w.shape))
        table = CumulativeHazardTable(w, np.zeros(w.shape), HazardMode.COHORT)
        assert gamma_sigma2_step(s, table, np.full(w.shape, 4.0)) == 0.0


class TestSearch:
    def test_golden_section(self):
        x, fx, _ = golden_section_max(lambda s: -(s - 0.3) ** 2, 0.0, 2.0, xtol=1e-10)
        assert x == pytest.approx(0.3, abs=1e-8)

    def test_golden_section_boundary(self):
        x, fx, _ = golden_section_max(lambda s: -s, 0.0, 2.0)
        assert x == 0.0 and fx == 0.0

    def test_profile_recovers_exact_model(self, exact_gamma):
        truth, s = exact_gamma
        fit = profile_fit("gamma", s, "cohort", "gompertz")
        assert fit.frailty.sigma2 == pytest.approx(0.5, abs=1e-5)
        np.testing.assert_allclose(fit.baseline.theta, truth.theta, rtol=1e-5)

    def test_profile_beats_sweep(self, exact_gamma):
        _, s = exact_gamma
        fit = profile_fit("gamma", s, "cohort", "gompertz")
        sweep = [fit_fixed_frailty(FrailtySpec.of("gamma", v), s, "cohort", "gompertz").loglik_rel
                 for v in np.linspace(0.0, 2.0, 10)]
        assert fit.loglik_rel >= max(sweep) - 1e-9

    def test_switching_from_truth(self, exact_gamma):
        _, s = exact_gamma
        fit = switching_fit("gamma", s, "cohort", "gompertz", 0.5)
        assert fit.diagnostics["outer_iterations"] <= 3
        assert fit.frailty.sigma2 == pytest.approx(0.5, abs=1e-6)
        assert np.all(np.diff(fit.trace) >= -1e-6)

    def test_profile_grid_matches_fixed_fits(self, exact_gamma):
        _, s = exact_gamma
        grid = profile_grid("stable", s, "cohort", "gompertz", [0.0, 0.5], [0.3, 0.5], threads=2)
        for a, s2, ll in grid.rows():
            ref = fit_fixed_frailty(FrailtySpec.of("stable", s2, a), s, "cohort", "gompertz").loglik
            assert ll == pytest.approx(ref, rel=1e-12)
        assert grid.argmax()[:2] == (0.0, 0.5)

    def test_degenerate_family_rejected(self, exact_gamma):
        with pytest.raises(ParameterDomainError):
            profile_fit("degenerate", exact_gamma[1], "cohort", "gompertz")


class TestEM:
    def test_zero_background_is_multiplicative(self, small_window):
        s = simulate_surface(FrailtySpec.gamma(0.3), gompertz_truth(small_window), small_window, 1e5, seed=5)
        spec = FrailtySpec.gamma(0.3)
        em = em_fit_additive(spec, s, "gompertz")
        ref = fit_fixed_frailty(spec, s, "cohort", "gompertz")
        assert em.loglik == pytest.approx(ref.loglik, abs=1e-6)
        np.testing.assert_allclose(em.baseline.theta, ref.baseline.theta, rtol=1e-8)

    def test_competing_constant_hazards_split(self):
        w = LexisWindow(2000, 2004, 50, 59)
        E = np.full(w.shape, 1e4)
        s = MortalitySurface(w, 0.03 * E, E)
        f0 = BaselineParams.constant(w.years, w.ages, math.log(0.02))
        g0 = BaselineParams.constant(w.years, w.ages, math.log(0.01))
        em = em_fit_additive(FrailtySpec.degenerate(), s, "constant", "constant", init_baseline=f0, init_background=g0)
        np.testing.assert_allclose(em.diagnostics["base_share"], 2.0 / 3.0, rtol=1e-12)
        np.testing.assert_allclose(baseline_grid(em.baseline, w), 0.02, rtol=1e-12)
        np.testing.assert_allclose(baseline_grid(em.background, w), 0.01, rtol=1e-12)

    def test_trace_monotone(self, small_window):
        truth = gompertz_truth(small_window, level=-11.0)
        bg = BaselineParams.constant(small_window.years, small_window.ages, math.log(5e-4))
        s = simulate_surface(FrailtySpec.gamma(0.3), truth, small_window, 1e6, seed=6, background=bg)
        em = em_fit_additive(FrailtySpec.gamma(0.3), s, "gompertz", "constant")
        assert np.all(np.diff(em.trace) >= -1e-8)
        assert em.diagnostics["iterations"] >= 1


class TestBacktest:
    def test_degenerate_truth_prefers_small_variance(self, degenerate_lee_carter):
        s, fit_w, test_w = degenerate_lee_carter
        res = backtest_sigma2(s, fit_w, test_w)
        assert res.sigma2 < 0.05
        assert res.value >= res.curve_value.max()
        assert abs(res.grid_argmax() - res.sigma2) <= 0.05

    def test_windows_must_be_adjacent(self, degenerate_lee_carter):
        s, fit_w, _ = degenerate_lee_carter
        with pytest.raises(StructuralError):
            backtest_sigma2(s, fit_w, LexisWindow(1991, 1999, 40, 89))
