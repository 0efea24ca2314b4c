import math

import numpy as np
import pytest

from frailmort.baseline import BaselineParams
from frailmort.data import (
    CumulativeHazardTable,
    HazardMode,
    LexisWindow,
    MortalitySurface,
    build_surface,
    cumulative_hazard,
    death_rates,
    extended_rates,
    integrated_baseline_exact,
    simulate_surface,
)
from frailmort.errors import CleaningError, ParameterDomainError, ParseError, StructuralError
from frailmort.frailty import FrailtySpec, nu_prime
from frailmort.hmd import format_hmd_table, parse_hmd_table, read_hmd_file
from frailmort.io import read_grid, write_grid

HEADER = "Somewhere, Deaths (period 1x1)   Last modified: 01 Jan 2020\n\n  Year      Age       Female       Male        Total\n"


def constant_surface(window, m=0.1, E=1000.0):
    return MortalitySurface(window, np.full(window.shape, m * E), np.full(window.shape, E))


class TestWindow:
    def test_validation(self):
        with pytest.raises(StructuralError):
            LexisWindow(1960, 1950, 0, 10)
        with pytest.raises(StructuralError):
            LexisWindow(1950, 1960, 20, 111)
        with pytest.raises(StructuralError):
            LexisWindow(1950, 1960, -1, 10)

    def test_shape_and_index(self):
        w = LexisWindow(1950, 1952, 20, 24)
        assert w.shape == (3, 5)
        assert w.index(1951, 23) == (1, 3)
        with pytest.raises(ParameterDomainError):
            w.index(1953, 20)
        assert w.contains_window(LexisWindow(1951, 1952, 21, 24))


class TestSurface:
    def test_build_from_mappings(self):
        w = LexisWindow(2000, 2001, 30, 31)
        d = {(t, x): 1.0 for t in (2000, 2001) for x in (30, 31)}
        e = {(t, x): 10.0 for t in (2000, 2001) for x in (30, 31)}
        s = build_surface(d, e, w)
        assert s.deaths.size == 4

    def test_missing_exposure_cell_named(self):
        w = LexisWindow(2000, 2001, 30, 31)
        d = {(t, x): 1.0 for t in (2000, 2001) for x in (30, 31)}
        e = dict(d)
        del e[(2001, 31)]
        with pytest.raises(StructuralError, match="t=2001, x=31"):
            build_surface(d, e, w)

    def test_missing_marker_rejected(self):
        w = LexisWindow(2000, 2000, 30, 31)
        d = {(2000, 30): 1.0, (2000, 31): math.nan}
        e = {(2000, 30): 1.0, (2000, 31): 1.0}
        with pytest.raises(StructuralError, match="x=31"):
            build_surface(d, e, w)

    def test_deaths_without_exposure(self):
        w = LexisWindow(2000, 2000, 30, 31)
        with pytest.raises(CleaningError, match="t=2000, x=31"):
            MortalitySurface(w, np.array([[1.0, 2.0]]), np.array([[5.0, 0.0]]))

    def test_negative_values(self):
        w = LexisWindow(2000, 2000, 30, 31)
        with pytest.raises(CleaningError):
            MortalitySurface(w, np.array([[-1.0, 2.0]]), np.array([[5.0, 1.0]]))

    def test_zero_exposure_flagged(self):
        w = LexisWindow(2000, 2000, 30, 31)
        s = MortalitySurface(w, np.array([[1.0, 0.0]]), np.array([[5.0, 0.0]]))
        np.testing.assert_array_equal(s.observed, [[True, False]])
        np.testing.assert_array_equal(death_rates(s).rates, [[0.2, 0.0]])

    def test_arrays_are_read_only(self):
        s = constant_surface(LexisWindow(2000, 2001, 0, 1))
        with pytest.raises(ValueError):
            s.deaths[0, 0] = 3.0


class TestRates:
    def test_examples(self):
        w = LexisWindow(2000, 2000, 0, 1)
        r = death_rates(MortalitySurface(w, np.array([[30.0, 0.0]]), np.array([[1000.0, 500.0]])))
        assert r.at(2000, 0) == 0.03
        assert r.at(2000, 1) == 0.0

    def test_scalar_loop_oracle(self, rng):
        w = LexisWindow(1990, 1992, 40, 42)
        D = rng.integers(0, 50, size=w.shape).astype(float)
        E = rng.uniform(100, 1000, size=w.shape)
        r = death_rates(MortalitySurface(w, D, E))
        for i in range(3):
            for j in range(3):
                assert r.rates[i, j] == D[i, j] / E[i, j]

    def test_extension_rule(self):
        w = LexisWindow(1990, 1992, 40, 45)
        D = np.arange(18, dtype=float).reshape(3, 6) + 1
        r = death_rates(MortalitySurface(w, D, np.full(w.shape, 100.0)))
        ext = extended_rates(r)
        assert ext(1985, 42) == r.at(1990, 42)
        assert ext(1970, 39) == 0.0
        assert ext(1991, 44) == r.at(1991, 44)
        with pytest.raises(ParameterDomainError):
            ext(1993, 40)
        with pytest.raises(ParameterDomainError):
            ext(1991, 46)


def cohort_hazard_oracle(rates, background=None):
    """Defining sum with the extension rule: H(t, x) = sum_{x_min <= u < x} m_ext(u + t - x, u)."""
    w = rates.window
    ext = extended_rates(rates)
    out = np.zeros(w.shape)
    for i, t in enumerate(w.years):
        for j, x in enumerate(w.ages):
            total = 0.0
            for u in range(w.x_min, x):
                tt = u + t - x
                val = ext(tt, u)
                if background is not None:
                    val -= background[max(tt, w.t_min) - w.t_min, u - w.x_min]
                total += val
            out[i, j] = total
    return out


class TestCumulativeHazard:
    def test_hand_sums(self):
        w = LexisWindow(2000, 2001, 20, 22)
        r = death_rates(constant_surface(w, 0.1))
        H = cumulative_hazard(r, "cohort").values
        np.testing.assert_allclose(H[:, 2], 0.2, rtol=1e-15)
        np.testing.assert_array_equal(H[:, 0], 0.0)
        P = cumulative_hazard(r, "period").values
        np.testing.assert_allclose(P, 0.1 * (w.ages - 20)[None, :] * np.ones((2, 1)), rtol=1e-15)

    def test_matches_defining_sum(self, rng):
        w = LexisWindow(1990, 1995, 60, 66)
        D = rng.poisson(50, size=w.shape).astype(float)
        r = death_rates(MortalitySurface(w, D, np.full(w.shape, 1000.0)))
        np.testing.assert_allclose(cumulative_hazard(r, "cohort").values, cohort_hazard_oracle(r), rtol=1e-14)
        G = rng.uniform(0, 0.06, size=w.shape)
        table = cumulative_hazard(r, "cohort", background=G)
        np.testing.assert_allclose(table.values, cohort_hazard_oracle(r, G), rtol=1e-12, atol=1e-15)
        assert table.background_subtracted

    def test_telescoping(self, rng):
        w = LexisWindow(1990, 1995, 60, 66)
        r = death_rates(MortalitySurface(w, rng.poisson(50, size=w.shape).astype(float), np.full(w.shape, 1e3)))
        H = cumulative_hazard(r, "cohort").values
        # exact up to the rounding of the subtraction itself
        np.testing.assert_allclose(H[1:, 1:] - H[:-1, :-1], r.rates[:-1, :-1], rtol=1e-14)
        P = cumulative_hazard(r, "period").values
        np.testing.assert_allclose(P[:, 1:] - P[:, :-1], r.rates[:, :-1], rtol=1e-12)

    def test_zero_background_is_bit_identical(self, rng):
        w = LexisWindow(1990, 1993, 60, 64)
        r = death_rates(MortalitySurface(w, rng.poisson(50, size=w.shape).astype(float), np.full(w.shape, 1e3)))
        a = cumulative_hazard(r, "cohort").values
        b = cumulative_hazard(r, "cohort", background=np.zeros(w.shape)).values
        np.testing.assert_array_equal(a, b)

    def test_negative_entries_and_floor(self):
        w = LexisWindow(2000, 2000, 20, 22)
        r = death_rates(constant_surface(w, 0.01))
        table = cumulative_hazard(r, "cohort", background=np.full(w.shape, 0.02))
        assert table.n_negative == 2
        np.testing.assert_array_equal(table.floored(), 0.0)

    def test_background_shape_checked(self):
        w = LexisWindow(2000, 2000, 20, 22)
        with pytest.raises(StructuralError):
            cumulative_hazard(death_rates(constant_surface(w)), "cohort", background=np.zeros((2, 2)))

    def test_table_rejects_negative_without_background(self):
        w = LexisWindow(2000, 2000, 20, 21)
        with pytest.raises(CleaningError):
            CumulativeHazardTable(w, np.array([[0.0, -1.0]]), HazardMode.COHORT)


class TestSimulation:
    def test_degenerate_poisson_mean(self):
        w = LexisWindow(2000, 2009, 30, 39)
        F = BaselineParams.constant(w.years, w.ages, math.log(0.01))
        s = simulate_surface(FrailtySpec.degenerate(), F, w, 1e6, seed=4)
        mean = s.deaths.mean()
        assert abs(mean - 1e4) < 3 * math.sqrt(1e4 / 100)

    def test_gamma_construction_identity(self):
        w = LexisWindow(2000, 2004, 50, 59)
        F = BaselineParams.gompertz(w.years, w.ages, -9.0, 0.1)
        s = simulate_surface(FrailtySpec.gamma(0.5), F, w, 1.0, seed=0, poisson=False)
        grid = F.grid()
        I = integrated_baseline_exact(grid)
        np.testing.assert_allclose(s.deaths / grid, 1.0 / (1.0 + 0.5 * I), rtol=1e-14)
        np.testing.assert_allclose(s.deaths, nu_prime(FrailtySpec.gamma(0.5), I) * grid, rtol=1e-15)

    def test_same_seed_identical(self):
        w = LexisWindow(2000, 2004, 50, 59)
        F = BaselineParams.gompertz(w.years, w.ages, -9.0, 0.1)
        a = simulate_surface(FrailtySpec.gamma(0.5), F, w, 1e5, seed=11)
        b = simulate_surface(FrailtySpec.gamma(0.5), F, w, 1e5, seed=11)
        np.testing.assert_array_equal(a.deaths, b.deaths)

    def test_overflow_rejected(self):
        w = LexisWindow(2000, 2000, 50, 51)
        F = BaselineParams.constant(w.years, w.ages, 40.0)
        with pytest.raises(ParameterDomainError):
            simulate_surface(FrailtySpec.degenerate(), F, w, 1e6, seed=0)

    def test_integrated_baseline_telescopes(self):
        F = np.arange(1, 13, dtype=float).reshape(3, 4) / 100
        I = integrated_baseline_exact(F)
        np.testing.assert_array_equal(I[:, 0], 0.0)
        np.testing.assert_allclose(I[1:, 1:] - I[:-1, :-1], F[:-1, :-1], rtol=1e-14)


class TestHMD:
    def test_two_records(self):
        text = HEADER + "  1950   20   10.0   30.0   40.0\n  1950   21   11.0   29.0   40.0\n"
        table = parse_hmd_table(text, "Male")
        assert table.triples() == [(1950, 20, 30.0), (1950, 21, 29.0)]

    def test_open_age_and_missing(self):
        text = HEADER + "  1950   109   1.0   2.0   3.0\n  1950   110+   .   2.0   3.0\n"
        table = parse_hmd_table(text, "Female")
        assert table.ages == [109, 110]
        assert table.is_missing(1950, 110)

    def test_wrong_field_count_reports_line(self):
        text = HEADER + "  1950   20   10.0   30.0   40.0\n  1950   21   11.0   29.0\n"
        with pytest.raises(ParseError, match="line 5"):
            parse_hmd_table(text, "Total")

    def test_unparsable_number(self):
        text = HEADER + "  1950   20   1O.0   30.0   40.0\n"
        with pytest.raises(ParseError, match="line 4"):
            parse_hmd_table(text, "Total")

    def test_non_contiguous(self):
        text = HEADER + "  1950   20   1   1   1\n  1950   22   1   1   1\n"
        with pytest.raises(StructuralError):
            parse_hmd_table(text, "Total")
        text = HEADER + "  1950   20   1   1   1\n  1952   20   1   1   1\n"
        with pytest.raises(StructuralError):
            parse_hmd_table(text, "Total")

    def test_duplicate(self):
        text = HEADER + "  1950   20   1   1   1\n  1950   20   1   1   1\n"
        with pytest.raises(StructuralError, match="duplicate"):
            parse_hmd_table(text, "Total")

    def test_round_trip(self, tmp_path, rng):
        w = LexisWindow(1990, 1992, 108, 110)
        grid = rng.uniform(0, 100, size=w.shape)
        path = tmp_path / "d.txt"
        path.write_text(format_hmd_table(grid, w.years, w.ages, "Test"), encoding="utf-8")
        table = read_hmd_file(path, "Total")
        s = build_surface(table, table, w)
        np.testing.assert_array_equal(s.deaths, grid)

    def test_parse_build_rates_serialise(self, tmp_path, rng):
        w = LexisWindow(1990, 1991, 60, 62)
        D = rng.uniform(1, 50, size=w.shape)
        E = rng.uniform(500, 1000, size=w.shape)
        dt = parse_hmd_table(format_hmd_table(D, w.years, w.ages, "D"), "Total")
        et = parse_hmd_table(format_hmd_table(E, w.years, w.ages, "E"), "Total")
        rates = death_rates(build_surface(dt, et, w))
        write_grid(tmp_path / "m.csv", w, rates.rates, "m")
        w2, back = read_grid(tmp_path / "m.csv")
        assert w2 == w
        np.testing.assert_array_equal(back, D / E)
        assert b"\r" not in (tmp_path / "m.csv").read_bytes()
