import numpy as np
import pytest

from frailmort.baseline import BaselineParams, baseline_grid
from frailmort.data import LexisWindow, MortalitySurface
from frailmort.frailty import mean_frailty_from_H


def pseudo_exact_surface(frailty, baseline, window, exposure, background=None):
    """Noise-free surface whose rates solve ``m = c(H(m)) F (+ G)`` in cohort mode.

    ``H`` is the empirical cohort hazard of ``m`` itself (with the first-year
    extension and background subtracted), so the pseudo-model holds exactly.
    Rates are built age by age: each cell needs only younger ages.
    """
    F = baseline_grid(baseline, window)
    G = np.zeros(window.shape) if background is None else baseline_grid(background, window)
    n_t, n_x = window.shape
    m = np.zeros((n_t, n_x))
    H = np.zeros((n_t, n_x))
    for i in range(n_t):
        for j in range(n_x):
            if j > 0:
                H[i, j] = (H[0, j - 1] + m[0, j - 1] - G[0, j - 1]) if i == 0 else (H[i - 1, j - 1] + m[i - 1, j - 1] - G[i - 1, j - 1])
            m[i, j] = mean_frailty_from_H(frailty, max(H[i, j], 0.0)) * F[i, j] + G[i, j]
    E = np.full(window.shape, float(exposure))
    return MortalitySurface(window, m * E, E)


def gompertz_truth(window, level=-10.0, drift=-0.01, slope=0.1):
    years = window.years
    return BaselineParams.gompertz(years, window.ages, level + drift * (years - window.t_min), slope)


@pytest.fixture
def small_window():
    return LexisWindow(1950, 1959, 50, 79)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


ACCEPTANCE: dict[int, tuple] = {}


@pytest.fixture
def acceptance():
    """Record the outcome of an acceptance criterion for the end-of-run summary."""

    def record(number: int, ok, detail: str) -> None:
        # ok is None for a skipped criterion
        ACCEPTANCE[number] = (None if ok is None else bool(ok), detail)

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[number]
        status = "SKIP" if ok is None else "PASS" if ok else "FAIL"
        terminalreporter.write_line(f"criterion {number}: {status}  {detail}")
