"""Forecasting fragilized mortality.

The time index of the baseline follows a random walk with drift.  Mean
frailty is carried forward through the integrated baseline ``I``: inside the
data window ``I = nu^{-1}(H)``, beyond it ``I`` accumulates the forecast
baseline down each cohort diagonal (cohort models) or across ages within the
year (period models).  The forecast rate is ``nu'(I) F (+ G)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .baseline import BaselineParams, LogisticExtension, fit_logistic_grid, intensity
from .data import HazardMode, LexisWindow
from .errors import ParameterDomainError, StructuralError
from .estimation import FittedModel
from .frailty import nu_inverse, nu_prime

__all__ = [
    "Z95",
    "DriftModel",
    "IndexForecast",
    "ForecastResult",
    "fit_random_walk",
    "forecast_index",
    "forecast_integrated_baseline",
    "forecast_mortality",
    "period_life_expectancy",
    "life_expectancy_series",
    "improvement_rates",
    "forecast",
]

Z95 = 1.959964


@dataclass(frozen=True, eq=False)
class DriftModel:
    """Random walk ``theta_t = theta_{t-1} + xi + U_t`` with ``U_t ~ N(0, Sigma)``."""

    drift: np.ndarray
    cov: np.ndarray
    n_obs: int

    @property
    def dim(self) -> int:
        return len(self.drift)


def fit_random_walk(series) -> DriftModel:
    """Drift and innovation covariance from a series of index vectors.

    Parameters
    ----------
    series : array, shape (n,) or (n, d)
        At least three observations.
    """
    x = np.asarray(series, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] < 3:
        raise ParameterDomainError(f"random walk fit needs at least 3 observations, got {x.shape[0]}")
    dx = np.diff(x, axis=0)
    xi = dx.mean(axis=0)
    resid = dx - xi
    cov = resid.T @ resid / (len(dx) - 1)
    return DriftModel(xi, cov, len(dx))


@dataclass(frozen=True, eq=False)
class IndexForecast:
    """Forecast index paths; arrays have shape ``(horizon, d)``.

    ``lo95_param``/``hi95_param`` include drift-estimation uncertainty.
    ``draws`` has shape ``(n_draws, horizon, d)`` when requested.
    """

    mean: np.ndarray
    lo95: np.ndarray
    hi95: np.ndarray
    lo95_param: np.ndarray
    hi95_param: np.ndarray
    draws: np.ndarray | None = None
    seed: int | None = None


def forecast_index(model: DriftModel, last_value, horizon: int, draws: int = 0, seed: int | None = None) -> IndexForecast:
    """Mean path, marginal 95% bands and optional stochastic draws.

    At horizon ``j`` the variance is ``j Sigma`` without and
    ``j Sigma + j^2 Sigma / n`` with drift uncertainty.  Draws simulate the
    random walk with the estimated drift.
    """
    if horizon < 1:
        raise ParameterDomainError("forecast horizon must be at least 1")
    last = np.atleast_1d(np.asarray(last_value, dtype=float))
    if last.shape != model.drift.shape:
        raise StructuralError(f"last value has dimension {last.shape}, drift model {model.drift.shape}")
    j = np.arange(1, horizon + 1, dtype=float)[:, None]
    mean = last + j * model.drift
    var = np.diag(model.cov)
    sd = np.sqrt(j * var)
    sd_param = np.sqrt(j * var + j * j * var / model.n_obs)
    paths = None
    if draws:
        rng = np.random.default_rng(seed)
        shocks = rng.multivariate_normal(np.zeros(model.dim), model.cov, size=(draws, horizon), method="cholesky") \
            if np.any(model.cov) else np.zeros((draws, horizon, model.dim))
        paths = last + np.cumsum(model.drift + shocks, axis=1)
    return IndexForecast(mean, mean - Z95 * sd, mean + Z95 * sd, mean - Z95 * sd_param, mean + Z95 * sd_param,
                         paths, seed)


def _extend_params(params: BaselineParams, index_path) -> BaselineParams:
    path = np.asarray(index_path, dtype=float)
    if path.ndim == 1:
        path = path[:, None]
    if path.shape[1] != params.theta.shape[1]:
        raise StructuralError(f"index path has dimension {path.shape[1]}, baseline needs {params.theta.shape[1]}")
    t_last = int(params.years[-1])
    years = np.concatenate([params.years, np.arange(t_last + 1, t_last + 1 + len(path))])
    return BaselineParams(params.model, years, params.ages, np.vstack([params.theta, path]), params.eta)


def forecast_integrated_baseline(fitted: FittedModel, index_path) -> tuple[LexisWindow, np.ndarray]:
    """Integrated baseline over the data window followed by the forecast years.

    Returns
    -------
    window : LexisWindow
        Data years plus ``len(index_path)`` forecast years.
    I : array
        ``nu^{-1}(H)`` inside the data window.  In the forecast years, for
        cohort models ``I(t, x_min) = 0`` and ``I(t, x) = I(t-1, x-1) +
        F(theta_{t-1}, eta_{x-1})`` where ``theta_{t_max}`` is the fitted
        index and later values come from the path; for period models
        ``I(t, x) = sum_{u < x} F(theta_t, eta_u)``.
    """
    w = fitted.window
    ext = _extend_params(fitted.baseline, index_path)
    horizon = len(ext.years) - len(fitted.baseline.years)
    full = LexisWindow(w.t_min, w.t_max + horizon, w.x_min, w.x_max)
    F = intensity(ext.model, ext.theta, ext.eta, ext.ages)
    rows, cols = ext.window.slices(full)
    F = F[rows, cols]
    n_t = w.shape[0]
    I = np.zeros(full.shape)
    I[:n_t] = nu_inverse(fitted.frailty, fitted.hazard_table.floored())
    if fitted.hazard_table.mode is HazardMode.PERIOD:
        I[n_t:, 1:] = np.cumsum(F[n_t:, :-1], axis=1)
    else:
        for i in range(n_t, full.shape[0]):
            I[i, 1:] = I[i - 1, :-1] + F[i - 1, :-1]
    return full, I


def forecast_mortality(fitted: FittedModel, index_path, background_path=None, include_window: bool = False):
    """Forecast death rates ``nu'(I) F (+ G)`` over the forecast years.

    Parameters
    ----------
    fitted : FittedModel
    index_path : array, shape (h,) or (h, d)
        Baseline index for years ``t_max + 1 ... t_max + h``.
    background_path : array, optional
        Background index over the same years; by default frozen at the last
        fitted value.  The background never enters ``I``.
    include_window : bool
        Also return the in-window rates, giving an array over all years.
    """
    full, I = forecast_integrated_baseline(fitted, index_path)
    ext = _extend_params(fitted.baseline, index_path)
    F = intensity(ext.model, ext.theta, ext.eta, ext.ages)
    rows, cols = ext.window.slices(full)
    mu = nu_prime(fitted.frailty, I) * F[rows, cols]
    if fitted.background is not None:
        bg = fitted.background
        h = full.shape[0] - fitted.window.shape[0]
        if background_path is None:
            background_path = np.repeat(bg.theta[-1:], h, axis=0)
        bg_ext = _extend_params(bg, background_path)
        G = intensity(bg_ext.model, bg_ext.theta, bg_ext.eta, bg_ext.ages)
        r, c = bg_ext.window.slices(full)
        mu = mu + G[r, c]
    if include_window:
        return mu
    return mu[fitted.window.shape[0]:]


def period_life_expectancy(mu, ages, x0: int = 60, extension: LogisticExtension | None = None,
                           year: int | None = None, top: int = 110) -> float:
    """Remaining life expectancy at ``x0`` for piecewise-constant rates.

    With ``S_0 = 1`` and ``S_{j+1} = S_j exp(-mu_j)`` the result is
    ``sum_j S_j (1 - exp(-mu_j)) / mu_j`` over ages ``x0 ... top - 1``,
    i.e. the exact integral of the survival curve from ``x0`` to ``top``.
    Ages beyond the supplied ones are filled from ``extension`` (evaluated
    for ``year``).
    """
    ages = np.asarray(ages, dtype=int)
    mu = np.asarray(mu, dtype=float)
    need = np.arange(x0, top)
    vals = np.empty(len(need))
    for i, x in enumerate(need):
        hit = np.flatnonzero(ages == x)
        if hit.size:
            vals[i] = mu[hit[0]]
        elif extension is not None and x > ages.max():
            vals[i] = extension.rate(year if year is not None else int(extension.years[0]), float(x))
        else:
            raise StructuralError(f"no death rate for age {x}")
    if np.any(vals < 0) or not np.all(np.isfinite(vals)):
        raise ParameterDomainError("death rates must be finite and non-negative")
    S = np.exp(-np.concatenate([[0.0], np.cumsum(vals)[:-1]]))
    with np.errstate(divide="ignore", invalid="ignore"):
        frac = np.where(vals > 0, -np.expm1(-vals) / vals, 1.0)
    return float(np.sum(S * frac))


def life_expectancy_series(mu, years, ages, x0: int = 60, fit_ages=(70, 90), top: int = 110) -> np.ndarray:
    """``e_{x0}(t)`` for every row of a rate grid.

    When the grid stops below ``top - 1`` each year is completed by a
    logistic curve fitted to that year's rates over ``fit_ages``.
    """
    mu = np.asarray(mu, dtype=float)
    ages = np.asarray(ages, dtype=int)
    years = np.asarray(years, dtype=int)
    ext = None
    if ages.max() < top - 1:
        ext = fit_logistic_grid(mu, years, ages, fit_ages)
    return np.array([period_life_expectancy(mu[i], ages, x0, ext, int(t), top) for i, t in enumerate(years)])


def improvement_rates(mu) -> np.ndarray:
    """``rho(t, x) = -(log mu(t+1, x) - log mu(t, x))``; one row fewer than ``mu``."""
    mu = np.asarray(mu, dtype=float)
    if mu.ndim != 2 or mu.shape[0] < 2:
        raise StructuralError("improvement rates need at least two years of rates")
    if np.any(~(mu > 0)):
        raise ParameterDomainError("improvement rates need strictly positive rates")
    return -np.diff(np.log(mu), axis=0)


@dataclass(frozen=True, eq=False)
class ForecastResult:
    """Everything produced by :func:`forecast`.

    ``window`` covers data and forecast years; ``mu`` and ``integrated``
    are on that window, ``life_expectancy`` is indexed by its years.
    """

    window: LexisWindow
    horizon: int
    drift: DriftModel
    index: IndexForecast
    mu: np.ndarray
    integrated: np.ndarray
    life_expectancy: np.ndarray
    x0: int

    @property
    def forecast_years(self) -> np.ndarray:
        return self.window.years[len(self.window.years) - self.horizon:]


def forecast(fitted: FittedModel, horizon: int, draws: int = 0, seed: int | None = None, x0: int = 60,
             fit_ages=(70, 90), background_path=None) -> ForecastResult:
    """Fit the drift model to the fitted index, forecast ``horizon`` years and summarise."""
    drift = fit_random_walk(fitted.baseline.theta)
    index = forecast_index(drift, fitted.baseline.theta[-1], horizon, draws=draws, seed=seed)
    full, I = forecast_integrated_baseline(fitted, index.mean)
    mu = forecast_mortality(fitted, index.mean, background_path, include_window=True)
    e = life_expectancy_series(mu, full.years, full.ages, x0, fit_ages) if full.x_min <= x0 else np.full(full.shape[0], np.nan)
    return ForecastResult(full, horizon, drift, index, mu, I, e, x0)
