"""Stochastic frailty mortality models.

Fit multiplicative and additive frailty models to death-count and exposure
surfaces by pseudo-likelihood, and forecast death rates and life expectancy.
"""

from .baseline import BaselineModel, BaselineParams, fit_weighted_poisson
from .data import LexisWindow, MortalitySurface, build_surface, cumulative_hazard, death_rates, simulate_surface
from .errors import (
    ConfigError,
    DataError,
    FrailMortError,
    NumericalError,
)
from .estimation import (
    FitMode,
    FittedModel,
    SearchConfig,
    backtest_sigma2,
    em_fit_additive,
    fit_fixed_frailty,
    profile_fit,
    pseudo_log_likelihood,
    switching_fit,
)
from .forecasting import forecast, period_life_expectancy
from .frailty import Family, FrailtySpec, mean_frailty_from_H, nu, nu_inverse, nu_prime

__version__ = "0.1.0"

__all__ = [
    "BaselineModel",
    "BaselineParams",
    "ConfigError",
    "DataError",
    "Family",
    "FitMode",
    "FittedModel",
    "FrailMortError",
    "FrailtySpec",
    "LexisWindow",
    "MortalitySurface",
    "NumericalError",
    "SearchConfig",
    "backtest_sigma2",
    "build_surface",
    "cumulative_hazard",
    "death_rates",
    "em_fit_additive",
    "fit_fixed_frailty",
    "fit_weighted_poisson",
    "forecast",
    "mean_frailty_from_H",
    "nu",
    "nu_inverse",
    "nu_prime",
    "period_life_expectancy",
    "profile_fit",
    "pseudo_log_likelihood",
    "simulate_surface",
    "switching_fit",
]
