"""Pseudo-likelihood estimation of stochastic frailty models.

Mean frailty in every cell is evaluated at the empirical cumulative hazard,
``c = nu'(nu^{-1}(H))``, which separates frailty and baseline parameters:
for fixed frailty the baseline is an ordinary Poisson fit with exposure
``c * E``.  On top of that sit

* the profile likelihood over the frailty parameters (golden section in one
  dimension, Nelder-Mead in two),
* the switching algorithm (alternating baseline and frailty maximisation,
  with a closed-form Newton step for Gamma frailty),
* an EM algorithm for additive models ``c F + G`` treated as two competing
  risks,
* a back-test criterion for choosing the frailty variance by forecast fit.
"""

from __future__ import annotations

import enum
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .baseline import (
    BaselineModel,
    BaselineParams,
    baseline_grid,
    fit_weighted_poisson,
)
from .data import (
    CumulativeHazardTable,
    HazardMode,
    LexisWindow,
    MortalitySurface,
    cumulative_hazard,
    death_rates,
)
from .errors import (
    AlgorithmError,
    ConvergenceError,
    EvaluationError,
    FitError,
    FrailtyOverflowError,
    NumericalError,
    ParameterDomainError,
    StructuralError,
)
from .frailty import Family, FrailtySpec, mean_frailty_from_H

__all__ = [
    "FitMode",
    "FittedModel",
    "SearchConfig",
    "ProfileGrid",
    "BacktestResult",
    "pseudo_rate",
    "pseudo_log_likelihood",
    "fit_fixed_frailty",
    "profile_fit",
    "profile_grid",
    "switching_fit",
    "gamma_sigma2_step",
    "gamma_sigma2_derivatives",
    "em_fit_additive",
    "backtest_sigma2",
    "golden_section_max",
]

LOGLIK_TOL = 1e-8
STABLE_ALPHA_MAX = 1.0 - 1e-6


class FitMode(str, enum.Enum):
    COHORT_MULTIPLICATIVE = "cohort"
    PERIOD_MULTIPLICATIVE = "period"
    COHORT_ADDITIVE = "additive"

    @classmethod
    def parse(cls, value) -> "FitMode":
        if isinstance(value, FitMode):
            return value
        key = str(value).strip().lower()
        aliases = {
            "cohortmultiplicative": "cohort",
            "cohort_multiplicative": "cohort",
            "periodmultiplicative": "period",
            "period_multiplicative": "period",
            "cohortadditive": "additive",
            "cohort_additive": "additive",
        }
        try:
            return cls(aliases.get(key, key))
        except ValueError:
            raise ParameterDomainError(f"unknown fit mode {value!r}") from None

    @property
    def hazard_mode(self) -> HazardMode:
        return HazardMode.PERIOD if self is FitMode.PERIOD_MULTIPLICATIVE else HazardMode.COHORT


@dataclass(frozen=True, eq=False)
class FittedModel:
    """Result of any estimation routine.

    ``hazard_table`` is the table the final fit used: the cohort or period
    cumulative hazard for multiplicative models, and the background-subtracted
    cohort table (before flooring) for additive models.

    ``loglik`` is ``sum(D log mu - mu E)``.  ``trace`` and ``loglik_rel``
    are measured relative to the saturated value ``sum(D log(D/E) - D)``,
    which keeps iteration-to-iteration changes resolvable on large surfaces.
    """

    frailty: FrailtySpec
    baseline: BaselineParams
    hazard_table: CumulativeHazardTable
    mode: FitMode
    loglik: float
    background: BaselineParams | None = None
    trace: list = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)

    @property
    def window(self) -> LexisWindow:
        return self.hazard_table.window

    @property
    def loglik_rel(self) -> float:
        return self.trace[-1]

    def mean_frailty(self) -> np.ndarray:
        return mean_frailty_from_H(self.frailty, self.hazard_table.floored())

    def fitted_rates(self) -> np.ndarray:
        return pseudo_rate(self.frailty, self.baseline, self.hazard_table, self.background)


@dataclass
class SearchConfig:
    """Settings for profile and switching searches over frailty parameters."""

    upper: float = 2.0
    xtol: float = 1e-8
    max_widenings: int = 3
    alpha_start: float = 0.25
    sigma2_start: float = 0.5
    fatol: float = LOGLIK_TOL
    max_evaluations: int = 2000
    threads: int = 1
    em_max_iter: int = 5000


@dataclass(frozen=True, eq=False)
class ProfileGrid:
    """Profile log-likelihood evaluated on an ``alpha x sigma2`` grid."""

    alpha: np.ndarray
    sigma2: np.ndarray
    loglik: np.ndarray  # shape (len(alpha), len(sigma2))

    def rows(self):
        for i, a in enumerate(self.alpha):
            for j, s in enumerate(self.sigma2):
                yield float(a), float(s), float(self.loglik[i, j])

    def argmax(self) -> tuple[float, float, float]:
        finite = np.where(np.isfinite(self.loglik), self.loglik, -np.inf)
        i, j = np.unravel_index(int(np.argmax(finite)), finite.shape)
        return float(self.alpha[i]), float(self.sigma2[j]), float(self.loglik[i, j])


# -- pseudo-likelihood -------------------------------------------------------

def pseudo_rate(frailty: FrailtySpec, baseline: BaselineParams, hazard_table: CumulativeHazardTable,
                background: BaselineParams | None = None) -> np.ndarray:
    """``nu'(nu^{-1}(H)) F (+ G)`` over the hazard table's window."""
    w = hazard_table.window
    c = mean_frailty_from_H(frailty, hazard_table.floored())
    mu = c * baseline_grid(baseline, w)
    if background is not None:
        mu = mu + baseline_grid(background, w)
    return mu


def saturated_loglik(D, E, mask) -> float:
    """``sum(D log(D/E) - D)``: the log-likelihood with every cell at its observed rate."""
    pos = mask & (D > 0)
    return float(np.sum(D[pos] * (np.log(D[pos] / E[pos]) - 1.0)))


def _loglik_rel(D, E, mu, mask) -> float:
    # log-likelihood minus the saturated constant; the summands are small, so
    # differences between nearby fits keep their precision on large surfaces
    bad = mask & (D > 0) & ~(mu > 0)
    if bad.any():
        i, j = np.argwhere(bad)[0]
        raise EvaluationError(f"non-positive rate {mu[i, j]!r} at cell ({i}, {j}) with deaths")
    pos = mask & (D > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(pos, mu * E / np.where(pos, D, 1.0), 1.0)
        terms = np.where(pos, D * np.log(ratio) - (mu * E - D), -mu * E)
    return float(np.sum(terms[mask]))


def _loglik(D, E, mu, mask) -> float:
    return _loglik_rel(D, E, mu, mask) + saturated_loglik(D, E, mask)


def pseudo_log_likelihood(frailty: FrailtySpec, baseline: BaselineParams, surface: MortalitySurface,
                          hazard_table: CumulativeHazardTable, background: BaselineParams | None = None) -> float:
    """``sum(D log mu - mu E)`` over cells with ``E > 0`` (``log D!`` omitted)."""
    if hazard_table.window != surface.window:
        raise StructuralError(f"hazard table window {hazard_table.window} != surface window {surface.window}")
    mu = pseudo_rate(frailty, baseline, hazard_table, background)
    return _loglik(surface.deaths, surface.exposures, mu, surface.observed)


# -- multiplicative models ---------------------------------------------------

def _hazard(surface: MortalitySurface, mode: FitMode) -> CumulativeHazardTable:
    return cumulative_hazard(death_rates(surface), mode.hazard_mode)


def fit_fixed_frailty(frailty: FrailtySpec, surface: MortalitySurface, mode, baseline_model,
                      hazard_table: CumulativeHazardTable | None = None,
                      init: BaselineParams | None = None) -> FittedModel:
    """Baseline ML fit with frailty held fixed (multiplicative modes).

    The baseline is fitted to the deaths with exposure ``c E`` where
    ``c = nu'(nu^{-1}(H))`` is the pseudo mean frailty.
    """
    mode = FitMode.parse(mode)
    if mode is FitMode.COHORT_ADDITIVE:
        raise ParameterDomainError("additive models are fitted with em_fit_additive")
    if hazard_table is None:
        hazard_table = _hazard(surface, mode)
    c = mean_frailty_from_H(frailty, hazard_table.values)
    fit = fit_weighted_poisson(baseline_model, surface.deaths, c * surface.exposures, surface.window, init=init)
    mu = pseudo_rate(frailty, fit.params, hazard_table)
    rel = _loglik_rel(surface.deaths, surface.exposures, mu, surface.observed)
    ll = rel + saturated_loglik(surface.deaths, surface.exposures, surface.observed)
    return FittedModel(frailty, fit.params, hazard_table, mode, ll, trace=[rel],
                       diagnostics={"baseline_iterations": fit.iterations})


def golden_section_max(f, lo: float, hi: float, xtol: float = 1e-8, max_iter: int = 500):
    """Maximise a unimodal function on ``[lo, hi]``.

    The left end point is also evaluated, so a boundary maximum at ``lo`` is
    returned exactly (ties go to the lower argument).

    Returns
    -------
    x, fx, evaluations : float, float, list of (x, fx)
    """
    evals = []

    def g(x):
        fx = f(x)
        evals.append((x, fx))
        return fx

    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = g(c), g(d)
    for _ in range(max_iter):
        if b - a <= xtol:
            break
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = g(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = g(d)
    x, fx = (c, fc) if fc >= fd else (d, fd)
    f_lo = g(lo)
    if f_lo >= fx:
        x, fx = lo, f_lo
    return x, fx, evals


class _Evaluator:
    """Profile log-likelihood as a function of frailty parameters, with warm starts."""

    def __init__(self, family: Family, surface, mode, baseline_model, background_model, config: SearchConfig):
        self.family = family
        self.surface = surface
        self.mode = mode
        self.baseline_model = BaselineModel.parse(baseline_model)
        self.background_model = background_model
        self.config = config
        self.table = None if mode is FitMode.COHORT_ADDITIVE else _hazard(surface, mode)
        self.cache: dict[tuple[float, float], FittedModel] = {}
        self.last: FittedModel | None = None
        self.failures: list[tuple[float, float, str]] = []

    def spec(self, alpha: float, sigma2: float) -> FrailtySpec:
        return FrailtySpec.of(self.family, max(sigma2, 0.0), alpha)

    def fit(self, alpha: float, sigma2: float) -> FittedModel:
        key = (float(alpha), float(sigma2))
        if key in self.cache:
            return self.cache[key]
        spec = self.spec(alpha, sigma2)
        warm = self.last
        if self.mode is FitMode.COHORT_ADDITIVE:
            fit = em_fit_additive(
                spec, self.surface, self.baseline_model, self.background_model,
                init_baseline=warm.baseline if warm else None,
                init_background=warm.background if warm else None,
                max_iter=self.config.em_max_iter,
            )
        else:
            fit = fit_fixed_frailty(spec, self.surface, self.mode, self.baseline_model, self.table,
                                    init=warm.baseline if warm else None)
        self.cache[key] = fit
        self.last = fit
        return fit

    def loglik(self, alpha: float, sigma2: float) -> float:
        try:
            return self.fit(alpha, sigma2).loglik_rel
        except (EvaluationError, FrailtyOverflowError, FitError):
            # infeasible point
            return -np.inf
        except (AlgorithmError, ConvergenceError) as exc:
            # EM is only guaranteed to climb for fixed c, and c moves with the
            # background, so an evaluation can fail; the search treats it as
            # infeasible and reports it.  Elsewhere such failures propagate.
            if self.mode is not FitMode.COHORT_ADDITIVE:
                raise
            self.failures.append((float(alpha), float(sigma2), str(exc)))
            return -np.inf


def _search_sigma2(objective, config: SearchConfig):
    """Golden section over ``[0, upper]``, widening the interval when the optimum sits at its top."""
    upper = config.upper
    evaluations = []
    for _ in range(config.max_widenings + 1):
        x, fx, ev = golden_section_max(objective, 0.0, upper, xtol=config.xtol)
        evaluations.extend(ev)
        if x < 0.99 * upper:
            break
        upper *= 4.0
    if not np.isfinite(fx):
        raise ConvergenceError("every profile evaluation failed", [e[1] for e in evaluations])
    return x, fx, evaluations


def profile_fit(family, surface: MortalitySurface, mode, baseline_model, config: SearchConfig | None = None,
                background_model=None, alpha: float | None = None) -> FittedModel:
    """Maximise the profile pseudo-likelihood over the frailty parameters.

    Gamma and inverse Gaussian families (or the stable family with ``alpha``
    fixed) are searched by golden section over ``sigma2``.  The stable family
    with free ``alpha`` is searched by Nelder-Mead over ``(alpha, log sigma2)``.
    For ``mode="additive"`` each evaluation runs the EM algorithm; an EM run
    that fails (likelihood decrease or no convergence) counts as an infeasible
    point and is listed in ``diagnostics["failed_evaluations"]``.
    """
    family = Family.parse(family) if not isinstance(family, Family) else family
    mode = FitMode.parse(mode)
    config = config or SearchConfig()
    if family is Family.DEGENERATE:
        raise ParameterDomainError("nothing to profile for the degenerate family")
    if mode is FitMode.COHORT_ADDITIVE and background_model is None:
        raise ParameterDomainError("additive mode needs a background model")
    ev = _Evaluator(family, surface, mode, baseline_model, background_model, config)

    if family is not Family.STABLE or alpha is not None:
        a = float(alpha or 0.0)
        x, fx, evaluations = _search_sigma2(lambda s: ev.loglik(a, s), config)
        best = ev.fit(a, x)
        profile = [(a, s, ev.cache[(a, s)].loglik) for s, l in evaluations if np.isfinite(l)]
    else:
        def negative(p):
            a = float(np.clip(p[0], 0.0, STABLE_ALPHA_MAX))
            return -ev.loglik(a, float(np.exp(p[1])))

        start = np.array([config.alpha_start, math.log(config.sigma2_start)])
        fatol = config.fatol
        res = minimize(negative, start, method="Nelder-Mead",
                       options={"xatol": np.inf, "fatol": fatol, "maxfev": config.max_evaluations,
                                "initial_simplex": [start, start + [0.1, 0.0], start + [0.0, 0.5]]})
        if not res.success:
            raise ConvergenceError(f"Nelder-Mead did not converge: {res.message}")
        a = float(np.clip(res.x[0], 0.0, STABLE_ALPHA_MAX))
        best = ev.fit(a, float(np.exp(res.x[1])))
        profile = [(k[0], k[1], v.loglik) for k, v in ev.cache.items()]

    diagnostics = dict(best.diagnostics)
    diagnostics["profile_evaluations"] = sorted(profile)
    diagnostics["failed_evaluations"] = list(ev.failures)
    return FittedModel(best.frailty, best.baseline, best.hazard_table, best.mode, best.loglik,
                       best.background, trace=list(best.trace), diagnostics=diagnostics)


def profile_grid(family, surface: MortalitySurface, mode, baseline_model, alphas, sigma2s,
                 background_model=None, threads: int = 1, config: SearchConfig | None = None) -> ProfileGrid:
    """Profile log-likelihood on a grid, for contour plots.

    Rows of the grid are independent and are evaluated concurrently when
    ``threads > 1``; results do not depend on scheduling.
    """
    family = Family.parse(family) if not isinstance(family, Family) else family
    mode = FitMode.parse(mode)
    config = config or SearchConfig()
    alphas = np.atleast_1d(np.asarray(alphas, dtype=float))
    sigma2s = np.atleast_1d(np.asarray(sigma2s, dtype=float))

    def row(alpha):
        ev = _Evaluator(family, surface, mode, baseline_model, background_model, config)
        const = saturated_loglik(surface.deaths, surface.exposures, surface.observed)
        return [ev.loglik(alpha, s) + const for s in sigma2s]

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(row, alphas))
    else:
        rows = [row(a) for a in alphas]
    return ProfileGrid(alphas, sigma2s, np.array(rows))


# -- Gamma closed-form step ---------------------------------------------------

def gamma_sigma2_derivatives(sigma2: float, D, H, FE):
    """Value, first and second derivative of ``sum(-s D H - exp(-s H) F E)`` at ``s = sigma2``."""
    D, H, FE = (np.asarray(v, dtype=float) for v in (D, H, FE))
    w = np.exp(-sigma2 * H) * FE
    value = float(np.sum(-sigma2 * D * H - w))
    first = float(np.sum(-D * H + H * w))
    second = float(-np.sum(H * H * w))
    return value, first, second


def gamma_sigma2_step(surface: MortalitySurface, hazard_table: CumulativeHazardTable, baseline_values) -> float:
    """Maximiser over ``sigma2 >= 0`` of the Gamma pseudo-likelihood at fixed baseline.

    Parameters
    ----------
    surface : MortalitySurface
    hazard_table : CumulativeHazardTable
    baseline_values : array
        ``F * E`` on the window.

    Notes
    -----
    The objective is strictly concave, its derivative convex and decreasing,
    so Newton iterates started at 0 increase monotonically to the root.  A
    bisection bracket guards against rounding.  A non-positive derivative at
    0 means the maximum sits on the boundary.
    """
    mask = surface.observed
    D = surface.deaths[mask]
    H = hazard_table.floored()[mask]
    FE = np.asarray(baseline_values, dtype=float)[mask]
    _, d0, _ = gamma_sigma2_derivatives(0.0, D, H, FE)
    if not d0 > 0:
        return 0.0
    lo, hi = 0.0, None
    s = 0.0
    for _ in range(200):
        _, d1, d2 = gamma_sigma2_derivatives(s, D, H, FE)
        if d1 > 0:
            lo = max(lo, s)
        else:
            hi = s if hi is None else min(hi, s)
        if d1 == 0 or d2 == 0:
            break
        new = s - d1 / d2
        if hi is not None and not lo < new < hi:
            new = 0.5 * (lo + hi)
        if abs(new - s) <= 1e-15 * max(1.0, s):
            s = new
            break
        s = new
    return float(s)


# -- switching algorithm -----------------------------------------------------

def switching_fit(family, surface: MortalitySurface, mode, baseline_model, phi0,
                  config: SearchConfig | None = None, max_iter: int = 10000, tol: float = LOGLIK_TOL) -> FittedModel:
    """Alternate baseline maximisation (frailty fixed) and frailty maximisation (baseline fixed).

    Parameters
    ----------
    family : Family or str
    surface : MortalitySurface
    mode : FitMode (multiplicative modes)
    baseline_model : BaselineModel or str
    phi0 : FrailtySpec or float
        Starting frailty; a float is read as ``sigma2`` of ``family``.
    tol : float
        Stop when a full cycle raises the log-likelihood by less than this.
    """
    family = Family.parse(family) if not isinstance(family, Family) else family
    mode = FitMode.parse(mode)
    config = config or SearchConfig()
    if mode is FitMode.COHORT_ADDITIVE:
        raise ParameterDomainError("switching is implemented for multiplicative modes")
    if isinstance(phi0, FrailtySpec):
        phi = phi0
    else:
        phi = FrailtySpec.of(family, float(phi0), config.alpha_start if family is Family.STABLE else 0.0)
    table = _hazard(surface, mode)
    mask = surface.observed

    fit = fit_fixed_frailty(phi, surface, mode, baseline_model, table)
    trace = [fit.loglik_rel]
    outer = 0

    def check(new):
        if new < trace[-1] - 1e-6:
            raise AlgorithmError(f"switching decreased the log-likelihood from {trace[-1]!r} to {new!r}", trace + [new])

    for outer in range(1, max_iter + 1):
        start = trace[-1]
        F = baseline_grid(fit.baseline, surface.window)

        def partial(spec):
            return _loglik_rel(surface.deaths, surface.exposures, mean_frailty_from_H(spec, table.values) * F, mask)

        if family is Family.GAMMA:
            s2 = gamma_sigma2_step(surface, table, F * surface.exposures)
            candidate = FrailtySpec.of(Family.GAMMA, s2)
        elif family is Family.STABLE:
            def negative(p):
                a = float(np.clip(p[0], 0.0, STABLE_ALPHA_MAX))
                try:
                    return -partial(FrailtySpec.of(family, float(np.exp(p[1])), a))
                except NumericalError:
                    return np.inf
            a0 = phi.alpha if not phi.is_degenerate else config.alpha_start
            s0 = phi.sigma2 if not phi.is_degenerate else config.sigma2_start
            res = minimize(negative, [a0, math.log(s0)], method="Nelder-Mead",
                           options={"xatol": 1e-10, "fatol": config.fatol,
                                    "maxfev": config.max_evaluations})
            candidate = FrailtySpec.of(family, float(np.exp(res.x[1])), float(np.clip(res.x[0], 0.0, STABLE_ALPHA_MAX)))
        else:
            def objective(s2):
                try:
                    return partial(FrailtySpec.of(family, s2))
                except NumericalError:
                    return -np.inf
            s2, _, _ = _search_sigma2(objective, config)
            candidate = FrailtySpec.of(family, s2)

        l_phi = partial(candidate)
        if l_phi >= trace[-1]:
            phi = candidate
        else:
            l_phi = trace[-1]
        check(l_phi)
        trace.append(l_phi)

        fit = fit_fixed_frailty(phi, surface, mode, baseline_model, table, init=fit.baseline)
        check(fit.loglik_rel)
        trace.append(fit.loglik_rel)
        if trace[-1] - start < tol:
            break
    else:
        raise ConvergenceError(f"switching algorithm did not converge in {max_iter} iterations", trace)

    diagnostics = dict(fit.diagnostics)
    diagnostics["outer_iterations"] = outer
    return FittedModel(fit.frailty, fit.baseline, table, mode, fit.loglik, trace=trace, diagnostics=diagnostics)


# -- additive models via EM ---------------------------------------------------

def _initial_background(rates: np.ndarray, mask: np.ndarray, window: LexisWindow, model) -> BaselineParams:
    model = BaselineModel.parse(model)
    if model is not BaselineModel.CONSTANT:
        raise ParameterDomainError("default EM initialisation only covers the constant background model")
    m = np.where(mask & (rates > 0), rates, np.inf)
    floor = 0.5 * np.min(m, axis=1)
    floor = np.where(np.isfinite(floor), floor, 1e-6)
    return BaselineParams.constant(window.years, window.ages, np.log(floor))


def em_fit_additive(frailty: FrailtySpec, surface: MortalitySurface, baseline_model, background_model=None,
                    init_baseline: BaselineParams | None = None, init_background: BaselineParams | None = None,
                    max_iter: int = 5000, tol: float = LOGLIK_TOL) -> FittedModel:
    """EM fit of ``mu = nu'(nu^{-1}(H(G))) F + G`` at fixed frailty.

    Each iteration recomputes the background-subtracted cohort hazard and the
    pseudo mean frailty ``c``, splits the deaths between the two terms in
    proportion to ``c F`` and ``G`` (E-step), then refits ``F`` with data
    ``D_base`` and exposure ``c E`` and ``G`` with data ``D_back`` and
    exposure ``E`` (M-step).

    With ``background_model=None`` the background is identically zero and
    the result is the multiplicative cohort fit.

    Negative cumulative hazards (observed rates below the background) are
    floored at zero before inversion; the number of floored cells is
    reported in ``diagnostics["n_floored"]``.
    """
    rates = death_rates(surface)
    w = surface.window
    mask = surface.observed
    D, E = surface.deaths, surface.exposures

    if init_baseline is None or init_baseline.model is not BaselineModel.parse(baseline_model):
        init_baseline = fit_weighted_poisson(baseline_model, D, E, w).params
    baseline = init_baseline
    if background_model is None:
        background = None
        G = np.zeros(w.shape)
    else:
        background = init_background or _initial_background(rates.rates, mask, w, background_model)
        G = baseline_grid(background, w)

    trace: list[float] = []
    n_floor = 0
    for it in range(1, max_iter + 2):
        table = cumulative_hazard(rates, HazardMode.COHORT, background=G if background is not None else None)
        n_floor = table.n_negative
        c = mean_frailty_from_H(frailty, table.floored())
        F = baseline_grid(baseline, w)
        lam_base = c * F
        ll = _loglik_rel(D, E, lam_base + G, mask)
        if trace and ll < trace[-1] - tol:
            raise AlgorithmError(f"EM decreased the pseudo log-likelihood from {trace[-1]!r} to {ll!r}", trace + [ll])
        trace.append(ll)
        if len(trace) > 1 and abs(trace[-1] - trace[-2]) < tol:
            break
        if it > max_iter:
            raise ConvergenceError(f"EM did not converge in {max_iter} iterations", trace)

        share = np.where(lam_base + G > 0, lam_base / np.where(lam_base + G > 0, lam_base + G, 1.0), 1.0)
        D_base = D * share
        baseline = fit_weighted_poisson(baseline_model, D_base, c * E, w, init=baseline).params
        if background is not None:
            D_back = D - D_base
            background = fit_weighted_poisson(background_model, D_back, E, w, init=background).params
            G = baseline_grid(background, w)

    share = np.where(lam_base + G > 0, lam_base / np.where(lam_base + G > 0, lam_base + G, 1.0), 1.0)
    diagnostics = {"iterations": len(trace) - 1, "n_floored": n_floor, "base_share": share}
    ll = trace[-1] + saturated_loglik(D, E, mask)
    return FittedModel(frailty, baseline, table, FitMode.COHORT_ADDITIVE, ll, background,
                       trace=trace, diagnostics=diagnostics)


# -- back-test ---------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class BacktestResult:
    sigma2: float
    value: float
    curve_sigma2: np.ndarray
    curve_value: np.ndarray
    evaluations: list = field(default_factory=list)

    def grid_argmax(self) -> float:
        return float(self.curve_sigma2[int(np.argmax(self.curve_value))])


def backtest_sigma2(surface_full: MortalitySurface, fit_window: LexisWindow, test_window: LexisWindow,
                    baseline_model=BaselineModel.LEE_CARTER, grid=None, search: bool = True,
                    upper: float = 2.0, xtol: float = 1e-6, family=Family.GAMMA,
                    threads: int = 1) -> BacktestResult:
    """Choose ``sigma2`` by the out-of-sample fit of deterministic forecasts.

    For each ``sigma2`` the model is fitted in period mode on ``fit_window``,
    the index is forecast by its mean drift path over ``test_window`` and
    ``f(sigma2) = sum(D log mu - mu E)`` is computed on the test cells.
    """
    from .forecasting import fit_random_walk, forecast_index, forecast_mortality

    if test_window.t_min != fit_window.t_max + 1:
        raise StructuralError("test window must start the year after the fit window ends")
    if (test_window.x_min, test_window.x_max) != (fit_window.x_min, fit_window.x_max):
        raise StructuralError("fit and test windows must cover the same ages")
    fit_surface = surface_full.restrict(fit_window)
    test_surface = surface_full.restrict(test_window)
    horizon = test_window.t_max - test_window.t_min + 1
    family = Family.parse(family) if not isinstance(family, Family) else family
    table = cumulative_hazard(death_rates(fit_surface), HazardMode.PERIOD)
    cache: dict[float, float] = {}

    def f(s2: float) -> float:
        s2 = float(s2)
        if s2 in cache:
            return cache[s2]
        spec = FrailtySpec.of(family, s2)
        fitted = fit_fixed_frailty(spec, fit_surface, FitMode.PERIOD_MULTIPLICATIVE, baseline_model, table)
        drift = fit_random_walk(fitted.baseline.theta)
        path = forecast_index(drift, fitted.baseline.theta[-1], horizon).mean
        mu = forecast_mortality(fitted, path)
        value = _loglik(test_surface.deaths, test_surface.exposures, mu, test_surface.observed)
        cache[s2] = value
        return value

    if grid is None:
        grid = np.linspace(0.0, upper, 41)
    grid = np.asarray(grid, dtype=float)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            values = np.array(list(pool.map(f, grid)))
    else:
        values = np.array([f(s) for s in grid])
    best_grid = int(np.argmax(values))
    if search:
        lo = grid[max(best_grid - 1, 0)]
        hi = grid[min(best_grid + 1, len(grid) - 1)]
        x, fx, evals = golden_section_max(f, float(lo), float(hi), xtol=xtol)
        if values[best_grid] > fx:
            x, fx = float(grid[best_grid]), float(values[best_grid])
    else:
        x, fx, evals = float(grid[best_grid]), float(values[best_grid]), []
    return BacktestResult(float(x), float(fx), grid, values, evals)
