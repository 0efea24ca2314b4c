"""Baseline and background intensity models with weighted Poisson ML fitting.

Three parametric families ``F(theta_t, eta_x)`` are supported:

* per-year Gompertz       ``exp(theta1_t + theta2_t * x)``
* per-year constant       ``exp(zeta_t)`` (used as background term)
* Lee-Carter              ``exp(a_x + b_x * k_t)`` with ``sum k = 0``, ``sum b = 1``

Fitting treats ``D ~ Poisson(F * E)`` where ``E`` is any non-negative
(possibly frailty-adjusted) exposure and ``D`` may be fractional.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .data import LexisWindow, RateSurface
from .errors import ConvergenceError, FitError, ParameterDomainError, StructuralError

__all__ = [
    "BaselineModel",
    "BaselineParams",
    "BaselineFit",
    "LogisticExtension",
    "intensity",
    "baseline_grid",
    "eval_baseline",
    "poisson_loglik",
    "fit_weighted_poisson",
    "normalize_lee_carter",
    "fit_logistic_extension",
    "fit_logistic_grid",
    "params_to_rows",
    "params_from_rows",
]

REL_TOL = 1e-10
GRAD_TOL = 1e-8
MAX_HALVINGS = 50


class BaselineModel(str, enum.Enum):
    GOMPERTZ = "gompertz"
    CONSTANT = "constant"
    LEE_CARTER = "lee_carter"

    @classmethod
    def parse(cls, name) -> "BaselineModel":
        if isinstance(name, BaselineModel):
            return name
        key = str(name).strip().lower().replace("-", "_")
        aliases = {
            "gompertzperyear": "gompertz",
            "gompertz_per_year": "gompertz",
            "constantbackgroundperyear": "constant",
            "constant_background": "constant",
            "background": "constant",
            "leecarter": "lee_carter",
            "lc": "lee_carter",
        }
        key = aliases.get(key.replace(" ", ""), key)
        try:
            return cls(key)
        except ValueError:
            raise ParameterDomainError(f"unknown baseline model {name!r}") from None

    @property
    def index_dim(self) -> int:
        """Dimension of the time index ``theta_t``."""
        return 2 if self is BaselineModel.GOMPERTZ else 1


@dataclass(frozen=True, eq=False)
class BaselineParams:
    """Fitted or user-supplied baseline parameters.

    ``theta`` has shape ``(n_years, index_dim)``.  ``eta`` holds the age
    parameters: ``(a_x, b_x)`` columns for Lee-Carter, the ages themselves
    for Gompertz and an empty ``(n_ages, 0)`` array for the constant model.
    """

    model: BaselineModel
    years: np.ndarray
    ages: np.ndarray
    theta: np.ndarray
    eta: np.ndarray = None

    def __post_init__(self):
        model = BaselineModel.parse(self.model)
        object.__setattr__(self, "model", model)
        years = np.asarray(self.years, dtype=int).ravel()
        ages = np.asarray(self.ages, dtype=int).ravel()
        theta = np.asarray(self.theta, dtype=float)
        if theta.ndim == 1:
            theta = theta[:, None]
        if theta.shape != (len(years), model.index_dim):
            raise StructuralError(f"theta shape {theta.shape} does not match {len(years)} years x {model.index_dim}")
        if model is BaselineModel.GOMPERTZ:
            eta = ages.astype(float)[:, None]
        elif model is BaselineModel.CONSTANT:
            eta = np.zeros((len(ages), 0))
        else:
            eta = np.asarray(self.eta, dtype=float)
            if eta.shape != (len(ages), 2):
                raise StructuralError(f"Lee-Carter eta must have shape ({len(ages)}, 2), got {eta.shape}")
        for name, arr in (("years", years), ("ages", ages), ("theta", theta), ("eta", eta)):
            arr = np.array(arr)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @classmethod
    def gompertz(cls, years, ages, level, slope) -> "BaselineParams":
        level = np.broadcast_to(np.asarray(level, float), (len(years),))
        slope = np.broadcast_to(np.asarray(slope, float), (len(years),))
        return cls(BaselineModel.GOMPERTZ, years, ages, np.column_stack([level, slope]))

    @classmethod
    def constant(cls, years, ages, zeta) -> "BaselineParams":
        zeta = np.broadcast_to(np.asarray(zeta, float), (len(years),))
        return cls(BaselineModel.CONSTANT, years, ages, zeta[:, None])

    @classmethod
    def lee_carter(cls, years, ages, a, b, k) -> "BaselineParams":
        a = np.broadcast_to(np.asarray(a, float), (len(ages),))
        b = np.broadcast_to(np.asarray(b, float), (len(ages),))
        k = np.broadcast_to(np.asarray(k, float), (len(years),))
        return cls(BaselineModel.LEE_CARTER, years, ages, k[:, None], np.column_stack([a, b]))

    @property
    def window(self) -> LexisWindow:
        return LexisWindow(int(self.years[0]), int(self.years[-1]), int(self.ages[0]), int(self.ages[-1]))

    # named views
    @property
    def a(self) -> np.ndarray:
        return self.eta[:, 0]

    @property
    def b(self) -> np.ndarray:
        return self.eta[:, 1]

    @property
    def k(self) -> np.ndarray:
        return self.theta[:, 0]

    def grid(self) -> np.ndarray:
        return intensity(self.model, self.theta, self.eta, self.ages)

    def with_theta(self, theta) -> "BaselineParams":
        return BaselineParams(self.model, self.years, self.ages, theta, self.eta)


def intensity(model, theta, eta, ages) -> np.ndarray:
    """Evaluate ``F`` for every row of ``theta`` against every age.

    Returns an array of shape ``(len(theta), len(ages))``.
    """
    model = BaselineModel.parse(model)
    theta = np.atleast_2d(np.asarray(theta, dtype=float))
    ages = np.asarray(ages, dtype=float)
    if model is BaselineModel.GOMPERTZ:
        return np.exp(theta[:, :1] + theta[:, 1:2] * ages[None, :])
    if model is BaselineModel.CONSTANT:
        return np.repeat(np.exp(theta[:, :1]), len(ages), axis=1)
    eta = np.asarray(eta, dtype=float)
    return np.exp(eta[None, :, 0] + eta[None, :, 1] * theta[:, :1])


def baseline_grid(params: BaselineParams, window: LexisWindow) -> np.ndarray:
    """``F`` over ``window`` (which must lie inside the parameter domain)."""
    rows, cols = params.window.slices(window)
    return params.grid()[rows, cols]


def eval_baseline(params: BaselineParams, t: int, x: int) -> float:
    i, j = params.window.index(t, x)
    return float(intensity(params.model, params.theta[i : i + 1], params.eta[j : j + 1], params.ages[j : j + 1])[0, 0])


def poisson_loglik(D, E, mu, mask=None) -> float:
    """``sum(D log mu - mu E)`` over cells with ``E > 0``."""
    D = np.asarray(D, float)
    E = np.asarray(E, float)
    if mask is None:
        mask = E > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(D > 0, D * np.log(mu), 0.0) - mu * E
    return float(np.sum(terms[mask]))


@dataclass(frozen=True, eq=False)
class BaselineFit:
    params: BaselineParams
    loglik: float
    trace: list = field(default_factory=list)
    iterations: int = 0


def _check_inputs(D, E, window):
    D = np.asarray(D, dtype=float)
    E = np.asarray(E, dtype=float)
    if D.shape != window.shape or E.shape != window.shape:
        raise StructuralError(f"D/E shapes {D.shape}/{E.shape} do not match window {window.shape}")
    if np.any(~np.isfinite(D)) or np.any(~np.isfinite(E)) or np.any(D < 0) or np.any(E < 0):
        raise ParameterDomainError("deaths and exposures must be finite and non-negative")
    if np.any((E == 0) & (D > 0)):
        raise ParameterDomainError("deaths present in a cell with zero exposure")
    mask = E > 0
    empty_years = np.flatnonzero(np.sum(np.where(mask, D, 0.0), axis=1) <= 0)
    if empty_years.size:
        raise FitError(f"no deaths in year {window.t_min + int(empty_years[0])}; its period parameters are unidentifiable")
    return D, E, mask


def fit_weighted_poisson(model, D, E, window: LexisWindow, init: BaselineParams | None = None,
                         max_iter: int = 10000) -> BaselineFit:
    """Maximum likelihood fit of a baseline model with Poisson deaths.

    Parameters
    ----------
    model : BaselineModel or str
    D : array (n_years, n_ages)
        Death counts, possibly fractional.
    E : array (n_years, n_ages)
        Exposures; frailty-adjusted exposures are passed here unchanged.
    window : LexisWindow
    init : BaselineParams, optional
        Warm start (ignored by the closed-form constant model).
    max_iter : int
        Iteration cap (Newton iterations or Lee-Carter sweeps).

    Returns
    -------
    BaselineFit
        Parameters, maximised log-likelihood ``sum(D log F - F E)`` and the
        per-iteration log-likelihood trace.
    """
    model = BaselineModel.parse(model)
    D, E, mask = _check_inputs(D, E, window)
    if model is BaselineModel.CONSTANT:
        return _fit_constant(D, E, mask, window)
    if model is BaselineModel.GOMPERTZ:
        return _fit_gompertz(D, E, mask, window, init, max_iter)
    return _fit_lee_carter(D, E, mask, window, init, max_iter)


def _fit_constant(D, E, mask, window):
    zeta = np.log(np.sum(np.where(mask, D, 0.0), axis=1)) - np.log(np.sum(E, axis=1))
    params = BaselineParams.constant(window.years, window.ages, zeta)
    ll = poisson_loglik(D, E, params.grid(), mask)
    return BaselineFit(params, ll, [ll], 1)


# -- per-year Gompertz ------------------------------------------------------

def _log_rates(D, E, mask):
    pos = mask & (D > 0)
    return np.log(np.where(pos, D, 1.0) / np.where(pos, E, 1.0))


def _cell_ll(D, E, mask, logm, eta):
    # Poisson log-likelihood per cell minus its saturated value; the terms are
    # small, so changes between iterations stay resolvable for large exposures
    fitted = np.exp(eta) * E
    terms = np.where(D > 0, D * (eta - logm) - (fitted - D), -fitted)
    return np.where(mask, terms, 0.0)


def _gompertz_rows_ll(D, E, mask, logm, eta):
    # eta: (n_t, n_x) linear predictor
    return np.sum(_cell_ll(D, E, mask, logm, eta), axis=1)


def _fit_gompertz(D, E, mask, window, init, max_iter):
    ages = window.ages.astype(float)
    centre = ages.mean()
    z = ages - centre
    n_t = window.shape[0]

    if init is not None and init.model is BaselineModel.GOMPERTZ and len(init.years) == n_t:
        beta = np.column_stack([init.theta[:, 0] + init.theta[:, 1] * centre, init.theta[:, 1]])
    else:
        beta = np.empty((n_t, 2))
        for i in range(n_t):
            w = mask[i] & (D[i] > 0)
            if np.count_nonzero(w) >= 2:
                y = np.log(D[i, w] / E[i, w])
                slope, level = np.polyfit(z[w], y, 1, w=np.sqrt(D[i, w]))
            else:
                level = np.log(np.sum(D[i, mask[i]]) / np.sum(E[i, mask[i]]))
                slope = 0.0
            beta[i] = level, slope

    Dm = np.where(mask, D, 0.0)
    Em = np.where(mask, E, 0.0)
    logm = _log_rates(D, E, mask)
    scale = np.column_stack([np.sum(Dm, axis=1), np.sum(Dm * np.abs(z), axis=1)])
    scale = np.maximum(scale, 1.0)

    def linpred(b):
        return b[:, :1] + b[:, 1:2] * z[None, :]

    ll_rows = _gompertz_rows_ll(D, E, mask, logm, linpred(beta))
    trace = [float(ll_rows.sum())]
    active = np.ones(n_t, dtype=bool)
    converged = np.zeros(n_t, dtype=bool)
    for it in range(1, max_iter + 1):
        mu_e = np.exp(linpred(beta)) * Em
        r = Dm - mu_e
        g = np.column_stack([r.sum(axis=1), (r * z).sum(axis=1)])
        h00 = mu_e.sum(axis=1)
        h01 = (mu_e * z).sum(axis=1)
        h11 = (mu_e * z * z).sum(axis=1)
        det = h00 * h11 - h01 * h01
        ok = det > 0
        step = np.zeros_like(beta)
        step[ok, 0] = (h11[ok] * g[ok, 0] - h01[ok] * g[ok, 1]) / det[ok]
        step[ok, 1] = (h00[ok] * g[ok, 1] - h01[ok] * g[ok, 0]) / det[ok]
        step[~active] = 0.0

        new_beta = beta + step
        new_ll = _gompertz_rows_ll(D, E, mask, logm, linpred(new_beta))
        for _ in range(MAX_HALVINGS):
            worse = new_ll < ll_rows
            if not worse.any():
                break
            step[worse] *= 0.5
            new_beta[worse] = beta[worse] + step[worse]
            new_ll[worse] = _gompertz_rows_ll(D[worse], E[worse], mask[worse], logm[worse], linpred(new_beta[worse]))
        stalled = ~(new_ll > ll_rows)
        new_beta[stalled] = beta[stalled]
        new_ll[stalled] = ll_rows[stalled]

        change = np.abs(new_ll - ll_rows) / np.maximum(1.0, np.abs(ll_rows))
        beta, ll_rows = new_beta, new_ll
        trace.append(float(ll_rows.sum()))
        mu_e = np.exp(linpred(beta)) * Em
        r = Dm - mu_e
        g = np.column_stack([r.sum(axis=1), (r * z).sum(axis=1)])
        gnorm = np.max(np.abs(g) / scale, axis=1)
        # a row whose damped steps cannot raise the likelihood sits at the
        # numerical optimum even if rounding keeps the gradient above tolerance
        converged |= ((change < REL_TOL) & (gnorm < GRAD_TOL)) | (stalled & active)
        if not np.all(np.isfinite(beta)):
            raise ConvergenceError("Gompertz fit diverged", trace)
        if converged.all():
            break
        active = ~converged
    else:
        raise ConvergenceError(f"Gompertz fit did not converge in {max_iter} iterations", trace)

    theta = np.column_stack([beta[:, 0] - beta[:, 1] * centre, beta[:, 1]])
    params = BaselineParams(BaselineModel.GOMPERTZ, window.years, window.ages, theta)
    ll = poisson_loglik(D, E, params.grid(), mask)
    return BaselineFit(params, ll, trace, it)


# -- Lee-Carter -------------------------------------------------------------

def normalize_lee_carter(a, b, k):
    """Impose ``sum k = 0`` and ``sum b = 1`` without changing ``a + b k``.

    When ``k`` is identically zero ``b`` is unidentifiable and is reset to
    ``1 / n_ages``.
    """
    a = np.array(a, dtype=float)
    b = np.array(b, dtype=float)
    k = np.array(k, dtype=float)
    kbar = k.mean()
    a = a + b * kbar
    k = k - kbar
    if np.all(np.abs(k) <= 1e-14 * max(1.0, np.max(np.abs(a)))):
        return a, np.full_like(b, 1.0 / len(b)), np.zeros_like(k)
    s = b.sum()
    b = b / s
    k = k * s
    # re-centre to remove the rounding left by the rescaling
    k = k - k.mean()
    return a, b, k


def _fit_lee_carter(D, E, mask, window, init, max_iter):
    n_t, n_x = window.shape
    Dm = np.where(mask, D, 0.0)
    Em = np.where(mask, E, 0.0)
    empty_ages = np.flatnonzero(Dm.sum(axis=0) <= 0)
    if empty_ages.size:
        raise FitError(f"no deaths at age {window.x_min + int(empty_ages[0])}; a_x is unidentifiable")

    if init is not None and init.model is BaselineModel.LEE_CARTER and init.theta.shape[0] == n_t:
        a, b, k = init.a.copy(), init.b.copy(), init.k.copy()
    else:
        a = np.log(Dm.sum(axis=0) / Em.sum(axis=0))
        b = np.full(n_x, 1.0 / n_x)
        k = np.zeros(n_t)

    logm = _log_rates(D, E, mask)

    def cell_ll(eta):
        return _cell_ll(Dm, Em, mask, logm, eta)

    def update(param, grad_fn, curv_fn, axis, apply):
        # one damped Newton step for every element of a parameter vector; the
        # elements act on disjoint rows/columns, so damping is elementwise
        eta = apply(param)
        dhat = np.exp(eta) * Em
        r = Dm - dhat
        num = grad_fn(r)
        den = curv_fn(dhat)
        step = np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)
        old = cell_ll(eta).sum(axis=axis)
        cand = param + step
        new = cell_ll(apply(cand)).sum(axis=axis)
        for _ in range(MAX_HALVINGS):
            worse = new < old
            if not worse.any():
                break
            step = np.where(worse, 0.5 * step, step)
            cand = param + step
            new = cell_ll(apply(cand)).sum(axis=axis)
        return np.where(new < old, param, cand)

    def total_ll(a, b, k):
        return float(cell_ll(a[None, :] + b[None, :] * k[:, None]).sum())

    a, b, k = normalize_lee_carter(a, b, k)
    trace = [total_ll(a, b, k)]
    gscale_a = np.maximum(Dm.sum(axis=0), 1.0)
    for sweep in range(1, max_iter + 1):
        a = update(a, lambda r: r.sum(axis=0), lambda d: d.sum(axis=0), 0,
                   lambda v: v[None, :] + b[None, :] * k[:, None])
        k = update(k, lambda r: (r * b[None, :]).sum(axis=1), lambda d: (d * b[None, :] ** 2).sum(axis=1), 1,
                   lambda v: a[None, :] + b[None, :] * v[:, None])
        b = update(b, lambda r: (r * k[:, None]).sum(axis=0), lambda d: (d * k[:, None] ** 2).sum(axis=0), 0,
                   lambda v: a[None, :] + v[None, :] * k[:, None])
        a, b, k = normalize_lee_carter(a, b, k)
        ll = total_ll(a, b, k)
        if not np.isfinite(ll):
            raise ConvergenceError("Lee-Carter fit diverged", trace)
        change = abs(ll - trace[-1]) / max(1.0, abs(trace[-1]))
        trace.append(ll)
        if change < REL_TOL:
            r = Dm - np.exp(a[None, :] + b[None, :] * k[:, None]) * Em
            g_a = np.abs(r.sum(axis=0)) / gscale_a
            g_k = np.abs((r * b[None, :]).sum(axis=1)) / np.maximum((Dm * np.abs(b)[None, :]).sum(axis=1), 1.0)
            g_b = np.abs((r * k[:, None]).sum(axis=0)) / np.maximum((Dm * np.abs(k)[:, None]).sum(axis=0), 1.0)
            if max(g_a.max(), g_k.max(), g_b.max()) < GRAD_TOL or ll == trace[-2]:
                break
    else:
        raise ConvergenceError(f"Lee-Carter fit did not converge in {max_iter} sweeps", trace)

    params = BaselineParams.lee_carter(window.years, window.ages, a, b, k)
    ll = poisson_loglik(D, E, params.grid(), mask)
    return BaselineFit(params, ll, trace, sweep)


# -- logistic old-age extension ---------------------------------------------

@dataclass(frozen=True, eq=False)
class LogisticExtension:
    """Per-year logistic curves ``mu = e^(c + d x) / (1 + e^(c + d x))``."""

    years: np.ndarray
    c: np.ndarray
    d: np.ndarray

    def rates(self, ages) -> np.ndarray:
        """Grid of shape ``(n_years, len(ages))``."""
        ages = np.asarray(ages, dtype=float)
        lin = self.c[:, None] + self.d[:, None] * ages[None, :]
        return 1.0 / (1.0 + np.exp(-lin))

    def rate(self, t: int, x: float) -> float:
        i = int(np.flatnonzero(self.years == t)[0]) if np.any(self.years == t) else None
        if i is None:
            raise ParameterDomainError(f"no logistic fit for year {t}")
        lin = self.c[i] + self.d[i] * x
        return float(1.0 / (1.0 + np.exp(-lin)))


def fit_logistic_grid(rates, years, ages, fit_ages=(70, 90)) -> LogisticExtension:
    """Per-year OLS of ``logit(m)`` on age over ``fit_ages`` (inclusive).

    Cells with ``m <= 0`` or ``m >= 1`` are skipped.
    """
    rates = np.asarray(rates, dtype=float)
    ages = np.asarray(ages)
    years = np.asarray(years)
    sel = (ages >= fit_ages[0]) & (ages <= fit_ages[1])
    x_all = ages[sel].astype(float)
    c = np.empty(len(years))
    d = np.empty(len(years))
    for i, t in enumerate(years):
        m = rates[i, sel]
        ok = (m > 0) & (m < 1)
        if np.count_nonzero(ok) < 2:
            raise FitError(f"logistic extension for year {t}: fewer than 2 usable ages in {fit_ages[0]}-{fit_ages[1]}")
        x = x_all[ok]
        y = np.log(m[ok] / (1.0 - m[ok]))
        xc = x - x.mean()
        d[i] = np.dot(xc, y - y.mean()) / np.dot(xc, xc)
        c[i] = y.mean() - d[i] * x.mean()
    return LogisticExtension(np.array(years), c, d)


def fit_logistic_extension(rates: RateSurface, fit_ages=(70, 90)) -> LogisticExtension:
    w = rates.window
    if w.x_min > fit_ages[0] or w.x_max < fit_ages[1]:
        raise FitError(f"logistic extension needs ages {fit_ages[0]}-{fit_ages[1]} inside the window {w}")
    return fit_logistic_grid(rates.rates, w.years, w.ages, fit_ages)


# -- serialisation -----------------------------------------------------------

def params_to_rows(params: BaselineParams, prefix: str = "") -> list[tuple]:
    """Rows ``(series, t_or_x, component, value)``."""
    rows = []
    if params.model is BaselineModel.LEE_CARTER:
        for x, a, b in zip(params.ages, params.a, params.b):
            rows.append((prefix + "a", int(x), 1, float(a)))
        for x, b in zip(params.ages, params.b):
            rows.append((prefix + "b", int(x), 1, float(b)))
        for t, k in zip(params.years, params.k):
            rows.append((prefix + "k", int(t), 1, float(k)))
    elif params.model is BaselineModel.GOMPERTZ:
        for t, th in zip(params.years, params.theta):
            rows.append((prefix + "theta", int(t), 1, float(th[0])))
            rows.append((prefix + "theta", int(t), 2, float(th[1])))
        for x in params.ages:
            rows.append((prefix + "eta", int(x), 1, float(x)))
    else:
        for t, th in zip(params.years, params.theta):
            rows.append((prefix + "zeta", int(t), 1, float(th[0])))
        for x in params.ages:
            rows.append((prefix + "omega", int(x), 1, 0.0))
    return rows


def params_from_rows(rows, prefix: str = "") -> BaselineParams:
    """Inverse of :func:`params_to_rows`; the model is inferred from the series names."""
    series: dict[str, dict[tuple[int, int], float]] = {}
    for name, key, comp, value in rows:
        if not name.startswith(prefix):
            continue
        name = name[len(prefix):]
        series.setdefault(name, {})[(int(key), int(comp))] = float(value)

    def vec(name, comp=1):
        items = sorted((k, v) for (k, c), v in series[name].items() if c == comp)
        return np.array([k for k, _ in items]), np.array([v for _, v in items])

    if {"a", "b", "k"} <= series.keys():
        ages, a = vec("a")
        _, b = vec("b")
        years, k = vec("k")
        return BaselineParams.lee_carter(years, ages, a, b, k)
    if "theta" in series:
        years, level = vec("theta", 1)
        _, slope = vec("theta", 2)
        ages, _ = vec("eta")
        return BaselineParams.gompertz(years, ages, level, slope)
    if "zeta" in series:
        years, zeta = vec("zeta")
        ages, _ = vec("omega")
        return BaselineParams.constant(years, ages, zeta)
    raise StructuralError(f"no parameter series with prefix {prefix!r}")
