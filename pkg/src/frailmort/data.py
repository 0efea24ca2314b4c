"""Death/exposure surfaces on a Lexis window, death rates and cumulative hazards.

Grids are numpy arrays of shape ``(n_years, n_ages)`` indexed as
``grid[t - t_min, x - x_min]``.  Cells are one-year-by-one-year A-groups.
"""

from __future__ import annotations

import enum
from collections.abc import Mapping
from dataclasses import dataclass, field

import numpy as np

from .errors import CleaningError, ParameterDomainError, StructuralError
from .frailty import FrailtySpec, nu_prime

__all__ = [
    "LexisWindow",
    "MortalitySurface",
    "RateSurface",
    "HazardMode",
    "CumulativeHazardTable",
    "build_surface",
    "death_rates",
    "extended_rates",
    "ExtendedRates",
    "cumulative_hazard",
    "simulate_surface",
    "integrated_baseline_exact",
]

MAX_AGE = 110


def _frozen(arr) -> np.ndarray:
    out = np.array(arr, dtype=float)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class LexisWindow:
    """Rectangular range of calendar years and single-year ages (inclusive)."""

    t_min: int
    t_max: int
    x_min: int
    x_max: int

    def __post_init__(self):
        for name in ("t_min", "t_max", "x_min", "x_max"):
            value = getattr(self, name)
            if int(value) != value:
                raise StructuralError(f"{name} must be an integer, got {value!r}")
            object.__setattr__(self, name, int(value))
        if self.t_min > self.t_max:
            raise StructuralError(f"t_min ({self.t_min}) > t_max ({self.t_max})")
        if not 0 <= self.x_min <= self.x_max <= MAX_AGE:
            raise StructuralError(
                f"ages must satisfy 0 <= x_min <= x_max <= {MAX_AGE}, got {self.x_min}..{self.x_max}"
            )

    @property
    def years(self) -> np.ndarray:
        return np.arange(self.t_min, self.t_max + 1)

    @property
    def ages(self) -> np.ndarray:
        return np.arange(self.x_min, self.x_max + 1)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.t_max - self.t_min + 1, self.x_max - self.x_min + 1)

    def contains(self, t: int, x: int) -> bool:
        return self.t_min <= t <= self.t_max and self.x_min <= x <= self.x_max

    def index(self, t: int, x: int) -> tuple[int, int]:
        if not self.contains(t, x):
            raise ParameterDomainError(f"cell ({t}, {x}) outside window {self}")
        return t - self.t_min, x - self.x_min

    def contains_window(self, other: "LexisWindow") -> bool:
        return (
            self.t_min <= other.t_min
            and other.t_max <= self.t_max
            and self.x_min <= other.x_min
            and other.x_max <= self.x_max
        )

    def slices(self, inner: "LexisWindow") -> tuple[slice, slice]:
        """Array slices selecting ``inner`` from a grid on this window."""
        if not self.contains_window(inner):
            raise StructuralError(f"window {inner} is not inside {self}")
        return (
            slice(inner.t_min - self.t_min, inner.t_max - self.t_min + 1),
            slice(inner.x_min - self.x_min, inner.x_max - self.x_min + 1),
        )

    def __str__(self):
        return f"[{self.t_min}-{self.t_max}] x [{self.x_min}-{self.x_max}]"


def _check_grid(grid: np.ndarray, window: LexisWindow, name: str) -> np.ndarray:
    grid = np.asarray(grid, dtype=float)
    if grid.shape != window.shape:
        raise StructuralError(f"{name} grid has shape {grid.shape}, window {window} needs {window.shape}")
    return grid


@dataclass(frozen=True, eq=False)
class MortalitySurface:
    """Death counts and exposures over a Lexis window.

    Deaths may be fractional (HMD splits deaths over Lexis triangles).  Cells
    with zero exposure must have zero deaths; they are flagged in
    ``zero_exposure`` and excluded from every likelihood sum.
    """

    window: LexisWindow
    deaths: np.ndarray
    exposures: np.ndarray
    zero_exposure: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        d = _check_grid(self.deaths, self.window, "deaths")
        e = _check_grid(self.exposures, self.window, "exposures")
        for name, grid in (("deaths", d), ("exposures", e)):
            bad = ~np.isfinite(grid) | (grid < 0)
            if bad.any():
                i, j = np.argwhere(bad)[0]
                t, x = self.window.t_min + i, self.window.x_min + j
                raise CleaningError(f"{name} at (t={t}, x={x}) is negative or not finite: {grid[i, j]!r}")
        zero = e == 0
        orphan = zero & (d > 0)
        if orphan.any():
            i, j = np.argwhere(orphan)[0]
            t, x = self.window.t_min + i, self.window.x_min + j
            raise CleaningError(f"deaths {d[i, j]!r} with zero exposure at (t={t}, x={x})")
        object.__setattr__(self, "deaths", _frozen(d))
        object.__setattr__(self, "exposures", _frozen(e))
        zero = np.array(zero)
        zero.setflags(write=False)
        object.__setattr__(self, "zero_exposure", zero)

    @property
    def observed(self) -> np.ndarray:
        """Mask of cells that enter likelihood sums (``E > 0``)."""
        return ~self.zero_exposure

    def restrict(self, window: LexisWindow) -> "MortalitySurface":
        rows, cols = self.window.slices(window)
        return MortalitySurface(window, self.deaths[rows, cols], self.exposures[rows, cols])


@dataclass(frozen=True, eq=False)
class RateSurface:
    """Observed death rates ``m = D / E`` (zero where ``E == 0``)."""

    window: LexisWindow
    rates: np.ndarray

    def __post_init__(self):
        m = _check_grid(self.rates, self.window, "rates")
        if not np.all(np.isfinite(m)) or np.any(m < 0):
            raise CleaningError("death rates must be finite and non-negative")
        object.__setattr__(self, "rates", _frozen(m))

    def at(self, t: int, x: int) -> float:
        return float(self.rates[self.window.index(t, x)])


def build_surface(deaths, exposures, window: LexisWindow) -> MortalitySurface:
    """Assemble a dense surface from two parsed tables.

    ``deaths`` and ``exposures`` are :class:`~frailmort.hmd.HMDTable` objects
    or any mapping ``{(year, age): value}``.  Every cell of ``window`` must be
    present and non-missing in both.
    """
    grids = []
    for name, table in (("deaths", deaths), ("exposures", exposures)):
        values = table if isinstance(table, Mapping) else table.values
        grid = np.empty(window.shape)
        for i, t in enumerate(window.years):
            for j, x in enumerate(window.ages):
                key = (int(t), int(x))
                if key not in values:
                    raise StructuralError(f"{name} table has no cell (t={t}, x={x}) inside window {window}")
                v = values[key]
                if v is None or np.isnan(v):
                    raise StructuralError(f"{name} value missing at (t={t}, x={x}) inside window {window}")
                grid[i, j] = v
        grids.append(grid)
    return MortalitySurface(window, grids[0], grids[1])


def death_rates(surface: MortalitySurface) -> RateSurface:
    """Elementwise ``D / E`` with zero in zero-exposure cells."""
    e = surface.exposures
    with np.errstate(divide="ignore", invalid="ignore"):
        m = np.where(surface.zero_exposure, 0.0, surface.deaths / np.where(e > 0, e, 1.0))
    return RateSurface(surface.window, m)


class ExtendedRates:
    """Rates extended outside the window for cohort hazard sums.

    Before ``t_min`` the first observed year is repeated; below ``x_min``
    rates are zero, so every cohort has mean frailty one at ``x_min``.
    """

    def __init__(self, window: LexisWindow, rates: np.ndarray):
        self.window = window
        self.rates = rates

    def __call__(self, t: int, x: int) -> float:
        w = self.window
        if t > w.t_max or x > w.x_max or x < 0:
            raise ParameterDomainError(f"extended rate undefined at (t={t}, x={x}) for window {w}")
        if x < w.x_min:
            return 0.0
        row = max(t, w.t_min) - w.t_min
        return float(self.rates[row, x - w.x_min])


def extended_rates(rates: RateSurface) -> ExtendedRates:
    return ExtendedRates(rates.window, rates.rates)


class HazardMode(str, enum.Enum):
    COHORT = "cohort"
    PERIOD = "period"


@dataclass(frozen=True, eq=False)
class CumulativeHazardTable:
    """Empirical cumulative hazard on the window.

    Cohort mode sums extended rates down the cohort diagonal; period mode sums
    within the calendar year.  With a background grid the summands are
    ``m - G`` and may be negative.
    """

    window: LexisWindow
    values: np.ndarray
    mode: HazardMode
    background_subtracted: bool = False

    def __post_init__(self):
        v = _check_grid(self.values, self.window, "hazard")
        object.__setattr__(self, "mode", HazardMode(self.mode))
        if not np.all(np.isfinite(v)):
            raise CleaningError("cumulative hazard must be finite")
        if not self.background_subtracted and np.any(v < 0):
            raise CleaningError("cumulative hazard without background subtraction must be non-negative")
        object.__setattr__(self, "values", _frozen(v))

    @property
    def n_negative(self) -> int:
        return int(np.count_nonzero(self.values < 0))

    def floored(self) -> np.ndarray:
        """Values clipped at zero (domain of ``nu^{-1}``)."""
        return np.maximum(self.values, 0.0)


def cumulative_hazard(rates: RateSurface, mode=HazardMode.COHORT, background=None) -> CumulativeHazardTable:
    """Cumulative hazard table in cohort or period mode.

    Parameters
    ----------
    rates : RateSurface
    mode : HazardMode or str
    background : array, optional
        Background intensity ``G(t, x)`` on the window.  It is subtracted
        inside the window; the pre-window extension copies the subtracted
        first-year values.
    """
    mode = HazardMode(mode)
    w = rates.window
    m = rates.rates
    if background is not None:
        g = np.asarray(background, dtype=float)
        if g.shape != w.shape:
            raise StructuralError(f"background grid has shape {g.shape}, window {w} needs {w.shape}")
        m = m - g
    n_t, n_x = w.shape
    H = np.zeros((n_t, n_x))
    # first year and period mode: plain cumulative sums across age
    if mode is HazardMode.PERIOD:
        H[:, 1:] = np.cumsum(m[:, :-1], axis=1)
    else:
        H[0, 1:] = np.cumsum(m[0, :-1])
        for i in range(1, n_t):
            H[i, 1:] = H[i - 1, :-1] + m[i - 1, :-1]
    return CumulativeHazardTable(w, H, mode, background is not None)


def integrated_baseline_exact(F: np.ndarray) -> np.ndarray:
    """Cohort sums of a baseline grid with the first-year pre-window extension.

    ``I[i, 0] = 0`` and ``I[i, j] = I[i-1, j-1] + F[i-1, j-1]``; for the first
    year every earlier summand uses the first-year values.
    """
    n_t, n_x = F.shape
    I = np.zeros((n_t, n_x))
    I[0, 1:] = np.cumsum(F[0, :-1])
    for i in range(1, n_t):
        I[i, 1:] = I[i - 1, :-1] + F[i - 1, :-1]
    return I


def simulate_surface(
    frailty: FrailtySpec,
    baseline,
    window: LexisWindow,
    exposure_level: float,
    seed: int,
    background=None,
    poisson: bool = True,
) -> MortalitySurface:
    """Simulate death counts from a fragilized baseline model.

    ``I`` is the exact cohort sum of the baseline intensity (zero at
    ``x_min``, first-year values before ``t_min``); the cohort intensity is
    ``nu'(I) F (+ G)`` and ``D ~ Poisson(mu E)`` with constant exposure.

    Parameters
    ----------
    frailty : FrailtySpec
    baseline : BaselineParams
        Frailty-loaded term ``F``; must cover ``window``.
    window : LexisWindow
    exposure_level : float
        Exposure of every cell.
    seed : int
    background : BaselineParams, optional
        Additive frailty-free term ``G``.
    poisson : bool
        With ``False`` the expected counts ``mu E`` are returned instead of a draw.
    """
    from .baseline import baseline_grid

    if not exposure_level > 0:
        raise ParameterDomainError("exposure_level must be positive")
    F = baseline_grid(baseline, window)
    mu = nu_prime(frailty, integrated_baseline_exact(F)) * F
    if background is not None:
        mu = mu + baseline_grid(background, window)
    lam = mu * exposure_level
    if not np.all(np.isfinite(lam)) or np.any(lam > 1e15):
        raise ParameterDomainError("mu * E overflows the Poisson sampler")
    E = np.full(window.shape, float(exposure_level))
    if not poisson:
        return MortalitySurface(window, lam, E)
    rng = np.random.default_rng(seed)
    D = rng.poisson(lam).astype(float)
    return MortalitySurface(window, D, E)
