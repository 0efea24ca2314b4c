"""Laplace-transform algebra for mean-one frailty distributions.

Every frailty family is summarised by ``nu(s) = -log L(s)`` where ``L`` is the
Laplace transform of the frailty distribution at birth.  Mean frailty of a
cohort with integrated baseline intensity ``I`` is ``nu'(I)`` and, since the
integrated cohort intensity is ``H = nu(I)``, it can equally be written as
``nu'(nu^{-1}(H))``.

Supported families (all with mean one and variance ``sigma2``):

* ``DEGENERATE``       -- no frailty, ``Z == 1``.
* ``GAMMA``            -- ``L(s) = (1 + sigma2 s)^(-1/sigma2)``.
* ``INVERSE_GAUSSIAN`` -- ``L(s) = exp[(1 - sqrt(1 + 2 sigma2 s)) / sigma2]``.
* ``STABLE``           -- exponentially tilted positive stable law with index
  ``alpha`` in ``[0, 1)``; ``alpha = 0`` is the Gamma law and ``alpha = 1/2``
  the inverse Gaussian law.

All functions accept scalars or numpy arrays and return the same shape.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import FrailtyOverflowError, ParameterDomainError

__all__ = [
    "Family",
    "FrailtySpec",
    "laplace",
    "nu",
    "nu_prime",
    "nu_inverse",
    "mean_frailty_from_H",
]

# below this index the stable formulas are replaced by their Gamma limit
STABLE_ALPHA_GAMMA_CUTOFF = 1e-8
# exp() argument beyond which nu_inverse refuses to evaluate
_EXP_LIMIT = 700.0


class Family(str, enum.Enum):
    DEGENERATE = "degenerate"
    GAMMA = "gamma"
    INVERSE_GAUSSIAN = "inverse_gaussian"
    STABLE = "stable"

    @classmethod
    def parse(cls, name: str) -> "Family":
        key = str(name).strip().lower().replace("-", "_").replace(" ", "_")
        aliases = {"none": "degenerate", "ig": "inverse_gaussian", "invgauss": "inverse_gaussian"}
        key = aliases.get(key, key)
        try:
            return cls(key)
        except ValueError:
            raise ParameterDomainError(f"unknown frailty family {name!r}") from None


@dataclass(frozen=True)
class FrailtySpec:
    """Frailty family plus its parameters.

    Parameters
    ----------
    family : Family
    sigma2 : float
        Frailty variance.  Zero only for the degenerate family.
    alpha : float
        Stable index in ``[0, 1)``; ignored (and kept at 0) for other families.
    """

    family: Family
    sigma2: float = 0.0
    alpha: float = 0.0

    def __post_init__(self):
        family = Family.parse(self.family) if not isinstance(self.family, Family) else self.family
        object.__setattr__(self, "family", family)
        object.__setattr__(self, "sigma2", float(self.sigma2))
        object.__setattr__(self, "alpha", float(self.alpha))
        s2, a = self.sigma2, self.alpha
        if not np.isfinite(s2) or not np.isfinite(a):
            raise ParameterDomainError("frailty parameters must be finite")
        if family is Family.DEGENERATE:
            if s2 != 0.0:
                raise ParameterDomainError("degenerate frailty has sigma2 = 0")
            return
        if s2 <= 0.0:
            raise ParameterDomainError(
                f"{family.value} frailty needs sigma2 > 0 (got {s2}); use the degenerate family for no frailty"
            )
        if family is Family.STABLE:
            if not 0.0 <= a < 1.0:
                raise ParameterDomainError(f"stable index alpha must lie in [0, 1), got {a}")
        elif a != 0.0:
            raise ParameterDomainError(f"alpha is only meaningful for the stable family (got {a})")

    # constructors -------------------------------------------------------

    @classmethod
    def degenerate(cls) -> "FrailtySpec":
        return cls(Family.DEGENERATE)

    @classmethod
    def gamma(cls, sigma2: float) -> "FrailtySpec":
        return cls(Family.GAMMA, sigma2)

    @classmethod
    def inverse_gaussian(cls, sigma2: float) -> "FrailtySpec":
        return cls(Family.INVERSE_GAUSSIAN, sigma2)

    @classmethod
    def stable(cls, alpha: float, sigma2: float) -> "FrailtySpec":
        return cls(Family.STABLE, sigma2, alpha)

    @classmethod
    def of(cls, family, sigma2: float, alpha: float = 0.0) -> "FrailtySpec":
        """Build a spec, mapping ``sigma2 == 0`` to the degenerate family.

        Profile searches run over ``sigma2 >= 0``; this is the one place
        where a zero variance is silently accepted.
        """
        family = Family.parse(family) if not isinstance(family, Family) else family
        if family is Family.DEGENERATE or sigma2 == 0.0:
            return cls.degenerate()
        if family is Family.STABLE:
            return cls.stable(alpha, sigma2)
        return cls(family, sigma2)

    @property
    def is_degenerate(self) -> bool:
        return self.family is Family.DEGENERATE

    def _kind(self) -> str:
        """Which closed form to evaluate."""
        if self.family is Family.STABLE and self.alpha < STABLE_ALPHA_GAMMA_CUTOFF:
            return "gamma"
        return self.family.value

    def __str__(self):
        if self.family is Family.DEGENERATE:
            return "degenerate"
        if self.family is Family.STABLE:
            return f"stable(alpha={self.alpha:g}, sigma2={self.sigma2:g})"
        return f"{self.family.value}(sigma2={self.sigma2:g})"


def _nonneg(value, name: str) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if np.any(np.isnan(arr)) or np.any(arr < 0):
        raise ParameterDomainError(f"{name} must be non-negative")
    return arr


def _out(arr: np.ndarray, like):
    return float(arr) if np.ndim(like) == 0 else arr


def nu(spec: FrailtySpec, s):
    """``-log`` of the Laplace transform evaluated at ``s >= 0``."""
    s_arr = _nonneg(s, "s")
    kind = spec._kind()
    s2 = spec.sigma2
    if kind == "degenerate":
        out = s_arr.copy()
    elif kind == "gamma":
        out = np.log1p(s2 * s_arr) / s2
    elif kind == "inverse_gaussian":
        # (sqrt(1 + 2 s2 s) - 1)/s2 written without cancellation
        out = 2.0 * s_arr / (np.sqrt(1.0 + 2.0 * s2 * s_arr) + 1.0)
    else:
        a = spec.alpha
        r = s2 / (1.0 - a)
        out = np.expm1(a * np.log1p(r * s_arr)) / (a * r)
    return _out(out, s)


def laplace(spec: FrailtySpec, s):
    """Laplace transform ``E[exp(-s Z)]``."""
    return _out(np.exp(-np.asarray(nu(spec, s))), s)


def nu_prime(spec: FrailtySpec, s):
    """Derivative of ``nu``: mean frailty given integrated baseline intensity ``s``."""
    s_arr = _nonneg(s, "s")
    kind = spec._kind()
    s2 = spec.sigma2
    if kind == "degenerate":
        out = np.ones_like(s_arr)
    elif kind == "gamma":
        out = 1.0 / (1.0 + s2 * s_arr)
    elif kind == "inverse_gaussian":
        out = 1.0 / np.sqrt(1.0 + 2.0 * s2 * s_arr)
    else:
        a = spec.alpha
        r = s2 / (1.0 - a)
        out = np.exp((a - 1.0) * np.log1p(r * s_arr))
    return _out(out, s)


def nu_inverse(spec: FrailtySpec, h):
    """Inverse of ``nu``: integrated baseline intensity from integrated cohort intensity.

    Raises
    ------
    FrailtyOverflowError
        When the result would overflow (Gamma with ``sigma2 * h > 700`` and the
        stable analogue).
    """
    h_arr = _nonneg(h, "h")
    kind = spec._kind()
    s2 = spec.sigma2
    if kind == "degenerate":
        out = h_arr.copy()
    elif kind == "gamma":
        arg = s2 * h_arr
        if np.any(arg > _EXP_LIMIT):
            raise FrailtyOverflowError(f"nu_inverse overflow: sigma2*h = {np.max(arg):g} > {_EXP_LIMIT:g}")
        out = np.expm1(arg) / s2
    elif kind == "inverse_gaussian":
        out = h_arr + 0.5 * s2 * h_arr * h_arr
    else:
        a = spec.alpha
        r = s2 / (1.0 - a)
        arg = np.log1p(a * r * h_arr) / a
        if np.any(arg > _EXP_LIMIT):
            raise FrailtyOverflowError(f"nu_inverse overflow: exponent {np.max(arg):g} > {_EXP_LIMIT:g}")
        out = np.expm1(arg) / r
    return _out(out, h)


def mean_frailty_from_H(spec: FrailtySpec, H):
    """Mean frailty ``nu'(nu^{-1}(H))`` in closed form.

    Works for any ``H >= 0`` without forming ``nu^{-1}(H)`` explicitly, so it
    never overflows.
    """
    h_arr = _nonneg(H, "H")
    kind = spec._kind()
    s2 = spec.sigma2
    if kind == "degenerate":
        out = np.ones_like(h_arr)
    elif kind == "gamma":
        out = np.exp(-s2 * h_arr)
    elif kind == "inverse_gaussian":
        out = 1.0 / (1.0 + s2 * h_arr)
    else:
        a = spec.alpha
        r = s2 / (1.0 - a)
        out = np.exp((a - 1.0) / a * np.log1p(a * r * h_arr))
    return _out(out, H)
