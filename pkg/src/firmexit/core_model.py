"""Model parameters, profit microstructure and the sunk-cost reduction.

Demand follows a geometric Brownian motion ``dX = alpha X dt + sigma X dW``.
With inverse demand ``p = gamma x - q`` the firm produces ``q = gamma x / 2``
and earns ``Pi(x) = gamma^2 x^2 / 4 - K`` per unit time until it exits,
paying the sunk cost ``I`` on exit.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Mapping, Union

import numpy as np

from .errors import (
    InadmissibleParams,
    NegativeDemand,
    NonPositiveGamma,
    NonPositiveRate,
    NonPositiveSigma,
    ParameterError,
)

PARAM_KEYS = ("alpha", "sigma", "r", "gamma", "K", "I")


class Admissibility(str, enum.Enum):
    ADMISSIBLE = "Admissible"
    TRIVIAL_INFINITE = "TrivialInfinite"
    TRIVIAL_NEVER_EXIT = "TrivialNeverExit"


@dataclass(frozen=True)
class AdmissibilityReport:
    status: Admissibility
    margin: float  # r - sigma^2 - 2 alpha
    message: str

    @property
    def admissible(self) -> bool:
        return self.status is Admissibility.ADMISSIBLE

    def to_dict(self) -> dict:
        return {"status": self.status.value, "margin": self.margin, "message": self.message}


def _validate(alpha, sigma, r, gamma, costs) -> None:
    for name, value in [("alpha", alpha), ("sigma", sigma), ("r", r), ("gamma", gamma), *costs]:
        if not math.isfinite(value):
            raise ParameterError(f"{name} must be finite, got {value!r}")
    if sigma <= 0:
        raise NonPositiveSigma(f"sigma must be > 0, got {sigma}")
    if r <= 0:
        raise NonPositiveRate(f"r must be > 0, got {r}")
    if gamma <= 0:
        raise NonPositiveGamma(f"gamma must be > 0, got {gamma}")


class _Diffusion:
    """Quantities shared by full and reduced parameter sets."""

    alpha: float
    sigma: float
    r: float
    gamma: float
    K: float

    @property
    def growth_margin(self) -> float:
        """``r - sigma^2 - 2 alpha``; positive iff the problem is admissible."""
        return self.r - self.sigma**2 - 2.0 * self.alpha

    @property
    def admissible(self) -> bool:
        return self.growth_margin > 0.0

    @property
    def B(self) -> float:
        """Coefficient of x^2 in the value of never exiting."""
        m = self.growth_margin
        if m <= 0.0:
            raise InadmissibleParams(f"r - sigma^2 - 2 alpha = {m} <= 0")
        return self.gamma**2 / (4.0 * m)


@dataclass(frozen=True)
class ModelParams(_Diffusion):
    alpha: float
    sigma: float
    r: float
    gamma: float
    K: float
    I: float = 0.0

    def __post_init__(self):
        for name in PARAM_KEYS:
            object.__setattr__(self, name, float(getattr(self, name)))
        _validate(self.alpha, self.sigma, self.r, self.gamma, [("K", self.K), ("I", self.I)])

    @classmethod
    def from_dict(cls, data: Mapping[str, float], strict: bool = True) -> "ModelParams":
        """Build from a JSON-style mapping; ``I`` defaults to 0."""
        if strict:
            unknown = set(data) - set(PARAM_KEYS)
            if unknown:
                raise ParameterError(f"unknown parameter keys: {sorted(unknown)}")
        missing = [k for k in PARAM_KEYS[:-1] if k not in data]
        if missing:
            raise ParameterError(f"missing parameter keys: {missing}")
        values = {}
        for k in PARAM_KEYS:
            if k not in data:
                continue
            v = data[k]
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise ParameterError(f"{k} must be a number, got {v!r}")
            values[k] = v
        return cls(**values)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in PARAM_KEYS}


@dataclass(frozen=True)
class ReducedParams(_Diffusion):
    """The sunk-cost-free problem with running cost ``K_eff``.

    ``K`` aliases ``K_eff`` and ``I`` is zero, so any routine written for
    :class:`ModelParams` evaluates the reduced problem when handed one of these.
    """

    alpha: float
    sigma: float
    r: float
    gamma: float
    K_eff: float
    value_offset: float = 0.0
    trivial_never_exit: bool = field(init=False)

    def __post_init__(self):
        _validate(self.alpha, self.sigma, self.r, self.gamma,
                  [("K_eff", self.K_eff), ("value_offset", self.value_offset)])
        object.__setattr__(self, "trivial_never_exit", self.K_eff <= 0.0)

    @property
    def K(self) -> float:
        return self.K_eff

    @property
    def I(self) -> float:
        return 0.0


Params = Union[ModelParams, ReducedParams]


def check_admissibility(p: Params) -> AdmissibilityReport:
    m = p.growth_margin
    if m <= 0.0:
        return AdmissibilityReport(
            Admissibility.TRIVIAL_INFINITE, m,
            f"r - sigma^2 - 2 alpha = {m:.6g} <= 0: expected discounted profit is infinite, never exit")
    if p.K <= 0.0:
        return AdmissibilityReport(
            Admissibility.TRIVIAL_NEVER_EXIT, m,
            f"K = {p.K:.6g} <= 0: profit is non-negative everywhere, never exit")
    return AdmissibilityReport(Admissibility.ADMISSIBLE, m, "admissible")


def _demand(x):
    arr = np.asarray(x, dtype=float)
    if np.any(arr < 0) or np.any(np.isnan(arr)):
        raise NegativeDemand(f"demand level must be >= 0, got {x!r}")
    return arr


def _out(arr):
    return float(arr) if arr.ndim == 0 else arr


def profit(p: Params, x):
    """Maximised profit rate ``gamma^2 x^2 / 4 - K``."""
    x = _demand(x)
    return _out(0.25 * p.gamma**2 * x * x - p.K)


def optimal_quantity(p: Params, x):
    return _out(0.5 * p.gamma * _demand(x))


def reduce_sunk_cost(p: ModelParams) -> ReducedParams:
    """Fold the exit cost into the running cost.

    ``e^{-r tau} I = I - int_0^tau r e^{-rs} I ds``, so paying ``I`` at exit is
    the same as paying ``r I`` per unit time until exit and ``I`` up front.
    """
    return ReducedParams(p.alpha, p.sigma, p.r, p.gamma, K_eff=p.K - p.r * p.I, value_offset=0.0 - p.I)


def perpetual_value(p: Params, x):
    """Expected discounted profit of never exiting: ``B x^2 - K / r``."""
    if not p.admissible:
        raise InadmissibleParams(f"r - sigma^2 - 2 alpha = {p.growth_margin} <= 0")
    x = _demand(x)
    return _out(p.B * x * x - p.K / p.r)

