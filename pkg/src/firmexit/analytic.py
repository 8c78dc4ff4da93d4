"""Closed-form solution of the exit problem and its residual checks.

In the continuation region the value solves

    r v - alpha x v' - sigma^2 x^2 / 2 v'' - gamma^2 x^2 / 4 + K = 0,

whose general solution is ``A1 x^D1 + A2 x^D2 + B x^2 - K / r`` with D1, D2 the
roots of ``-sigma^2/2 D^2 + (sigma^2/2 - alpha) D + r = 0``. On the unbounded
domain the growing term is absent (A1 = 0) and smooth fit at the exit
threshold fixes A2 and the threshold.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .core_model import (
    ModelParams,
    Params,
    ReducedParams,
    _demand,
    _out,
    perpetual_value,
    reduce_sunk_cost,
)
from .errors import DomainError, InadmissibleParams, ThresholdAboveState, TrivialProblem

CONTINUATION_TOL = 1e-9
SMOOTH_FIT_TOL = 1e-10


@dataclass(frozen=True)
class CharacteristicRoots:
    D1: float
    D2: float

    def residuals(self, p: Params) -> tuple[float, float]:
        """Relative residual of each root in the characteristic quadratic."""
        out = []
        for d in (self.D1, self.D2):
            terms = (0.5 * p.sigma**2 * d * d, (0.5 * p.sigma**2 - p.alpha) * d, p.r)
            res = -terms[0] + terms[1] + terms[2]
            out.append(abs(res) / max(abs(t) for t in terms))
        return out[0], out[1]


def compute_roots(p: Params) -> CharacteristicRoots:
    a = -0.5 * p.sigma**2
    b = 0.5 * p.sigma**2 - p.alpha
    c = p.r
    # c > 0 and a < 0 so the discriminant is strictly positive
    q = -0.5 * (b + math.copysign(math.sqrt(b * b - 4.0 * a * c), b))
    r1, r2 = q / a, c / q
    return CharacteristicRoots(D1=max(r1, r2), D2=min(r1, r2))


@dataclass(frozen=True)
class ClosedFormSolution:
    x_star: float
    A2: float
    B: float
    roots: CharacteristicRoots
    params: ReducedParams

    @property
    def A1(self) -> float:
        return 0.0

    def to_dict(self) -> dict:
        return {
            "D1": self.roots.D1,
            "D2": self.roots.D2,
            "B": self.B,
            "x_star": self.x_star,
            "A1": 0.0,
            "A2": self.A2,
            "K_eff": self.params.K_eff,
            "offset": self.params.value_offset,
        }


def _as_reduced(p: Params) -> ReducedParams:
    return reduce_sunk_cost(p) if isinstance(p, ModelParams) else p


def closed_form(p: Params) -> ClosedFormSolution:
    """Exit threshold and coefficient of the untruncated problem."""
    p = _as_reduced(p)
    if not p.admissible:
        raise InadmissibleParams(f"r - sigma^2 - 2 alpha = {p.growth_margin} <= 0")
    if p.K_eff <= 0.0:
        raise TrivialProblem(f"K_eff = {p.K_eff} <= 0: never exit")
    roots = compute_roots(p)
    D2 = roots.D2
    cost = p.K_eff / p.r
    B = p.B
    # x*^2 = -D2/(2-D2) * (K/r) / B, which is the printed formula with 4(r-2a-s^2)/g^2 = 1/B
    x_star = math.sqrt(-D2 / (2.0 - D2) * cost / B)
    A2 = 2.0 / (2.0 - D2) * cost * x_star ** (-D2)
    return ClosedFormSolution(x_star=x_star, A2=A2, B=B, roots=roots, params=p)


def continuation_branch(sol: ClosedFormSolution, x):
    """Continuation-branch formula and its first two derivatives (no region test)."""
    D2 = sol.roots.D2
    p = sol.params
    h = sol.A2 * x**D2
    v = h + sol.B * x * x - p.K_eff / p.r
    dv = D2 * h / x + 2.0 * sol.B * x
    d2v = D2 * (D2 - 1.0) * h / (x * x) + 2.0 * sol.B
    return v, dv, d2v


def value(sol: ClosedFormSolution, x):
    """Value of the reduced problem; zero on the exit region ``x <= x_star``."""
    x = _demand(x)
    xa = np.atleast_1d(x)
    out = np.zeros_like(xa)
    cont = xa > sol.x_star
    # the x^D2 term blows up at 0, so only evaluate it where it applies
    out[cont] = continuation_branch(sol, xa[cont])[0]
    return _out(out.reshape(x.shape))


def value_derivatives(sol: ClosedFormSolution, x):
    """``(v, v', v'')``; at ``x_star`` the right-hand second derivative."""
    x = _demand(x)
    if np.any(x == 0):
        raise DomainError("derivatives are defined for x > 0")
    xa = np.atleast_1d(x)
    v, dv, d2v = np.zeros_like(xa), np.zeros_like(xa), np.zeros_like(xa)
    cont = xa > sol.x_star
    v[cont], dv[cont], d2v[cont] = continuation_branch(sol, xa[cont])
    at = xa == sol.x_star
    d2v[at] = continuation_branch(sol, xa[at])[2]
    return tuple(_out(a.reshape(x.shape)) for a in (v, dv, d2v))


def full_value(p: ModelParams, x):
    """Value of the original problem including the exit cost ``I``."""
    rp = reduce_sunk_cost(p)
    if rp.trivial_never_exit:
        return perpetual_value(p, x)
    return value(closed_form(rp), x) + rp.value_offset


@dataclass
class ResidualReport:
    """Pointwise check of the variational inequality ``min{L v - Pi, v} = 0``."""

    max_continuation_residual: float
    max_stopping_violation: float
    smooth_fit_residual: float
    min_continuation_value: float
    per_point: list = field(repr=False)
    tol: float = CONTINUATION_TOL

    @property
    def passed(self) -> bool:
        return (self.max_continuation_residual <= self.tol
                and self.max_stopping_violation <= 0.0
                and self.smooth_fit_residual <= SMOOTH_FIT_TOL
                and self.min_continuation_value > 0.0)

    def worst_point(self) -> dict | None:
        if not self.per_point:
            return None
        return max(self.per_point, key=lambda row: row["violation"])

    def to_dict(self) -> dict:
        return {
            "max_continuation_residual": self.max_continuation_residual,
            "max_stopping_violation": self.max_stopping_violation,
            "smooth_fit_residual": self.smooth_fit_residual,
            "min_continuation_value": self.min_continuation_value,
            "passed": self.passed,
            "per_point": self.per_point,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def generator_residual(p: Params, x, v, dv, d2v):
    """``r v - alpha x v' - sigma^2 x^2 v'' / 2 - Pi(x)``."""
    return (p.r * v - p.alpha * x * dv - 0.5 * p.sigma**2 * x * x * d2v
            - (0.25 * p.gamma**2 * x * x - p.K))


def residual_report(p: Params, x, v, dv, d2v, boundary: float, fit_residual: float,
                    tol: float = CONTINUATION_TOL) -> ResidualReport:
    x = np.asarray(x, dtype=float)
    L = generator_residual(p, x, v, dv, d2v)
    cont = x > boundary
    rows = []
    cont_res = np.where(cont, np.abs(L) / (1.0 + np.abs(v)), 0.0)
    # in the exit region v = 0, so L = -Pi must be >= 0
    stop_viol = np.where(cont, 0.0, np.maximum(-L, 0.0) + np.abs(v))
    for xi, vi, Li, c, cr, sv in zip(x, v, L, cont, cont_res, stop_viol):
        rows.append({
            "x": float(xi), "v": float(vi), "L": float(Li),
            "region": "continuation" if c else "stopping",
            "violation": float(cr if c else sv),
        })
    min_v = float(np.min(v[cont])) if np.any(cont) else math.inf
    return ResidualReport(
        max_continuation_residual=float(cont_res.max(initial=0.0)),
        max_stopping_violation=float(stop_viol.max(initial=0.0)),
        smooth_fit_residual=fit_residual,
        min_continuation_value=min_v,
        per_point=rows,
        tol=tol,
    )


def smooth_fit_residual(sol: ClosedFormSolution) -> float:
    """``max(|v(x*+)|, x* |v'(x*+)|)`` relative to ``K_eff / r``."""
    v, dv, _ = continuation_branch(sol, sol.x_star)
    scale = sol.params.K_eff / sol.params.r
    return max(abs(v), abs(dv) * sol.x_star) / scale


def hjb_residual(sol: ClosedFormSolution, grid, tol: float = CONTINUATION_TOL) -> ResidualReport:
    grid = np.asarray(grid, dtype=float)
    if np.any(~np.isfinite(grid)) or np.any(grid <= 0):
        raise ValueError("grid points must be positive and finite")
    v, dv, d2v = (np.atleast_1d(a) for a in value_derivatives(sol, grid))
    return residual_report(sol.params, grid, v, dv, d2v, sol.x_star, smooth_fit_residual(sol), tol)


def verification_grid(sol: ClosedFormSolution, n: int = 2000) -> np.ndarray:
    return np.geomspace(sol.x_star / 10.0, sol.x_star * 10.0, n)


def threshold_policy_value(p: Params, b: float, x):
    """Expected discounted profit of exiting the first time demand falls to ``b``.

    ``J_b(x) = B x^2 - K/r + (K/r - B b^2) (x / b)^D2`` for ``x >= b``.
    """
    p = _as_reduced(p)
    if not p.admissible:
        raise InadmissibleParams(f"r - sigma^2 - 2 alpha = {p.growth_margin} <= 0")
    x = _demand(x)
    if not b > 0 or np.any(x < b):
        raise ThresholdAboveState(f"need 0 < b <= x, got b={b}")
    D2 = compute_roots(p).D2
    B, cost = p.B, p.K_eff / p.r
    return _out(B * x * x - cost + (cost - B * b * b) * (x / b) ** D2)


def threshold_gain_difference(p: ReducedParams, b1: float, b2: float) -> float:
    """Sign-accurate ``h(b1) - h(b2)`` with ``h(b) = (K/r - B b^2) b^-D2``.

    ``J_b(x) = B x^2 - K/r + x^D2 h(b)`` so comparing ``h`` compares policies for
    every ``x``. Written with expm1/log1p so the difference keeps full relative
    precision when ``b1`` and ``b2`` nearly coincide.
    """
    D2 = compute_roots(p).D2
    B, cost = p.B, p.K_eff / p.r
    lr = math.log1p((b1 - b2) / b2)
    return (cost * b2 ** (-D2) * math.expm1(-D2 * lr)
            - B * b2 ** (2.0 - D2) * math.expm1((2.0 - D2) * lr))


def golden_section_threshold(p: Params, x: float, rel_tol: float = 1e-15, max_iter: int = 500) -> float:
    """Maximise ``b -> J_b(x)`` over ``(0, x]`` by golden-section search.

    Uses only the threshold-policy value, never the smooth-fit formula, so it is
    an independent route to the optimal exit threshold.
    """
    p = _as_reduced(p)
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    lo, hi = x * 1e-12, float(x)

    def better(b1, b2):
        return threshold_gain_difference(p, b1, b2) > 0.0

    c = hi - invphi * (hi - lo)
    d = lo + invphi * (hi - lo)
    for _ in range(max_iter):
        if hi - lo <= rel_tol * hi:
            break
        if better(c, d):
            hi = d
            d = c
            c = hi - invphi * (hi - lo)
        else:
            lo = c
            c = d
            d = lo + invphi * (hi - lo)
    return 0.5 * (lo + hi)
