"""Finite-cap (truncated) exit problem.

With demand killed on first reaching the cap ``C`` the value satisfies the
terminal condition ``v(C) = 0`` in addition to smooth fit at the exit
threshold, which gives three equations for ``(A1, A2, x)``:

    A1 C^D1 + A2 C^D2 + B C^2 - K/r = 0
    A1 x^D1 + A2 x^D2 + B x^2 - K/r = 0
    D1 A1 x^D1 + D2 A2 x^D2 + 2 B x^2 = 0

Newton works on the first equation divided by ``C^D1``, i.e.
``A1 + eps1 A2 + eps2 = 0`` with ``eps1 = C^(D2-D1)`` and
``eps2 = B C^(2-D1) - (K/r) C^-D1``, which stays finite for large caps and
reduces to the closed-form system as ``C -> inf``.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .analytic import (
    ClosedFormSolution,
    ResidualReport,
    _as_reduced,
    closed_form,
    compute_roots,
    residual_report,
)
from .core_model import Params, ReducedParams, _demand, _out
from .errors import (
    CapTooSmall,
    DomainError,
    FirmExitError,
    InvariantViolation,
    NewtonDiverged,
    OutOfDomain,
)

log = logging.getLogger(__name__)

CAP_MARGIN = 1e-3
RESIDUAL_TOL = 1e-10
MAX_NEWTON_ITER = 50
MAX_HALVINGS = 40
ARMIJO_C = 1e-4
POSITIVITY_POINTS = 1000


@dataclass(frozen=True)
class TruncatedSolution:
    C: float
    A1: float
    A2: float
    x_star_C: float
    params: ReducedParams
    D1: float
    D2: float
    iterations: int
    residual_norm: float
    continuation_steps: int = 0

    def to_dict(self) -> dict:
        return {
            "C": self.C, "A1": self.A1, "A2": self.A2, "x_star_C": self.x_star_C,
            "iterations": self.iterations, "residual_norm": self.residual_norm,
            "continuation_steps": self.continuation_steps,
        }


def minimal_cap(p: Params, limit: ClosedFormSolution | None = None) -> float:
    """Smallest cap accepted by :func:`solve_truncated` (exclusive).

    Below ``2 sqrt(K)/gamma`` profit is negative on all of ``[0, C)`` so
    exiting immediately is optimal and no interior threshold exists.
    """
    p = _as_reduced(p)
    limit = limit or closed_form(p)
    return max(limit.x_star * (1.0 + CAP_MARGIN), 2.0 * math.sqrt(p.K_eff) / p.gamma)


def _scales(p: ReducedParams, C: float, x: float) -> np.ndarray:
    cost = p.K_eff / p.r
    return np.array([p.B * C * C + cost, p.B * x * x + cost, p.B * x * x + cost])


def newton_system_residual(p: Params, C: float, A1: float, A2: float, x: float) -> np.ndarray:
    """Unscaled residuals of ``v(C) = 0``, ``v(x) = 0`` and ``x v'(x) = 0``."""
    p = _as_reduced(p)
    if not 0.0 < x < C:
        raise DomainError(f"x must lie in (0, C) = (0, {C}), got {x}")
    roots = compute_roots(p)
    D1, D2 = roots.D1, roots.D2
    B, cost = p.B, p.K_eff / p.r
    a = A1 * x**D1
    b = A2 * x**D2
    return np.array([
        A1 * C**D1 + A2 * C**D2 + B * C * C - cost,
        a + b + B * x * x - cost,
        D1 * a + D2 * b + 2.0 * B * x * x,
    ])


def relative_residual(p: Params, C: float, A1: float, A2: float, x: float) -> float:
    """Max-norm of the residual with each equation divided by its term magnitude."""
    p = _as_reduced(p)
    return float(np.max(np.abs(newton_system_residual(p, C, A1, A2, x)) / _scales(p, C, x)))


class _ScaledSystem:
    """The eps-form system and its analytic Jacobian."""

    def __init__(self, p: ReducedParams, C: float, D1: float, D2: float, offset=None):
        self.B = p.B
        self.cost = p.K_eff / p.r
        self.D1, self.D2 = D1, D2
        self.eps1 = C ** (D2 - D1)
        self.eps2 = self.B * C ** (2.0 - D1) - self.cost * C ** (-D1)
        # row scales: first row is the cap equation divided by C^D1
        self.row_scale = np.array([(self.B * C * C + self.cost) * C ** (-D1), self.cost, self.cost])
        self.offset = np.zeros(3) if offset is None else np.asarray(offset, dtype=float)

    def __call__(self, u):
        A1, A2, x = u
        a, b = A1 * x**self.D1, A2 * x**self.D2
        Bx2 = self.B * x * x
        F = np.array([
            A1 + self.eps1 * A2 + self.eps2,
            a + b + Bx2 - self.cost,
            self.D1 * a + self.D2 * b + 2.0 * Bx2,
        ])
        return F + self.offset * self.row_scale

    def jacobian(self, u):
        A1, A2, x = u
        D1, D2, B = self.D1, self.D2, self.B
        xd1, xd2 = x**D1, x**D2
        return np.array([
            [1.0, self.eps1, 0.0],
            [xd1, xd2, D1 * A1 * xd1 / x + D2 * A2 * xd2 / x + 2.0 * B * x],
            [D1 * xd1, D2 * xd2, D1 * D1 * A1 * xd1 / x + D2 * D2 * A2 * xd2 / x + 4.0 * B * x],
        ])

    def merit(self, u) -> float:
        return float(np.max(np.abs(self(u)) / self.row_scale))


def limit_jacobian_determinant(limit: ClosedFormSolution) -> float:
    """Closed-form determinant of the eps-system Jacobian at the ``C = inf`` point."""
    return (4.0 - 2.0 * limit.roots.D2) * limit.B * limit.x_star ** (limit.roots.D2 + 1.0)


def _newton(system: _ScaledSystem, u0, C: float, max_iter: int = MAX_NEWTON_ITER):
    """Damped Newton with Armijo backtracking on the scaled residual."""
    u = np.array(u0, dtype=float)
    f = system.merit(u)
    for it in range(1, max_iter + 1):
        if f < RESIDUAL_TOL * 1e-3:
            return u, it - 1, f
        J = system.jacobian(u)
        try:
            step = np.linalg.solve(J, -system(u))
        except np.linalg.LinAlgError as exc:
            raise NewtonDiverged(f"singular Jacobian at iteration {it}") from exc
        t = 1.0
        for _ in range(MAX_HALVINGS):
            cand = u + t * step
            if 0.0 < cand[2] < C:
                fc = system.merit(cand)
                if np.isfinite(fc) and fc <= (1.0 - ARMIJO_C * t) * f:
                    break
            t *= 0.5
        else:
            # no decrease along the Newton direction: accept only if already converged
            if f < RESIDUAL_TOL:
                return u, it - 1, f
            raise NewtonDiverged(f"line search failed at iteration {it}, merit {f:.3e}")
        u, f = cand, fc
    if f < RESIDUAL_TOL:
        return u, max_iter, f
    raise NewtonDiverged(f"no convergence in {max_iter} iterations, merit {f:.3e}")


def _validate(p: ReducedParams, C: float, A1, A2, x, D1, D2) -> None:
    if not 0.0 < x < C:
        raise InvariantViolation(f"exit threshold {x} outside (0, {C})")
    res = relative_residual(p, C, A1, A2, x)
    if not res < RESIDUAL_TOL:
        raise InvariantViolation(f"boundary-value residual {res:.3e} exceeds {RESIDUAL_TOL:.0e}")
    bound = 2.0 * math.sqrt(p.K_eff) / p.gamma
    if x > bound * (1.0 + 1e-12):
        raise InvariantViolation(f"exit threshold {x} exceeds 2 sqrt(K)/gamma = {bound}")
    grid = np.linspace(x, C, POSITIVITY_POINTS + 2)[1:-1]
    v = A1 * grid**D1 + A2 * grid**D2 + p.B * grid * grid - p.K_eff / p.r
    if np.any(v <= 0.0):
        bad = grid[np.argmin(v)]
        raise InvariantViolation(f"value not positive on (x*_C, C): min {v.min():.3e} at x={bad:.6g}")


def solve_truncated(p: Params, C: float, residual_offset=None) -> TruncatedSolution:
    """Solve the truncated boundary-value system for cap ``C``.

    ``residual_offset`` adds a constant (relative) shift to each equation Newton
    sees; it exists for fault-injection tests. Validation always uses the
    true residual, so a shifted solve ends in :class:`InvariantViolation`.
    """
    p = _as_reduced(p)
    limit = closed_form(p)
    c_min = minimal_cap(p, limit)
    if not C > c_min:
        raise CapTooSmall(f"cap C={C} must exceed {c_min:.6g}")
    D1, D2 = limit.roots.D1, limit.roots.D2
    start = (0.0, limit.A2, limit.x_star)

    def attempt(c, u0):
        system = _ScaledSystem(p, c, D1, D2, residual_offset)
        return _newton(system, u0, c)

    steps = 0
    try:
        u, iters, f = attempt(C, start)
    except NewtonDiverged as exc:
        log.info("direct Newton failed at C=%g (%s); falling back to continuation", C, exc)
        u, iters, steps = _continuation(p, C, limit, attempt)
    A1, A2, x = (float(v) for v in u)
    _validate(p, C, A1, A2, x, D1, D2)
    return TruncatedSolution(C=C, A1=A1, A2=A2, x_star_C=x, params=p, D1=D1, D2=D2,
                             iterations=iters, residual_norm=relative_residual(p, C, A1, A2, x),
                             continuation_steps=steps)


def _continuation(p, C, limit, attempt):
    """Track the solution branch from a moderate cap out (or in) to ``C``."""
    c0 = max(4.0 * limit.x_star, minimal_cap(p, limit) * 1.5)
    caps = [c0]
    if C > c0:
        while caps[-1] * 2.0 < C:
            caps.append(caps[-1] * 2.0)
    else:
        while caps[-1] * 0.5 > C:
            caps.append(caps[-1] * 0.5)
    if caps[-1] != C:
        caps.append(C)
    u = (0.0, limit.A2, limit.x_star)
    total = 0
    for c in caps:
        try:
            u, iters, _ = attempt(c, u)
        except NewtonDiverged as exc:
            raise NewtonDiverged(f"continuation failed at C={c:.6g}: {exc}") from exc
        total += iters
    return u, total, len(caps)


def truncated_value(sol: TruncatedSolution, x):
    """Value of the truncated problem on ``[0, C]``."""
    x = _demand(x)
    if np.any(x > sol.C):
        raise OutOfDomain(f"x must lie in [0, C={sol.C}]")
    xa = np.atleast_1d(x)
    out = np.zeros_like(xa)
    cont = (xa > sol.x_star_C) & (xa < sol.C)
    xc = xa[cont]
    p = sol.params
    out[cont] = sol.A1 * xc**sol.D1 + sol.A2 * xc**sol.D2 + p.B * xc * xc - p.K_eff / p.r
    return _out(out.reshape(x.shape))


def truncated_hjb_residual(sol: TruncatedSolution, n: int = 2000) -> ResidualReport:
    """Variational-inequality check of a truncated solution on ``n`` points in ``(0, C)``."""
    p = sol.params
    x = np.linspace(0.0, sol.C, n + 2)[1:-1]
    cont = x > sol.x_star_C
    v = np.zeros_like(x)
    dv = np.zeros_like(x)
    d2v = np.zeros_like(x)
    xc = x[cont]
    a, b = sol.A1 * xc**sol.D1, sol.A2 * xc**sol.D2
    v[cont] = a + b + p.B * xc * xc - p.K_eff / p.r
    dv[cont] = (sol.D1 * a + sol.D2 * b) / xc + 2.0 * p.B * xc
    d2v[cont] = (sol.D1 * (sol.D1 - 1.0) * a + sol.D2 * (sol.D2 - 1.0) * b) / (xc * xc) + 2.0 * p.B
    xs = sol.x_star_C
    fit = np.abs(newton_system_residual(p, sol.C, sol.A1, sol.A2, xs))[1:] / _scales(p, sol.C, xs)[1:]
    return residual_report(p, x, v, dv, d2v, xs, float(fit.max()))


@dataclass
class ConvergenceRow:
    C: float
    solution: TruncatedSolution | None
    gap_x: float | None
    gap_A2: float | None
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.solution is not None


@dataclass
class ConvergenceTable:
    rows: list[ConvergenceRow]
    limit: ClosedFormSolution
    rate: float | None
    slack: float = 1e-13
    eps: list = field(default_factory=list)

    @property
    def failed(self) -> list[ConvergenceRow]:
        return [r for r in self.rows if not r.ok]

    def gaps_monotone(self) -> bool:
        good = [r for r in self.rows if r.ok]
        for prev, cur in zip(good, good[1:]):
            if cur.gap_x > prev.gap_x + self.slack or cur.gap_A2 > prev.gap_A2 + self.slack:
                return False
        return True

    def records(self) -> list[dict]:
        out = []
        for r in self.rows:
            s = r.solution
            out.append({
                "C": r.C,
                "A1": s.A1 if s else None,
                "A2": s.A2 if s else None,
                "x_star_C": s.x_star_C if s else None,
                "gap_x": r.gap_x,
                "gap_A2": r.gap_A2,
                "iterations": s.iterations if s else None,
                "status": "ok" if s else r.error,
            })
        return out

    def metadata(self) -> dict:
        return {
            "x_star_inf": self.limit.x_star,
            "A2_inf": self.limit.A2,
            "rate": self.rate,
            "expected_rate": self.limit.roots.D1 - 2.0,
            "monotone": self.gaps_monotone(),
            "failed_rows": len(self.failed),
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\r\n")
        cols = ["C", "A1", "A2", "x_star_C", "gap_x", "gap_A2"]
        w.writerow(cols)
        for rec in self.records():
            w.writerow(["" if rec[c] is None else repr(rec[c]) for c in cols])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({"rows": self.records(), "metadata": self.metadata()}, indent=2)


def fit_power_rate(C, gaps) -> float | None:
    """Least-squares slope ``rho`` in ``gap ~ c C^-rho`` on log-log data."""
    C = np.asarray(C, dtype=float)
    gaps = np.asarray(gaps, dtype=float)
    keep = gaps > 0
    if keep.sum() < 2:
        return None
    slope, _ = np.polyfit(np.log(C[keep]), np.log(gaps[keep]), 1)
    return float(-slope)


def convergence_study(p: Params, caps) -> ConvergenceTable:
    p = _as_reduced(p)
    caps = [float(c) for c in caps]
    if any(b <= a for a, b in zip(caps, caps[1:])):
        raise ValueError("caps must be strictly increasing")
    limit = closed_form(p)
    rows = []
    for C in caps:
        try:
            sol = solve_truncated(p, C)
        except FirmExitError as exc:
            rows.append(ConvergenceRow(C, None, None, None, f"{type(exc).__name__}: {exc}"))
            continue
        rows.append(ConvergenceRow(C, sol, abs(sol.x_star_C - limit.x_star), abs(sol.A2 - limit.A2)))
    good = [r for r in rows if r.ok]
    rate = fit_power_rate([r.C for r in good], [r.gap_x for r in good])
    D1, D2 = limit.roots.D1, limit.roots.D2
    eps = [(C ** (D2 - D1), p.B * C ** (2.0 - D1) - p.K_eff / p.r * C ** (-D1)) for C in caps]
    return ConvergenceTable(rows=rows, limit=limit, rate=rate, eps=eps)
