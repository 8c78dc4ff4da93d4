"""Finite-difference obstacle solver for the truncated problem on ``[0, C]``.

Discretises ``min{r V - alpha x V' - sigma^2 x^2 V''/2 - Pi(x), V} = 0`` with
``V(0) = V(C) = 0`` on a uniform grid and solves the resulting linear
complementarity problem by projected SOR. Shares no code with the analytic
solvers; it is the independent cross-check of the truncated solution.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .core_model import ModelParams, Params, reduce_sunk_cost
from .errors import InadmissibleParams, IterationLimit

MIN_NODES = 100


@dataclass(frozen=True)
class SchemeOptions:
    omega: float = 1.5
    tol: float = 1e-11
    max_iter_factor: int = 200
    # solve on n/2, n/4, ... first and interpolate as the starting iterate
    warm_start: bool = True

    def __post_init__(self):
        if not 1.0 <= self.omega <= 1.9:
            raise ValueError(f"omega must lie in [1.0, 1.9], got {self.omega}")
        if not self.tol > 0:
            raise ValueError("tol must be positive")


@dataclass
class ValueGrid:
    C: float
    n: int
    values: np.ndarray = field(repr=False)
    free_boundary_index: int
    iterations: int
    upwind_nodes: int = 0

    @property
    def h(self) -> float:
        return self.C / self.n

    @property
    def x(self) -> np.ndarray:
        return np.linspace(0.0, self.C, self.n + 1)

    @property
    def free_boundary(self) -> float:
        return self.free_boundary_index * self.h

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\r\n")
        w.writerow(["x", "value"])
        for xi, vi in zip(self.x, self.values):
            w.writerow([repr(float(xi)), repr(float(vi))])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "C": self.C, "n": self.n, "h": self.h,
            "free_boundary_index": self.free_boundary_index,
            "free_boundary": self.free_boundary,
            "iterations": self.iterations,
            "x": self.x.tolist(), "value": self.values.tolist(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def discretize(p: Params, C: float, n: int):
    """Tridiagonal coefficients ``(lower, diag, upper, rhs)`` on ``n + 1`` nodes.

    Central differences for ``V'`` unless they would give a positive
    off-diagonal, in which case that node switches to upwinding.
    """
    h = C / n
    x = np.linspace(0.0, C, n + 1)
    diff = 0.5 * p.sigma**2 * x * x / (h * h)
    adv = p.alpha * x / h  # |drift| / h per node
    lower = -(diff - 0.5 * adv)
    upper = -(diff + 0.5 * adv)
    diag = p.r + 2.0 * diff
    bad = (lower > 0) | (upper > 0)
    if np.any(bad):
        if p.alpha > 0:
            lower[bad] = -diff[bad]
            upper[bad] = -(diff[bad] + adv[bad])
            diag[bad] = p.r + 2.0 * diff[bad] + adv[bad]
        else:
            lower[bad] = -(diff[bad] - adv[bad])
            upper[bad] = -diff[bad]
            diag[bad] = p.r + 2.0 * diff[bad] - adv[bad]
    rhs = 0.25 * p.gamma**2 * x * x - p.K
    return lower, diag, upper, rhs, int(bad[1:-1].sum())


@njit(cache=True)
def _psor(lower, diag, upper, rhs, v, omega, tol, max_iter):
    n = v.shape[0] - 1
    for it in range(max_iter):
        change = 0.0
        vmax = 0.0
        for i in range(1, n):
            target = (rhs[i] - lower[i] * v[i - 1] - upper[i] * v[i + 1]) / diag[i]
            new = v[i] + omega * (target - v[i])
            if new < 0.0:
                new = 0.0
            d = abs(new - v[i])
            if d > change:
                change = d
            if new > vmax:
                vmax = new
            v[i] = new
        if change < tol * (1.0 + vmax):
            return it + 1
    return -1


def _levels(n: int, warm_start: bool) -> list[int]:
    levels = [n]
    while warm_start and levels[-1] % 2 == 0 and levels[-1] // 2 >= MIN_NODES:
        levels.append(levels[-1] // 2)
    return levels[::-1]


def solve_obstacle(p: Params, C: float, n: int, options: SchemeOptions | None = None) -> ValueGrid:
    opts = options or SchemeOptions()
    if isinstance(p, ModelParams):
        p = reduce_sunk_cost(p)
    if not p.admissible:
        raise InadmissibleParams(f"r - sigma^2 - 2 alpha = {p.growth_margin} <= 0")
    if n < MIN_NODES:
        raise ValueError(f"n must be >= {MIN_NODES}, got {n}")
    if not C > 0:
        raise ValueError("C must be positive")
    v = x_prev = None
    total = 0
    for m in _levels(n, opts.warm_start):
        lower, diag, upper, rhs, n_up = discretize(p, C, m)
        x = np.linspace(0.0, C, m + 1)
        start = np.zeros(m + 1) if v is None else np.interp(x, x_prev, v)
        start[0] = start[-1] = 0.0
        its = _psor(lower, diag, upper, rhs, start, opts.omega, opts.tol, opts.max_iter_factor * m)
        if its < 0:
            raise IterationLimit(f"PSOR did not converge in {opts.max_iter_factor * m} sweeps (n={m})")
        total += its
        v, x_prev = start, x
    positive = np.nonzero(v > 0.0)[0]
    fb = int(positive[0]) if positive.size else n
    return ValueGrid(C=float(C), n=n, values=v, free_boundary_index=fb, iterations=total, upwind_nodes=n_up)


def scaled_residual(p: Params, grid: ValueGrid) -> np.ndarray:
    """Interior ``(A V - f)_i / A_ii``: the distance of each node from its PSOR fixed point."""
    if isinstance(p, ModelParams):
        p = reduce_sunk_cost(p)
    lower, diag, upper, rhs, _ = discretize(p, grid.C, grid.n)
    v = grid.values
    res = np.zeros_like(v)
    res[1:-1] = (lower[1:-1] * v[:-2] + diag[1:-1] * v[1:-1] + upper[1:-1] * v[2:] - rhs[1:-1]) / diag[1:-1]
    return res


def complementarity_violation(p: Params, grid: ValueGrid) -> float:
    """``sum_i min(V_i, res_i)^2`` over interior nodes."""
    res = scaled_residual(p, grid)
    return float(np.sum(np.minimum(grid.values, res)[1:-1] ** 2))


@dataclass
class RefinementReport:
    n: list[int]
    sup_error: list[float]
    fitted_order: float | None
    grids: list = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return {"n": self.n, "sup_error": self.sup_error, "fitted_order": self.fitted_order}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def grid_refinement_study(p: Params, C: float, n_list, options: SchemeOptions | None = None,
                          reference=None) -> RefinementReport:
    """Sup-norm error against ``reference(x)`` for each grid size.

    ``reference`` defaults to the analytic truncated value for cap ``C``.
    """
    n_list = [int(n) for n in n_list]
    if any(b <= a for a, b in zip(n_list, n_list[1:])):
        raise ValueError("n_list must be strictly increasing")
    if reference is None:
        from .truncated import solve_truncated, truncated_value

        sol = solve_truncated(p, C)
        reference = lambda x: truncated_value(sol, x)  # noqa: E731
    errors, grids = [], []
    for n in n_list:
        g = solve_obstacle(p, C, n, options)
        errors.append(float(np.max(np.abs(g.values - reference(g.x)))))
        grids.append(g)
    order = None
    if len(n_list) >= 2:
        slope, _ = np.polyfit(np.log(n_list), np.log(errors), 1)
        order = float(-slope)
    return RefinementReport(n=n_list, sup_error=errors, fitted_order=order, grids=grids)
