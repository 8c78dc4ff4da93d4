"""Monte Carlo valuation of threshold exit policies.

Demand is stepped exactly, ``X_{k+1} = X_k exp((alpha - sigma^2/2) dt + sigma sqrt(dt) Z_k)``,
the running profit is integrated with the left-endpoint rule and the exit
time is the first grid time with ``X_k <= b``. Every path (or antithetic pair)
draws from its own PCG64 stream spawned from ``SeedSequence(seed)``, so a path
sees the same normals whatever thresholds are evaluated alongside it and
however the paths are scheduled.
"""

from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np
from numba import njit

from .analytic import closed_form, threshold_policy_value, value
from .core_model import ModelParams, Params, perpetual_value, reduce_sunk_cost
from .errors import InvalidConfig, InvalidThreshold, TrivialReduction

# discrete monitoring shifts the effective barrier by about 0.5826 sigma sqrt(dt)
MONITORING_SHIFT = 0.5826
DEFAULT_BIAS_COEF = 0.05
SIM_KEYS = ("n_paths", "dt", "horizon", "seed", "antithetic")


@dataclass(frozen=True)
class SimConfig:
    n_paths: int = 10_000
    dt: float = 1e-2
    horizon: float = 200.0
    seed: int = 12345
    antithetic: bool = False

    def __post_init__(self):
        if isinstance(self.n_paths, bool) or int(self.n_paths) != self.n_paths or self.n_paths < 1:
            raise InvalidConfig(f"n_paths must be a positive integer, got {self.n_paths!r}")
        object.__setattr__(self, "n_paths", int(self.n_paths))
        if not (math.isfinite(self.dt) and self.dt > 0):
            raise InvalidConfig(f"dt must be positive, got {self.dt!r}")
        if not (math.isfinite(self.horizon) and self.horizon >= self.dt):
            raise InvalidConfig(f"horizon must be >= dt, got {self.horizon!r}")
        if isinstance(self.seed, bool) or int(self.seed) != self.seed or not 0 <= self.seed < 2**64:
            raise InvalidConfig(f"seed must be an integer in [0, 2^64), got {self.seed!r}")
        object.__setattr__(self, "seed", int(self.seed))
        if self.antithetic and self.n_paths % 2:
            raise InvalidConfig("antithetic sampling needs an even n_paths")

    @property
    def n_steps(self) -> int:
        return int(round(self.horizon / self.dt))

    @classmethod
    def from_dict(cls, data: Mapping) -> "SimConfig":
        unknown = set(data) - set(SIM_KEYS)
        if unknown:
            raise InvalidConfig(f"unknown mc keys: {sorted(unknown)}")
        return cls(**dict(data))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class MCEstimate:
    mean: float
    stderr: float
    n_effective: int
    tail_bound: float
    threshold: float = 0.0

    def tolerance(self, dt: float, bias_coef: float = DEFAULT_BIAS_COEF) -> float:
        """``3 stderr + tail_bound + bias_coef * dt``."""
        return 3.0 * self.stderr + self.tail_bound + bias_coef * dt

    def to_dict(self) -> dict:
        return asdict(self)


@njit(cache=True)
def _single_path(gen, x0, drift, vol, weights, g2, K, thresholds, sums, stops):
    """One path against descending ``thresholds`` (terminated by a -inf sentinel).

    ``sums[j]`` receives the discounted profit accumulated before the path
    first sits at or below ``thresholds[j]`` and ``stops[j]`` the step index of
    that event, or -1 if it does not happen before the horizon.
    """
    nb = thresholds.shape[0] - 1
    x = x0
    s = 0.0
    j = 0
    for k in range(weights.shape[0]):
        if x <= thresholds[j]:
            while x <= thresholds[j]:
                sums[j] = s
                stops[j] = k
                j += 1
            if j == nb:
                return x
        s += weights[k] * (g2 * x * x - K)
        x *= math.exp(drift + vol * gen.standard_normal())
    while j < nb:
        sums[j] = s
        stops[j] = -1
        j += 1
    return x


@njit(cache=True)
def _antithetic_pair(gen, x0, drift, vol, weights, g2, K, thresholds, sums, stops):
    """Like :func:`_single_path` for a path and its mirror image (``Z -> -Z``).

    The mirror is ``x0^2 e^{2 k drift} / X_k``, which saves an exponential per step.
    """
    nb = thresholds.shape[0] - 1
    xa = x0
    xb = x0
    sa = 0.0
    sb = 0.0
    ja = 0
    jb = 0
    c = x0 * x0
    growth = math.exp(2.0 * drift)
    for k in range(weights.shape[0]):
        if xa <= thresholds[ja]:
            while xa <= thresholds[ja]:
                sums[0, ja] = sa
                stops[0, ja] = k
                ja += 1
        if xb <= thresholds[jb]:
            while xb <= thresholds[jb]:
                sums[1, jb] = sb
                stops[1, jb] = k
                jb += 1
        if ja == nb and jb == nb:
            break
        w = weights[k]
        sa += w * (g2 * xa * xa - K)
        sb += w * (g2 * xb * xb - K)
        xa *= math.exp(drift + vol * gen.standard_normal())
        c *= growth
        xb = c / xa
    while ja < nb:
        sums[0, ja] = sa
        stops[0, ja] = -1
        ja += 1
    while jb < nb:
        sums[1, jb] = sb
        stops[1, jb] = -1
        jb += 1
    return xa, xb


def tail_bound(p: Params, x0: float, horizon: float) -> float:
    """Bound on the profit neglected after the horizon, ``E int_T^inf e^{-rs} |Pi(X_s)| ds``.

    Uses ``E X_s^2 = x0^2 e^{(2 alpha + sigma^2) s}``; an exit cost ``I`` adds ``|I| e^{-rT}``.
    """
    if not p.admissible:
        return math.inf
    quad = p.B * x0 * x0 * math.exp(-p.growth_margin * horizon)
    return quad + abs(p.K) / p.r * math.exp(-p.r * horizon)


@dataclass
class PathBatch:
    """Stopping data of one simulated path set against a list of thresholds.

    The kernel never sees the exit cost, so the same batch prices every
    ``(b, I)`` combination for the dynamics and running cost it was run with.
    """

    params: Params
    x0: float
    cfg: SimConfig
    thresholds: np.ndarray
    sums: np.ndarray = field(repr=False)  # (n_streams, n_states, n_thresholds)
    stops: np.ndarray = field(repr=False)
    terminal: np.ndarray = field(repr=False)  # (n_paths,)

    def index(self, b: float) -> int:
        hits = np.nonzero(self.thresholds == b)[0]
        if hits.size == 0:
            raise InvalidThreshold(f"threshold {b!r} was not simulated in this batch")
        return int(hits[0])

    def payoffs(self, b: float, I: float = 0.0) -> np.ndarray:
        """Per-sample payoffs (antithetic pairs averaged) for threshold ``b`` and exit cost ``I``."""
        j = self.index(b)
        pay = self.sums[:, :, j]
        if I != 0.0:
            stops = self.stops[:, :, j]
            charged = stops >= 0
            disc = np.exp(-self.params.r * self.cfg.dt * np.where(charged, stops, 0))
            pay = pay - np.where(charged, disc * I, 0.0)
        return pay.mean(axis=1)

    def estimate(self, b: float, I: float = 0.0) -> MCEstimate:
        samples = self.payoffs(b, I)
        n = samples.shape[0]
        mean = float(np.mean(samples))
        stderr = float(np.std(samples, ddof=1) / math.sqrt(n)) if n > 1 else math.inf
        p = self.params
        tb = tail_bound(p, self.x0, self.cfg.horizon) + abs(I) * math.exp(-p.r * self.cfg.horizon)
        return MCEstimate(mean=mean, stderr=stderr, n_effective=n, tail_bound=tb, threshold=float(b))

    def compatible(self, p: Params, x0: float, cfg: SimConfig) -> bool:
        """True if this batch is what simulating ``p`` from ``x0`` under ``cfg`` would produce."""
        same = all(getattr(self.params, k) == getattr(p, k) for k in ("alpha", "sigma", "r", "gamma", "K"))
        return same and self.x0 == x0 and self.cfg == cfg


def simulate_batch(p: Params, x0: float, thresholds: Sequence[float], cfg: SimConfig) -> PathBatch:
    """Simulate ``cfg.n_paths`` paths once, recording the exit data for every threshold.

    ``b = 0`` means never exit. The exit cost of ``p`` is not applied here;
    see :meth:`PathBatch.estimate`.
    """
    if not (math.isfinite(x0) and x0 > 0):
        raise InvalidThreshold(f"x0 must be positive, got {x0}")
    for b in thresholds:
        if not (math.isfinite(b) and 0.0 <= b <= x0):
            raise InvalidThreshold(f"threshold {b} outside [0, x0={x0}]")
    if p.r * cfg.horizon < 20.0:
        warnings.warn(f"r*T = {p.r * cfg.horizon:.3g} < 20: horizon truncation may be material",
                      RuntimeWarning, stacklevel=2)
    th = np.asarray(thresholds, dtype=float)
    order = np.argsort(-th, kind="stable")
    th_sorted = np.append(th[order], -np.inf)
    n = cfg.n_steps
    dt = cfg.dt
    weights = np.exp(-p.r * dt * np.arange(n)) * dt
    drift = (p.alpha - 0.5 * p.sigma**2) * dt
    vol = p.sigma * math.sqrt(dt)
    g2 = 0.25 * p.gamma**2
    n_states = 2 if cfg.antithetic else 1
    n_streams = cfg.n_paths // n_states
    nb = th.size
    sums = np.empty((n_streams, n_states, nb))
    stops = np.empty((n_streams, n_states, nb), dtype=np.int64)
    terminal = np.empty((n_streams, n_states))
    children = np.random.SeedSequence(cfg.seed).spawn(n_streams)
    args = (float(x0), drift, vol, weights, g2, p.K, th_sorted)
    for i, child in enumerate(children):
        gen = np.random.Generator(np.random.PCG64(child))
        if cfg.antithetic:
            terminal[i] = _antithetic_pair(gen, *args, sums[i], stops[i])
        else:
            terminal[i, 0] = _single_path(gen, *args, sums[i, 0], stops[i, 0])
    unsort = np.empty_like(order)
    unsort[order] = np.arange(nb)
    return PathBatch(params=p, x0=float(x0), cfg=cfg, thresholds=th,
                     sums=sums[:, :, unsort], stops=stops[:, :, unsort], terminal=terminal.reshape(-1))


def simulate_thresholds(p: Params, x0: float, b_list: Sequence[float], cfg: SimConfig) -> list[MCEstimate]:
    """Estimates for several thresholds from one set of paths; ``b = 0`` means never exit."""
    batch = simulate_batch(p, x0, b_list, cfg)
    return [batch.estimate(b, p.I) for b in b_list]


def simulate_threshold_value(p: Params, x0: float, b: float, cfg: SimConfig) -> MCEstimate:
    if not (b == 0.0 or 0.0 < b < x0):
        raise InvalidThreshold(f"need x0 > b > 0 or b = 0, got x0={x0}, b={b}")
    return simulate_thresholds(p, x0, [b], cfg)[0]


def terminal_samples(p: Params, x0: float, cfg: SimConfig) -> np.ndarray:
    """Simulated ``X(T)`` for every path (no exit)."""
    return simulate_batch(p, x0, [0.0], cfg).terminal


def analytic_policy_value(p: Params, x0: float, b: float) -> float:
    """Closed-form value of the threshold policy in the full problem (``b = 0``: never exit)."""
    if b == 0.0:
        return perpetual_value(p, x0)
    rp = reduce_sunk_cost(p) if isinstance(p, ModelParams) else p
    return threshold_policy_value(rp, b, x0) + rp.value_offset


def monitoring_allowance(p: Params, b: float, dt: float) -> float:
    return MONITORING_SHIFT * p.sigma * math.sqrt(dt) * b


@dataclass
class SweepResult:
    x0: float
    estimates: list[MCEstimate]
    dt: float
    sigma: float

    @property
    def thresholds(self) -> list[float]:
        return [e.threshold for e in self.estimates]

    @property
    def argmax(self) -> int:
        return int(np.argmax([e.mean for e in self.estimates]))

    @property
    def b_argmax(self) -> float:
        return self.estimates[self.argmax].threshold

    def bracket(self) -> tuple[float, float]:
        """Neighbours of the discrete argmax: a unimodal curve peaks between them."""
        b = sorted(self.thresholds)
        k = b.index(self.b_argmax)
        h = MONITORING_SHIFT * self.sigma * math.sqrt(self.dt) * b[k]
        lo = b[k - 1] if k > 0 else 0.0
        hi = b[k + 1] if k + 1 < len(b) else self.x0
        return lo - 2 * h, hi + 2 * h

    def brackets(self, x: float) -> bool:
        lo, hi = self.bracket()
        return lo <= x <= hi

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\r\n")
        w.writerow(["b", "mean", "stderr"])
        for e in self.estimates:
            w.writerow([repr(e.threshold), repr(e.mean), repr(e.stderr)])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {"x0": self.x0, "b_argmax": self.b_argmax, "bracket": list(self.bracket()),
                "estimates": [e.to_dict() for e in self.estimates]}


def _reuse(batch: PathBatch | None, p: Params, x0: float, cfg: SimConfig, b_list) -> PathBatch:
    if batch is None:
        return simulate_batch(p, x0, b_list, cfg)
    if not batch.compatible(p, x0, cfg):
        raise InvalidConfig("batch was simulated with different dynamics, x0 or configuration")
    return batch


def threshold_sweep(p: Params, x0: float, b_list: Sequence[float], cfg: SimConfig,
                    batch: PathBatch | None = None) -> SweepResult:
    """Common-random-number estimates of ``J_b(x0)`` over a list of thresholds.

    Pass ``batch`` to price the sweep from paths already simulated with every ``b``.
    """
    for b in b_list:
        if not 0.0 < b <= x0:
            raise InvalidThreshold(f"sweep thresholds must lie in (0, x0={x0}], got {b}")
    batch = _reuse(batch, p, x0, cfg, b_list)
    return SweepResult(x0=x0, estimates=[batch.estimate(b, p.I) for b in b_list], dt=cfg.dt, sigma=p.sigma)


@dataclass
class ConsistencyReport:
    K_eff: float
    value_offset: float
    threshold: float
    estimate: MCEstimate
    analytic: float
    tolerance: float
    extra: dict = field(default_factory=dict)

    @property
    def difference(self) -> float:
        return self.estimate.mean - self.analytic

    @property
    def passed(self) -> bool:
        return abs(self.difference) <= self.tolerance

    def to_dict(self) -> dict:
        return {"K_eff": self.K_eff, "value_offset": self.value_offset, "threshold": self.threshold,
                "mean": self.estimate.mean, "stderr": self.estimate.stderr,
                "tail_bound": self.estimate.tail_bound, "analytic": self.analytic,
                "difference": self.difference, "tolerance": self.tolerance, "passed": self.passed}


def sunk_cost_consistency(p: ModelParams, x0: float, cfg: SimConfig,
                          bias_coef: float = DEFAULT_BIAS_COEF, batch: PathBatch | None = None) -> ConsistencyReport:
    """Simulate the objective with an explicit exit cost and compare with the reduced closed form.

    The exit threshold is the optimum of the reduced problem; the reference
    value is ``v_reduced(x0) - I``. A ``batch`` simulated with the same
    dynamics and ``K`` (any ``I``) and containing that threshold is reused.
    """
    rp = reduce_sunk_cost(p)
    if rp.trivial_never_exit:
        raise TrivialReduction(f"K - r I = {rp.K_eff} <= 0")
    sol = closed_form(rp)
    b = sol.x_star
    if not b < x0:
        raise InvalidThreshold(f"x0={x0} is already in the exit region (x*={b})")
    est = _reuse(batch, p, x0, cfg, [b]).estimate(b, p.I)
    target = value(sol, x0) + rp.value_offset
    return ConsistencyReport(K_eff=rp.K_eff, value_offset=rp.value_offset, threshold=b, estimate=est,
                             analytic=target, tolerance=est.tolerance(cfg.dt, bias_coef))
