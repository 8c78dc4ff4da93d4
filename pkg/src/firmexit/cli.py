"""Command-line interface: ``firmexit {solve,verify,converge,fd,mc,report}``.

Parameters come from the reference set, then ``--config FILE`` (strict JSON),
then individual flags. The main artefact goes to ``--out`` (or stdout) as CSV
or JSON; diagnostics go to stderr. Nothing time- or host-dependent is written,
so identical inputs give byte-identical outputs.

Exit codes: 0 ok, 1 usage/config/runtime error, 2 trivial or inadmissible
parameters, 3 convergence table failure, 4 verification failure, 5 finite
difference failure, 6 Monte Carlo tolerance failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import math
import sys
import warnings

import numpy as np

from . import REFERENCE_PARAMS
from .analytic import (
    closed_form,
    compute_roots,
    hjb_residual,
    threshold_policy_value,
    value,
    verification_grid,
)
from .core_model import ModelParams, check_admissibility, perpetual_value, profit, reduce_sunk_cost
from .errors import FirmExitError, InadmissibleParams, InvalidConfig, IterationLimit, ParameterError, TrivialProblem
from .fd_hjb import SchemeOptions, grid_refinement_study, solve_obstacle
from .montecarlo import SimConfig, simulate_thresholds, sunk_cost_consistency, threshold_sweep
from .truncated import convergence_study, solve_truncated, truncated_value

EXIT_OK, EXIT_ERROR, EXIT_TRIVIAL, EXIT_CONVERGE, EXIT_VERIFY, EXIT_FD, EXIT_MC = range(7)

CONFIG_KEYS = {"params", "mc", "C", "n", "caps", "caps_rel", "n_list", "sweep", "x0", "b", "tol", "omega",
               "out", "format"}
DEFAULT_CAPS_REL = [4, 8, 16, 32, 64, 128]
DEFAULT_N_LIST = [500, 1000, 2000, 4000]
DEFAULT_SWEEP_REL = [0.5 / 0.65, 0.6 / 0.65, 1.0, 0.7 / 0.65, 0.8 / 0.65]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_ERROR)


def _float_list(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False, allow_abbrev=False)
    g = common.add_argument_group("parameters")
    g.add_argument("--config", help="JSON config file")
    for name in ("alpha", "sigma", "r", "gamma", "K", "I"):
        g.add_argument(f"--{name}", type=float)
    o = common.add_argument_group("output")
    o.add_argument("--out", help="output file (default: stdout)")
    o.add_argument("--format", choices=("csv", "json"))

    parser = _Parser(prog="firmexit", description="Optimal market exit under GBM demand.", allow_abbrev=False)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sub.add_parser("solve", parents=[common], allow_abbrev=False, help="closed-form threshold and coefficients")

    p = sub.add_parser("verify", parents=[common], allow_abbrev=False, help="HJB residual and smooth-fit checks")
    p.add_argument("--perturb-a2", type=float, default=0.0, help="relative perturbation of A2 (self-test)")
    p.add_argument("--tol", type=float)

    p = sub.add_parser("converge", parents=[common], allow_abbrev=False, help="truncated-problem convergence table")
    p.add_argument("--caps", type=_float_list, help="absolute caps")
    p.add_argument("--caps-rel", type=_float_list, help="caps as multiples of x*")

    p = sub.add_parser("fd", parents=[common], allow_abbrev=False, help="finite-difference obstacle solve")
    p.add_argument("--C", type=float)
    p.add_argument("--n", type=int)
    p.add_argument("--tol", type=float, help="sup-norm tolerance relative to K/r")
    p.add_argument("--omega", type=float)
    p.add_argument("--refine", action="store_true", help="run a grid refinement study")
    p.add_argument("--n-list", type=_float_list)

    p = sub.add_parser("mc", parents=[common], allow_abbrev=False, help="Monte Carlo threshold-policy values")
    p.add_argument("--seed", type=int)
    p.add_argument("--n-paths", type=int)
    p.add_argument("--dt", type=float)
    p.add_argument("--horizon", type=float)
    p.add_argument("--antithetic", action="store_true", default=None)
    p.add_argument("--x0", type=float)
    p.add_argument("--b", type=float, help="exit threshold (default x*)")
    p.add_argument("--sweep", type=_float_list, nargs="?", const=[],
                   help="threshold sweep (absolute levels; empty for the default grid around x*)")
    p.add_argument("--sunk-cost", action="store_true", help="sunk-cost consistency check for the given I")

    p = sub.add_parser("report", parents=[common], allow_abbrev=False, help="solve + verify + converge summary")
    p.add_argument("--caps-rel", type=_float_list)
    return parser


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    if not isinstance(cfg, dict):
        raise UsageError("config must be a JSON object")
    unknown = set(cfg) - CONFIG_KEYS
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    return cfg


def _params(args, cfg: dict) -> ModelParams:
    data = REFERENCE_PARAMS.to_dict()
    if "params" in cfg:
        if not isinstance(cfg["params"], dict):
            raise UsageError("'params' must be an object")
        given = dict(cfg["params"])
        given.setdefault("I", 0.0)
        data = ModelParams.from_dict(given).to_dict()
    for name in data:
        v = getattr(args, name, None)
        if v is not None:
            data[name] = v
    return ModelParams.from_dict(data)


def _opt(args, cfg: dict, name: str, default=None, key: str | None = None):
    v = getattr(args, name, None)
    if v is not None:
        return v
    return cfg.get(key or name, default)


def _clean(obj):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to null."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return f if math.isfinite(f) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _rows_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    cols = list(rows[0]) if rows else []
    w.writerow(cols)
    for row in rows:
        w.writerow([_cell(row.get(c)) for c in cols])
    return buf.getvalue()


def _emit(args, cfg: dict, payload: dict, csv_text: str | None = None) -> None:
    fmt = _opt(args, cfg, "format", "json")
    if fmt not in ("csv", "json"):
        raise UsageError(f"format must be csv or json, got {fmt!r}")
    if fmt == "json":
        text = json.dumps(_clean(payload), indent=2) + "\n"
    else:
        text = csv_text if csv_text is not None else _rows_csv([_clean(payload)])
    out = _opt(args, cfg, "out")
    if out:
        with open(out, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _note(msg: str) -> None:
    print(msg, file=sys.stderr)


# -- subcommands -----------------------------------------------------------

def solve_report(p: ModelParams) -> tuple[dict, int]:
    status = check_admissibility(p)
    rp = reduce_sunk_cost(p)
    out = {"D1": None, "D2": None, "B": None, "x_star": None, "A1": None, "A2": None,
           "admissibility": status.status.value, "K_eff": rp.K_eff, "offset": rp.value_offset}
    roots = compute_roots(p)
    out["D1"], out["D2"] = roots.D1, roots.D2
    if not status.admissible:
        return out, EXIT_TRIVIAL
    out["B"] = p.B
    reduced = check_admissibility(rp)
    if not reduced.admissible:
        out["admissibility"] = reduced.status.value
        return out, EXIT_TRIVIAL
    sol = closed_form(rp)
    out.update(x_star=sol.x_star, A1=0.0, A2=sol.A2)
    return out, EXIT_OK


def cmd_solve(args, cfg) -> int:
    p = _params(args, cfg)
    out, code = solve_report(p)
    if code == EXIT_TRIVIAL:
        _note(f"trivial problem: {out['admissibility']}")
    _emit(args, cfg, out)
    return code


def verify_report(p: ModelParams, perturb_a2: float = 0.0, tol: float | None = None) -> tuple[dict, int]:
    sol = closed_form(p)
    if perturb_a2:
        sol = dataclasses.replace(sol, A2=sol.A2 * (1.0 + perturb_a2))
    rep = hjb_residual(sol, verification_grid(sol), **({"tol": tol} if tol is not None else {}))
    rp = sol.params
    bound = 2.0 * math.sqrt(rp.K_eff) / rp.gamma
    half = sol.x_star / 2.0
    checks = {
        "hjb_residual": rep.passed,
        "upper_bound": sol.x_star <= bound,
        "stopping_profit_nonpositive": profit(rp, half) <= 0.0,
    }
    out = {
        "x_star": sol.x_star, "A2": sol.A2, "perturb_a2": perturb_a2,
        "max_continuation_residual": rep.max_continuation_residual,
        "max_stopping_violation": rep.max_stopping_violation,
        "smooth_fit_residual": rep.smooth_fit_residual,
        "min_continuation_value": rep.min_continuation_value,
        "x_star_upper_bound": bound,
        "profit_at_half_x_star": profit(rp, half),
        "checks": checks,
        "worst_point": rep.worst_point(),
        "passed": all(checks.values()),
    }
    return out, EXIT_OK if out["passed"] else EXIT_VERIFY


def cmd_verify(args, cfg) -> int:
    p = _params(args, cfg)
    out, code = verify_report(p, args.perturb_a2, _opt(args, cfg, "tol"))
    if code:
        failed = [k for k, v in out["checks"].items() if not v]
        _note(f"verification failed: {failed}; worst point {out['worst_point']}; "
              f"smooth-fit residual {out['smooth_fit_residual']:.3e}")
    flat = {k: v for k, v in out.items() if k not in ("checks", "worst_point")}
    _emit(args, cfg, out, _rows_csv([_clean(flat)]))
    return code


def _caps(args, cfg, p) -> list[float]:
    caps = _opt(args, cfg, "caps")
    if caps is not None:
        return [float(c) for c in caps]
    rel = _opt(args, cfg, "caps_rel", DEFAULT_CAPS_REL)
    x_star = closed_form(p).x_star
    return [x_star * float(m) for m in rel]


def cmd_converge(args, cfg) -> int:
    p = _params(args, cfg)
    table = convergence_study(p, _caps(args, cfg, p))
    meta = table.metadata()
    for row in table.failed:
        _note(f"cap {row.C!r}: {row.error}")
    _emit(args, cfg, {"rows": table.records(), "metadata": meta}, table.to_csv())
    if table.failed or not meta["monotone"]:
        return EXIT_CONVERGE
    return EXIT_OK


def cmd_fd(args, cfg) -> int:
    p = _params(args, cfg)
    rp = reduce_sunk_cost(p)
    C = float(_opt(args, cfg, "C", 10.0))
    omega = _opt(args, cfg, "omega")
    opts = SchemeOptions(omega=float(omega)) if omega is not None else SchemeOptions()
    scale = rp.K_eff / rp.r
    if args.refine:
        n_list = [int(n) for n in _opt(args, cfg, "n_list", DEFAULT_N_LIST)]
        rep = grid_refinement_study(p, C, n_list, opts)
        rows = [{"n": n, "sup_error": e} for n, e in zip(rep.n, rep.sup_error)]
        ok = rep.fitted_order is not None and rep.fitted_order >= 1.0
        _note(f"fitted order {rep.fitted_order}")
        _emit(args, cfg, {**rep.to_dict(), "passed": ok}, _rows_csv(rows))
        return EXIT_OK if ok else EXIT_FD
    n = int(_opt(args, cfg, "n", 4000))
    tol = float(_opt(args, cfg, "tol", 5e-3))
    grid = solve_obstacle(p, C, n, opts)
    sol = solve_truncated(p, C)
    gap = float(np.max(np.abs(grid.values - truncated_value(sol, grid.x))))
    rel = gap / scale
    ok = rel < tol
    summary = {"C": C, "n": n, "sup_gap": gap, "relative_gap": rel, "tol": tol,
               "free_boundary": grid.free_boundary, "x_star_C": sol.x_star_C,
               "iterations": grid.iterations, "passed": ok}
    _note(f"fd: relative sup gap {rel:.3e} (tol {tol:g}), free boundary {grid.free_boundary!r} vs {sol.x_star_C!r}")
    _emit(args, cfg, {"summary": summary, "x": grid.x.tolist(), "value": grid.values.tolist()}, grid.to_csv())
    return EXIT_OK if ok else EXIT_FD


def _sim_config(args, cfg) -> SimConfig:
    mc = dict(cfg.get("mc", {}))
    if not isinstance(mc, dict):
        raise UsageError("'mc' must be an object")
    for flag, key in (("n_paths", "n_paths"), ("dt", "dt"), ("horizon", "horizon"),
                      ("seed", "seed"), ("antithetic", "antithetic")):
        v = getattr(args, flag, None)
        if v is not None:
            mc[key] = v
    return SimConfig.from_dict(mc)


def cmd_mc(args, cfg) -> int:
    p = _params(args, cfg)
    sim = _sim_config(args, cfg)
    x0 = float(_opt(args, cfg, "x0", 1.0))
    if args.sunk_cost:
        rep = sunk_cost_consistency(p, x0, sim)
        d = rep.to_dict()
        _note(f"sunk-cost consistency: diff {rep.difference:.4g}, tol {rep.tolerance:.4g}")
        _emit(args, cfg, d)
        return EXIT_OK if rep.passed else EXIT_MC
    sol = closed_form(p)
    v0 = value(sol, x0) + sol.params.value_offset
    sweep = _opt(args, cfg, "sweep")
    if sweep is not None:
        levels = list(sweep) or [sol.x_star * m for m in DEFAULT_SWEEP_REL]
        res = threshold_sweep(p, x0, levels, sim)
        within = all(e.mean <= v0 + 3.0 * e.stderr + e.tail_bound + 0.05 * sim.dt for e in res.estimates)
        brackets = res.brackets(sol.x_star)
        ok = within and brackets
        _note(f"sweep argmax b={res.b_argmax!r}, bracket {res.bracket()}, x*={sol.x_star!r}")
        _emit(args, cfg, {**res.to_dict(), "x_star": sol.x_star, "value": v0, "brackets_x_star": brackets,
                          "below_value": within, "passed": ok}, res.to_csv())
        return EXIT_OK if ok else EXIT_MC
    b = float(_opt(args, cfg, "b", sol.x_star))
    levels = [0.0, b]
    ests = simulate_thresholds(p, x0, levels, sim)
    rows = []
    for est in ests:
        target = perpetual_value(p, x0) if est.threshold == 0.0 else threshold_policy_value(p, est.threshold, x0) - p.I
        tol = est.tolerance(sim.dt)
        rows.append({"b": est.threshold, "mean": est.mean, "stderr": est.stderr, "tail_bound": est.tail_bound,
                     "analytic": target, "tolerance": tol, "passed": abs(est.mean - target) <= tol})
    ok = all(r["passed"] for r in rows)
    for r in rows:
        _note(f"b={r['b']!r}: mc {r['mean']:.6g} +/- {r['stderr']:.3g}, analytic {r['analytic']:.6g}, "
              f"{'pass' if r['passed'] else 'FAIL'}")
    _emit(args, cfg, {"x0": x0, "estimates": rows, "passed": ok}, _rows_csv(_clean(rows)))
    return EXIT_OK if ok else EXIT_MC


def cmd_report(args, cfg) -> int:
    p = _params(args, cfg)
    solved, code = solve_report(p)
    out = {"params": p.to_dict(), "solve": solved}
    if code == EXIT_OK:
        ver, vcode = verify_report(p)
        ver.pop("worst_point")
        table = convergence_study(p, _caps(args, cfg, p))
        out["verify"] = ver
        out["converge"] = table.metadata()
        code = vcode or (EXIT_CONVERGE if table.failed or not out["converge"]["monotone"] else EXIT_OK)
    flat = dict(solved)
    if "verify" in out:
        flat["verify_passed"] = out["verify"]["passed"]
        flat["converge_rate"] = out["converge"]["rate"]
        flat["converge_monotone"] = out["converge"]["monotone"]
    _emit(args, cfg, out, _rows_csv([_clean(flat)]))
    return code


COMMANDS = {"solve": cmd_solve, "verify": cmd_verify, "converge": cmd_converge,
            "fd": cmd_fd, "mc": cmd_mc, "report": cmd_report}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = _load_config(args.config)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            return COMMANDS[args.command](args, cfg)
    except (UsageError, ParameterError, InvalidConfig) as exc:
        _note(f"error: {exc}")
        return EXIT_ERROR
    except (InadmissibleParams, TrivialProblem) as exc:
        _note(f"trivial problem: {exc}")
        return EXIT_TRIVIAL
    except IterationLimit as exc:
        _note(f"error: {exc}")
        return EXIT_FD if args.command == "fd" else EXIT_ERROR
    except (FirmExitError, ValueError) as exc:
        _note(f"error: {type(exc).__name__}: {exc}")
        return EXIT_ERROR
