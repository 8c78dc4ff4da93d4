import dataclasses
import json

import numpy as np
import pytest

from firmexit import REFERENCE_PARAMS as P
from firmexit.analytic import closed_form, value
from firmexit.errors import InadmissibleParams, IterationLimit
from firmexit.fd_hjb import (
    SchemeOptions,
    complementarity_violation,
    discretize,
    grid_refinement_study,
    scaled_residual,
    solve_obstacle,
)
from firmexit.truncated import solve_truncated, truncated_value

SCALE = P.K / P.r


@pytest.fixture(scope="module")
def fine():
    return solve_obstacle(P, 10.0, 4000)


@pytest.fixture(scope="module")
def exact():
    return solve_truncated(P, 10.0)


def test_boundary_values_and_obstacle(fine):
    assert fine.values[0] == 0.0 and fine.values[-1] == 0.0
    assert np.all(fine.values >= 0.0)
    assert fine.values.shape == (4001,)


def test_matches_analytic_truncated(fine, exact):
    gap = np.max(np.abs(fine.values - truncated_value(exact, fine.x)))
    assert gap < 5e-3 * SCALE


def test_free_boundary_within_two_cells(fine, exact):
    assert abs(fine.free_boundary - exact.x_star_C) <= 2 * fine.h


def test_below_untruncated_value(fine):
    assert np.all(fine.values <= value(closed_form(P), fine.x) + 5e-3 * SCALE)


def test_complementarity(fine):
    assert complementarity_violation(P, fine) < 1e-18 * fine.n * SCALE**2
    res = scaled_residual(P, fine)[1:-1]
    v = fine.values[1:-1]
    tol = 1e-9 * (1 + v.max())
    pos = v > 0
    assert np.all(np.abs(res[pos]) <= tol)
    assert np.all(res[~pos] >= -tol)


def test_m_matrix_sign_pattern():
    for alpha in (0.02, -0.1, 0.3):
        p = dataclasses.replace(P, alpha=alpha, r=1.0)
        lower, diag, upper, _, n_up = discretize(p, 10.0, 200)
        assert np.all(lower[1:-1] <= 0) and np.all(upper[1:-1] <= 0) and np.all(diag > 0)
    # strong drift and weak diffusion forces upwinding near the origin
    p = dataclasses.replace(P, alpha=0.3, sigma=0.05, r=1.0)
    assert discretize(p, 10.0, 200)[4] > 0
    assert discretize(P, 10.0, 200)[4] == 0


def test_omega_invariance():
    tight = SchemeOptions(tol=1e-14)
    a = solve_obstacle(P, 10.0, 100, dataclasses.replace(tight, omega=1.2))
    b = solve_obstacle(P, 10.0, 100, dataclasses.replace(tight, omega=1.8))
    assert np.max(np.abs(a.values - b.values)) < 1e-9
    assert a.iterations != b.iterations


def test_warm_start_same_fixed_point():
    a = solve_obstacle(P, 10.0, 400, SchemeOptions(tol=1e-14))
    b = solve_obstacle(P, 10.0, 400, SchemeOptions(tol=1e-14, warm_start=False))
    assert np.max(np.abs(a.values - b.values)) < 1e-9


def test_option_validation():
    with pytest.raises(ValueError):
        SchemeOptions(omega=0.9)
    with pytest.raises(ValueError):
        SchemeOptions(omega=1.95)
    with pytest.raises(ValueError):
        solve_obstacle(P, 10.0, 99)


def test_iteration_limit():
    with pytest.raises(IterationLimit):
        solve_obstacle(P, 10.0, 400, SchemeOptions(max_iter_factor=1, warm_start=False))


def test_inadmissible():
    with pytest.raises(InadmissibleParams):
        solve_obstacle(dataclasses.replace(P, alpha=0.05), 10.0, 200)


def test_never_exit_case_degenerates_cleanly():
    p = dataclasses.replace(P, K=-0.5)
    g = solve_obstacle(p, 5.0, 400)
    assert np.all(g.values >= 0)
    assert complementarity_violation(p, g) < 1e-18 * g.n * (0.5 / p.r) ** 2
    assert g.free_boundary_index == 1


def test_sunk_cost_params_are_reduced():
    p5 = dataclasses.replace(P, I=5.0)
    g = solve_obstacle(p5, 10.0, 400)
    sol = solve_truncated(p5, 10.0)
    assert np.max(np.abs(g.values - truncated_value(sol, g.x))) < 5e-3 * 0.5 / P.r


def test_refinement_study():
    rep = grid_refinement_study(P, 10.0, [500, 1000, 2000])
    e = rep.sup_error
    assert all(b < a for a, b in zip(e, e[1:]))
    assert e[1] / e[2] >= 1.8
    assert rep.fitted_order >= 1.0
    d = json.loads(rep.to_json())
    assert set(d) == {"n", "sup_error", "fitted_order"}
    with pytest.raises(ValueError):
        grid_refinement_study(P, 10.0, [1000, 500])


def test_outputs(fine):
    text = fine.to_csv()
    lines = text.split("\r\n")
    assert lines[0] == "x,value" and len(lines) == fine.n + 3 and lines[-1] == ""
    d = json.loads(fine.to_json())
    assert d["n"] == 4000 and len(d["value"]) == 4001
