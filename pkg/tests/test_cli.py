import csv
import io
import json
import subprocess
import sys

import pytest

from firmexit.cli import main

FAST_MC = ["--n-paths", "400", "--dt", "0.01", "--horizon", "200", "--seed", "5"]


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_solve_reference(capsys):
    code, out, _ = run(capsys, "solve")
    d = json.loads(out)
    assert code == 0
    assert d["x_star"] == pytest.approx(0.6498394, abs=5e-8)
    assert d["A2"] == pytest.approx(1.8011, abs=5e-4)
    assert d["admissibility"] == "Admissible"
    assert set(d) >= {"D1", "D2", "B", "x_star", "A2", "admissibility", "K_eff", "offset"}


def test_solve_trivial(capsys):
    code, out, err = run(capsys, "solve", "--K", "0")
    assert code == 2 and json.loads(out)["admissibility"] == "TrivialNeverExit"
    assert "TrivialNeverExit" in err
    code, out, _ = run(capsys, "solve", "--alpha", "0.03")
    assert code == 2 and json.loads(out)["admissibility"] == "TrivialInfinite"
    code, out, _ = run(capsys, "solve", "--I", "10")
    assert code == 2 and json.loads(out)["admissibility"] == "TrivialNeverExit"


def test_solve_csv(capsys):
    code, out, _ = run(capsys, "solve", "--format", "csv")
    rows = list(csv.reader(io.StringIO(out)))
    assert code == 0 and rows[0][:4] == ["D1", "D2", "B", "x_star"] and len(rows) == 2


def test_bad_arguments_exit_1(capsys):
    assert run(capsys, "solve", "--sigma", "0")[0] == 1
    assert run(capsys, "solve", "--bogus", "1")[0] == 1
    assert run(capsys, "nosuch")[0] == 1
    assert run(capsys)[0] == 1
    assert run(capsys, "solve", "--sig", "0.3")[0] == 1  # no prefix matching
    assert run(capsys, "solve", "--format", "xml")[0] == 1


def test_config_file(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"params": {"alpha": 0.02, "sigma": 0.2, "r": 0.1, "gamma": 1, "K": 4}}))
    code, out, _ = run(capsys, "solve", "--config", str(cfg))
    assert code == 0 and json.loads(out)["x_star"] == pytest.approx(2 * 0.6498393924658125)
    # flags override the file
    code, out, _ = run(capsys, "solve", "--config", str(cfg), "--K", "1")
    assert json.loads(out)["x_star"] == pytest.approx(0.6498393924658125)


@pytest.mark.parametrize("bad", [
    {"params": {"alpha": 0.02, "sigma": 0.2, "r": 0.1, "gamma": 1, "K": 1, "mu": 0}},
    {"extra": 1},
    {"mc": {"npaths": 10}},
    [1, 2],
])
def test_config_strict(tmp_path, capsys, bad):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps(bad))
    cmd = "mc" if "mc" in bad else "solve"
    assert run(capsys, cmd, "--config", str(cfg))[0] == 1


def test_config_unreadable(tmp_path, capsys):
    bad = tmp_path / "c.json"
    bad.write_text("{not json")
    assert run(capsys, "solve", "--config", str(bad))[0] == 1
    assert run(capsys, "solve", "--config", str(tmp_path / "missing.json"))[0] == 1


def test_verify(capsys):
    code, out, _ = run(capsys, "verify")
    d = json.loads(out)
    assert code == 0 and d["passed"] and all(d["checks"].values())
    assert d["profit_at_half_x_star"] <= 0


def test_verify_fault_injection(capsys):
    code, _, err = run(capsys, "verify", "--perturb-a2", "0.01")
    assert code == 4
    assert "worst point" in err


def test_converge(capsys):
    code, out, _ = run(capsys, "converge", "--caps-rel", "4,8,16,32,64", "--format", "csv")
    rows = list(csv.reader(io.StringIO(out)))
    assert code == 0 and rows[0] == ["C", "A1", "A2", "x_star_C", "gap_x", "gap_A2"] and len(rows) == 6
    code, out, _ = run(capsys, "converge", "--caps-rel", "4")
    assert code == 0 and json.loads(out)["metadata"]["rate"] is None
    code, out, err = run(capsys, "converge", "--caps-rel", "0.5,4")
    assert code == 3 and "CapTooSmall" in err
    assert run(capsys, "converge", "--caps", "3,2")[0] == 1


def test_fd(capsys):
    code, out, err = run(capsys, "fd", "--n", "100", "--tol", "5e-2", "--format", "csv")
    assert code == 0 and out.startswith("x,value\r\n")
    code, _, _ = run(capsys, "fd", "--n", "100", "--tol", "1e-9")
    assert code == 5
    code, out, _ = run(capsys, "fd", "--refine", "--n-list", "200,400,800")
    d = json.loads(out)
    assert code == 0 and d["fitted_order"] >= 1.0


def test_mc(capsys):
    code, out, _ = run(capsys, "mc", *FAST_MC, "--format", "csv")
    rows = list(csv.DictReader(io.StringIO(out)))
    assert code == 0 and [float(r["b"]) for r in rows][0] == 0.0
    code, out, _ = run(capsys, "mc", *FAST_MC, "--sweep", "--format", "csv")
    assert out.startswith("b,mean,stderr\r\n") and code in (0, 6)
    code, out, _ = run(capsys, "mc", *FAST_MC, "--sunk-cost", "--I", "5")
    assert json.loads(out)["K_eff"] == pytest.approx(0.5)
    assert run(capsys, "mc", *FAST_MC, "--sunk-cost", "--I", "20")[0] == 2
    assert run(capsys, "mc", "--n-paths", "3", "--antithetic")[0] == 1


def test_mc_tolerance_failure_exit_6(capsys):
    # a threshold far from the optimum with a coarse step: the monitoring bias is many stderrs
    code, _, _ = run(capsys, "mc", "--K", "1", "--r", "1", "--alpha", "0", "--sigma", "0.3",
                     "--b", "0.8", "--dt", "0.01", "--horizon", "25", "--n-paths", "4000", "--seed", "7", "--antithetic")
    assert code == 6


def test_report(capsys):
    code, out, _ = run(capsys, "report")
    d = json.loads(out)
    assert code == 0 and d["verify"]["passed"] and d["converge"]["monotone"]
    assert run(capsys, "report", "--K", "-1")[0] == 2


@pytest.mark.parametrize("argv", [
    ["solve"], ["verify"], ["converge"], ["report"],
    ["fd", "--n", "200", "--tol", "0.05"],
    ["mc", *FAST_MC], ["mc", *FAST_MC, "--sweep"],
])
@pytest.mark.parametrize("fmt", ["csv", "json"])
def test_outputs_byte_identical(tmp_path, capsys, argv, fmt):
    outs = []
    for k in range(2):
        path = tmp_path / f"o{k}.{fmt}"
        main([*argv, "--format", fmt, "--out", str(path)])
        outs.append(path.read_bytes())
    capsys.readouterr()
    assert outs[0] == outs[1] and outs[0]


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "firmexit", "solve", "--format", "csv"],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.startswith("D1,D2")
