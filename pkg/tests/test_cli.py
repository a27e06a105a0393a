import json
import subprocess
import sys

import pytest

from meanfield_lab.cli import main

pytestmark = pytest.mark.filterwarnings("ignore::meanfield_lab.diagnostics.LowConfidenceWarning")


@pytest.fixture
def spec_file(tmp_path):
    p = tmp_path / "spec.json"
    p.write_text(json.dumps({"kind": "pks_log", "dimension": 2,
                             "attractive_log_coefficient": 0.5, "spectral_band": 16}))
    return p


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    return code, capsys.readouterr()


def test_certify_pass_and_fail(capsys, spec_file, tmp_path):
    code, cap = run(capsys, "certify", "--spec", spec_file, "--sigma", 0.5, "--samples", 200)
    status = json.loads(cap.out)["status"]
    assert code == 1 and status["log_bound"] == "inconclusive"  # band 16 is too coarse
    riesz = tmp_path / "riesz.json"
    riesz.write_text(json.dumps({"kind": "riesz", "dimension": 2, "riesz_exponent": 0.5,
                                 "spectral_band": 64}))
    code, cap = run(capsys, "certify", "--spec", riesz, "--sigma", 0.5, "--samples", 200,
                    "--out", tmp_path / "c.json")
    assert code == 0 and json.loads((tmp_path / "c.json").read_text()) == json.loads(cap.out)
    strong = tmp_path / "strong.json"
    strong.write_text(json.dumps({"kind": "pks_log", "dimension": 2,
                                  "attractive_log_coefficient": 3.0, "spectral_band": 64}))
    code, _ = run(capsys, "certify", "--spec", strong, "--sigma", 0.25, "--samples", 200)
    assert code == 1


def test_simulate_pde_report_functional(capsys, spec_file, tmp_path):
    runs, pde, rep = tmp_path / "runs", tmp_path / "pde", tmp_path / "report"
    for N in (16, 32, 64):
        code, cap = run(capsys, "simulate", "--spec", spec_file, "--sigma", 0.5, "--T", 0.004,
                        "--save-every", 0.002, "--N", N, "--M", 3, "--dt", 1e-3, "--grid", 32,
                        "--out", runs)
        assert code == 0 and json.loads(cap.out)["survivors"] == 3
    code, cap = run(capsys, "pde", "--spec", spec_file, "--sigma", 0.5, "--T", 0.004,
                    "--save-every", 0.002, "--dt", 1e-3, "--grid", 32, "--out", pde)
    assert code == 0 and not json.loads(cap.out)["halted"]
    code, cap = run(capsys, "report", "--runs", runs, "--pde", pde, "--out", rep,
                    "--bandwidth", 0.1)
    assert code == 0
    assert (rep / "report.csv").read_text().splitlines()[0] == "N,t,kl,l1,D_mean,D_stderr,theta_fit"
    one = json.loads(run(capsys, "simulate", "--spec", spec_file, "--sigma", 0.5, "--T", 0.004,
                         "--save-every", 0.002, "--N", 16, "--M", 3, "--dt", 1e-3, "--grid", 32,
                         "--out", runs)[1].out)["directory"]
    code, cap = run(capsys, "functional", "--op", "modulated", "--spec", spec_file, "--runs", one,
                    "--pde", pde)
    out = json.loads(cap.out)
    assert code == 0 and out["stderr"] > 0 and set(out["params"]) == {"spec", "runs", "pde", "t"}
    code, cap = run(capsys, "functional", "--op", "gap", "--runs", one, "--grid", 32)
    assert code == 0 and json.loads(cap.out)["value"] >= 0


def test_functional_ldfunc_and_partition(capsys, tmp_path):
    code, cap = run(capsys, "functional", "--op", "ldfunc", "--functional", "linear", "--d", 1,
                    "--grid", 64, "--out", tmp_path / "f.json")
    out = json.loads(cap.out)
    assert code == 0 and abs(out["value"] - 0.2359143585) < 1e-8 and out["params"]["converged"]
    code, cap = run(capsys, "functional", "--op", "partition", "--N", 4, "--samples", 2000,
                    "--grid", 32)
    out = json.loads(cap.out)
    assert code == 0 and abs(out["params"]["gamma"] - 0.3) < 1e-10 and out["value"] > 0


def test_sweep(capsys, spec_file, tmp_path):
    cfg = tmp_path / "exp.json"
    cfg.write_text(json.dumps({"kind": "ld_zero", "out": "out", "grid": 32}))
    code, cap = run(capsys, "sweep", "--config", cfg)
    assert code == 0 and (tmp_path / "out" / "manifest.json").exists()
    assert json.loads(cap.out)["results"]["converged"]


def test_errors_exit_nonzero(capsys, tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"kind": "pks_log", "dimension": 2, "lambda": 1.0}))
    code, cap = run(capsys, "certify", "--spec", bad, "--sigma", 0.5)
    assert code == 2 and "unknown" in cap.err
    code, _ = run(capsys, "sweep", "--config", tmp_path / "missing.json")
    assert code == 2
    with pytest.raises(SystemExit):
        main(["bogus"])


def test_console_script(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "meanfield_lab.cli", "--version"],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.strip()
