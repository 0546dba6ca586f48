import json
import os

import pytest

from seqboed.cli import main
from seqboed.experiments import read_csv

CONFIGS = os.path.join(os.path.dirname(__file__), "..", "configs")


def run(args, capsys):
    code = main(args)
    out = capsys.readouterr()
    return code, out.out, out.err


def config(name):
    return os.path.join(CONFIGS, name)


def test_eig_sweep_artifacts(tmp_path, capsys):
    out = tmp_path / "sweep"
    code, _, _ = run(["run", config("eig_sweep.yaml"), "--set", "eig.J=400", "--set", "eig.taus=[1.0]",
                      "--out-dir", str(out)], capsys)
    assert code == 0
    with open(out / "eig_sweep.csv", encoding="utf-8") as fh:
        assert fh.readline() == "# seqboed-csv-v1 eig_sweep\n"
    kind, rows = read_csv(out / "eig_sweep.csv")
    assert kind == "eig_sweep" and len(rows) == 5
    assert {"tau", "p", "lb_gauss", "lb_laplace", "ub"} <= set(rows[0])
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seeds"]["master"] == 0
    assert manifest["config"]["eig"]["J"] == 400
    assert {"numpy", "scipy", "python", "seqboed"} <= set(manifest["versions"])
    assert manifest["artifacts"][0]["file"] == "eig_sweep.csv" and len(manifest["artifacts"][0]["sha256"]) == 64
    assert manifest["wall_time_s"] > 0


def test_kl_convergence_columns(tmp_path, capsys):
    out = tmp_path / "kl"
    code, _, _ = run(["run", config("kl_convergence.yaml"), "--set", "kl.J_grid=[100, 1000]",
                      "--set", "kl.replicates=3", "--out-dir", str(out)], capsys)
    assert code == 0
    kind, rows = read_csv(out / "kl_convergence.csv")
    assert list(rows[0]) == ["J", "replicate", "kl_marginal", "kl_posterior_p10", "kl_posterior_p50",
                             "kl_posterior_p90"]
    assert len(rows) == 6


def test_sequential_run_is_byte_reproducible(tmp_path, capsys):
    args = ["run", config("sequential_linear.yaml"), "--set", "sampler.J=40", "--set", "sampler.t_end=0.5",
            "--set", "eki.t_end=2", "--set", "sequential.steps=2", "--set", "sequential.normalizer_samples=300"]
    for name in ("a", "b"):
        assert run(args + ["--out-dir", str(tmp_path / name)], capsys)[0] == 0
    files = sorted(f for f in os.listdir(tmp_path / "a") if f.endswith(".csv"))
    assert files == ["aldi_diagnostics.csv", "sequential_candidates.csv", "sequential_eki_trace.csv",
                     "sequential_steps.csv"]
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    _, steps = read_csv(tmp_path / "a" / "sequential_steps.csv")
    assert [r["n"] for r in steps] == [1.0, 2.0]
    assert "wall_time" not in steps[0]
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert len(manifest["step_wall_times_s"]) == 2


def test_seed_override_changes_output(tmp_path, capsys):
    base = ["run", config("eki_optimize.yaml"), "--set", "eig.J=300", "--set", "eki.t_end=5"]
    run(base + ["--out-dir", str(tmp_path / "s0")], capsys)
    run(base + ["--seed", "7", "--out-dir", str(tmp_path / "s7")], capsys)
    a = (tmp_path / "s0" / "eki_trace.csv").read_bytes()
    b = (tmp_path / "s7" / "eki_trace.csv").read_bytes()
    assert a != b


def test_exit_codes(tmp_path, capsys):
    code, _, err = run(["run", config("linear.yaml"), "--set", "eig.J=-5"], capsys)
    assert code == 3 and "eig.J" in err
    code, _, err = run(["run", str(tmp_path / "missing.yaml")], capsys)
    assert code == 2
    bad = tmp_path / "bad.yaml"
    bad.write_text("experiment: [\n")
    assert run(["run", str(bad)], capsys)[0] == 2
    # a heat-only noise keyword on the linear model is a validation error
    code, _, err = run(["run", config("eig_sweep.yaml"), "--set", "noise.covariance=heat_default",
                        "--out-dir", str(tmp_path / "x")], capsys)
    assert code == 3 and "noise.covariance" in err


def test_runtime_error_exit_code(tmp_path, capsys):
    # EIG above the loss shift is a numerical failure of the optimizer
    code, _, err = run(["run", config("eki_optimize.yaml"), "--set", "eig.J=300", "--set", "eki.c_shift=0.5",
                        "--out-dir", str(tmp_path / "e")], capsys)
    assert code == 4 and "c_shift" in err


def test_verify_small_sample_mode_warns_and_is_reproducible(capsys):
    args = ["verify", config("linear.yaml"), "--set", "eig.J=10", "--set", "sampler.J=10", "--set", "eki.t_end=10"]
    code, first, _ = run(args, capsys)
    assert code == 0
    assert "[WARN]" in first and "expected at small sample size" in first
    assert first.strip().splitlines()[-1].startswith("verify: WARN")
    code, second, _ = run(args, capsys)
    assert first == second


def test_threads_flag_sets_environment(tmp_path, capsys, monkeypatch):
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS"):
        monkeypatch.delenv(var, raising=False)
    code, _, _ = run(["run", config("eig_sweep.yaml"), "--set", "eig.J=200", "--set", "eig.taus=[0.5]",
                      "--set", "eig.laplace=false", "--threads", "1", "--out-dir", str(tmp_path / "t")], capsys)
    assert code == 0 and os.environ["OMP_NUM_THREADS"] == "1"
    assert run(["run", config("eig_sweep.yaml"), "--threads", "0"], capsys)[0] == 3


def test_usage_error_is_exit_2(capsys):
    with pytest.raises(SystemExit) as info:
        main(["frobnicate"])
    assert info.value.code == 2
