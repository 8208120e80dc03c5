from __future__ import annotations

import io
import json
import subprocess
import sys

import pytest

from heavytouch.bench import read_trace
from heavytouch.cli import main


def run(*argv):
    out = io.StringIO()
    code = main(list(argv), out=out)
    return code, out.getvalue()


def test_formulas_prints_recommended_k():
    code, text = run("formulas", "--m", "100", "--T", "1e6", "--delta", "0.1")
    assert code == 0
    assert "k=81" in text.splitlines()


def test_formulas_schedule():
    code, text = run("formulas", "--m", "50", "--T", "100", "--tau", "10", "--d", "4")
    assert code == 0
    lines = text.splitlines()
    assert "T1=5000" in lines and "T2=1000" in lines
    assert any(line.startswith("gamma_ordering=") for line in lines)


def test_project_from_file(tmp_path):
    src = tmp_path / "w.txt"
    src.write_text("3 1 2\n")
    code, text = run("project", str(src))
    assert code == 0
    assert text.split() == ["2", "2", "2"]
    dest = tmp_path / "o.txt"
    assert run("project", str(src), "--out", str(dest))[0] == 0
    assert dest.read_text().split() == ["2", "2", "2"]


def test_project_from_stdin():
    proc = subprocess.run(
        [sys.executable, "-m", "heavytouch", "project", "-"],
        input="1 0\n",
        capture_output=True,
        text=True,
        check=False,
    )
    assert proc.returncode == 0
    assert proc.stdout.split() == ["0.5", "0.5"]


def test_exit_codes(tmp_path):
    assert run("solve", "--help")[0] == 0
    assert run("solve", "--solver", "nope")[0] == 1
    assert run("solve", "--T", "0")[0] == 1
    assert run("formulas", "--m", "0", "--T", "10")[0] == 1
    assert run("project", str(tmp_path / "missing.txt"))[0] == 2
    bad = tmp_path / "bad.txt"
    bad.write_text("1 x\n")
    assert run("project", str(bad))[0] == 2
    assert run("compare", "--solver", "full,nope")[0] == 1


def test_solve_writes_trace(tmp_path):
    dest = tmp_path / "trace.csv"
    code, text = run(
        "solve", "--solver", "practical", "--problem", "ordering", "--d", "5", "--n", "60",
        "--T", "200", "--trace-every", "20", "--out", str(dest),
    )
    assert code == 0
    assert "final_objective" in text
    assert len(read_trace(dest)) == 10


def test_compare_writes_files(tmp_path):
    out = tmp_path / "res"
    code, text = run(
        "compare", "--solver", "full,light", "--problem", "toy-linear", "--T", "100",
        "--reps", "2", "--k", "1", "--out", str(out),
    )
    assert code == 0
    assert len(list(out.iterdir())) == 5


def test_config_file_and_override(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"T": 50, "trace-every": 5, "problem": "toy-linear"}))
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert run("solve", "--config", str(cfg), "--out", str(a))[0] == 0
    assert read_trace(a)[-1]["iteration"] == 50
    assert run("solve", "--config", str(cfg), "--T", "80", "--out", str(b))[0] == 0
    assert read_trace(b)[-1]["iteration"] == 80
    cfg.write_text(json.dumps({"bogus": 1}))
    assert run("solve", "--config", str(cfg))[0] == 1


@pytest.mark.parametrize("env_seed", ["3", "17"])
def test_seed_from_environment(tmp_path, monkeypatch, env_seed):
    args = ["solve", "--solver", "light", "--k", "1", "--problem", "toy-quadratic", "--T", "100", "--trace-every", "10"]
    monkeypatch.setenv("HEAVYTOUCH_SEED", env_seed)
    run(*args, "--out", str(tmp_path / "env.csv"))
    run(*args, "--seed", env_seed, "--out", str(tmp_path / "flag.csv"))
    run(*args, "--seed", "999", "--out", str(tmp_path / "other.csv"))
    env = (tmp_path / "env.csv").read_bytes()
    assert env == (tmp_path / "flag.csv").read_bytes()
    assert env != (tmp_path / "other.csv").read_bytes()
    monkeypatch.setenv("HEAVYTOUCH_SEED", "abc")
    assert run(*args)[0] == 1
