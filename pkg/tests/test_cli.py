import json

import pytest

from jumplq.cli import main


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_examples_list(capsys):
    code, out, _ = run(capsys, "examples", "list")
    assert code == 0
    names = [e["name"] for e in json.loads(out)["examples"]]
    assert "example_9_2" in names and len(names) == 5


def test_examples_run(capsys):
    code, out, _ = run(capsys, "examples", "run", "example_9_1", "--strict")
    doc = json.loads(out)
    assert code == 0 and doc["all_passed"]
    assert {r["quantity"] for r in doc["manifest"]} >= {"P", "R_hat", "Theta"}


def test_riccati_csv_with_sidecar(tmp_path, capsys):
    target = tmp_path / "p.csv"
    code, _, _ = run(capsys, "riccati", "--builtin", "example_9_2", "--knots", "10", "--out", str(target))
    assert code == 0
    lines = target.read_text().splitlines()
    assert lines[0].startswith("t,P_11,P_12,P_21,P_22")
    assert len(lines) == 12
    meta = json.loads((tmp_path / "p.csv.meta.json").read_text())
    assert meta["knots"] == 10 and meta["min_eig_R_hat"] == pytest.approx(1.0)


def test_cost_json(capsys):
    code, out, _ = run(capsys, "cost", "--builtin", "example_9_2", "--xi", "1,1", "--law", "zero",
                       "--paths", "100")
    doc = json.loads(out)
    assert code == 0
    assert doc["mean"] == 4.0 and doc["stderr"] == 0.0
    assert doc["seed"] == 0 and doc["n_paths"] == 100
    assert "wall_time" in doc["timing"]


def test_reruns_are_identical_apart_from_timing(capsys):
    argv = ("cost", "--builtin", "example_9_1", "--law", "1", "--paths", "200", "--seed", "7",
            "--step", "0.01")
    first = json.loads(run(capsys, *argv)[1])
    second = json.loads(run(capsys, *argv)[1])
    first.pop("timing"), second.pop("timing")
    assert first == second


def test_simulate_csv(capsys):
    code, out, _ = run(capsys, "simulate", "--builtin", "counterexample_6_2", "--step", "0.1",
                       "--seed", "3", "--index", "2")
    assert code == 0
    assert out.splitlines()[0] == "t,X_1,u_1,is_jump,mark_id"


def test_strict_mode_fails_on_a_failed_check(capsys):
    argv = ("verify", "--builtin", "example_9_1", "--paths", "200", "--step", "0.01",
            "--knots", "100", "--delta", "100")
    code, out, _ = run(capsys, *argv)
    doc = json.loads(out)
    assert code == 0 and not doc["all_passed"]
    assert [c for c in doc["checks"] if c["name"] == "unifconvex_phi"][0]["passed"] is False
    assert run(capsys, *argv, "--strict")[0] == 1


def test_config_syntax_error_reports_position(tmp_path, capsys):
    cfg = tmp_path / "bad.json"
    cfg.write_text('{\n  "n": 1,\n  "m": 1\n  "T": 1.0\n}\n')
    code, _, err = run(capsys, "riccati", "--config", str(cfg))
    assert code == 2
    assert f"{cfg}:4:3" in err and "ConfigError" in err


def test_config_unknown_key(tmp_path, capsys):
    cfg = tmp_path / "p.json"
    cfg.write_text(json.dumps({"n": 1, "m": 1, "T": 1.0, "jump_measure": [{"id": "z", "intensity": 1}],
                               "coefficients": {"Z": [[1.0]]}}))
    code, _, err = run(capsys, "riccati", "--config", str(cfg))
    assert code == 2 and "'Z'" in err


def test_config_problem_runs(tmp_path, capsys):
    cfg = tmp_path / "p.json"
    cfg.write_text(json.dumps({"n": 1, "m": 1, "T": 1.0, "jump_measure": [{"id": "z", "intensity": 1}],
                               "coefficients": {"B": [[1.0]]}, "weights": {"G": [[1.0]]},
                               "xi": [2.0]}))
    code, out, _ = run(capsys, "cost", "--config", str(cfg), "--law", "zero", "--paths", "10",
                       "--step", "0.1")
    assert code == 0 and json.loads(out)["mean"] == 4.0


def test_problem_source_is_required(capsys):
    code, _, err = run(capsys, "riccati")
    assert code == 2 and "--builtin" in err


def test_convexity_on_negative_control_weight(tmp_path, capsys):
    cfg = tmp_path / "neg.json"
    cfg.write_text(json.dumps({"n": 1, "m": 1, "T": 1.0, "jump_measure": [{"id": "z", "intensity": 1}],
                               "weights": {"R": [[-1.0]]}}))
    code, out, _ = run(capsys, "convexity", "--config", str(cfg), "--intervals", "2", "--paths", "4",
                       "--step", "0.1")
    doc = json.loads(out)
    assert code == 0
    assert doc["eps_hat"] == pytest.approx(-1.0)
