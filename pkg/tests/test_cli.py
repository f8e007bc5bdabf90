import json
from pathlib import Path

import pytest

from dynkin.cli import run

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def write(tmp_path, obj, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(obj))
    return str(p)


def report(out):
    return json.loads((Path(out) / "report.json").read_text())


def test_one_step_game(tmp_path):
    assert run(["game", "--config", str(CONFIGS / "one_step_game.json"), "--out", str(tmp_path)]) == 0
    rep = report(tmp_path)
    assert rep["value"] == pytest.approx(0.3)
    assert rep["value_exists"] and rep["saddle"]["verified"]
    assert (tmp_path / "solution.csv").exists()


def test_malformed_json_exits_1(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    assert run(["drbsde", "--config", str(p), "--out", str(tmp_path)]) == 1
    assert "malformed JSON" in capsys.readouterr().err


def test_false_certificate_exits_1(tmp_path, capsys):
    pair = {
        "model": {"T": 1.0, "N": 1},
        "g1": {"form": "zero"},
        "g2": {"form": "zero"},
        "obstacles1": {"xi": [0.0, 0.0, 0.0], "zeta": [1.0, 0.0, 0.0]},
        "obstacles2": {"xi": [0.5, 0.0, 0.0], "zeta": [1.0, 0.0, 0.0]},
    }
    cfg = write(tmp_path, {"pairs": [pair], "strict_instances": 0})
    assert run(["comparison-harness", "--config", cfg, "--out", str(tmp_path)]) == 1
    assert "OrderingCertificateFalse" in capsys.readouterr().err


def test_monotonicity_gate_and_force(tmp_path):
    cfg = json.loads((CONFIGS / "game_jump.json").read_text())
    cfg["driver"]["gamma"] = [-1.5]
    path = write(tmp_path, cfg)
    out = tmp_path / "gate"
    assert run(["game", "--config", path, "--out", str(out)]) == 2
    replay = json.loads((out / "replay.json").read_text())
    assert replay["sample"]["gamma"] == [-1.5]
    code = run(["game", "--config", path, "--out", str(tmp_path / "forced"), "--force"])
    assert code in (0, 2)
    assert (tmp_path / "forced" / "report.json").exists()


def test_unknown_catalog_exits_1(tmp_path):
    cfg = json.loads((CONFIGS / "drbsde_jump.json").read_text())
    cfg["driver"] = {"form": "catalog", "id": "mystery"}
    assert run(["drbsde", "--config", write(tmp_path, cfg), "--out", str(tmp_path)]) == 1


@pytest.mark.parametrize(
    "sub,name",
    [
        ("drbsde", "drbsde_jump.json"),
        ("game", "game_jump.json"),
        ("snell", "snell.json"),
        ("mixed-game", "mixed_game.json"),
    ],
)
def test_subcommands_are_deterministic(tmp_path, sub, name):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run([sub, "--config", str(CONFIGS / name), "--out", str(a)]) == 0
    assert run([sub, "--config", str(CONFIGS / name), "--out", str(b)]) == 0
    assert (a / "report.json").read_bytes() == (b / "report.json").read_bytes()
    assert (a / "solution.csv").read_bytes() == (b / "solution.csv").read_bytes()


def test_harnesses_with_seed(tmp_path):
    cfg = write(tmp_path, {"instances": 5, "strict_instances": 3, "N_max": 3, "m_max": 1})
    assert run(["comparison-harness", "--config", cfg, "--out", str(tmp_path / "c"), "--seed", "3"]) == 0
    lines = (tmp_path / "c" / "harness.jsonl").read_text().splitlines()
    assert len(lines) == 8
    cfg = write(tmp_path, {"instances": 5, "N_max": 3, "m_max": 1}, "e.json")
    assert run(["estimate-harness", "--config", cfg, "--out", str(tmp_path / "e"), "--seed", "3"]) == 0
    assert run(["estimate-harness", "--config", cfg, "--out", str(tmp_path / "f"), "--seed", "3"]) == 0
    assert (tmp_path / "e" / "harness.jsonl").read_bytes() == (tmp_path / "f" / "harness.jsonl").read_bytes()


def test_estimate_params_validated(tmp_path):
    cfg = write(tmp_path, {"instances": 1, "C": 1.0, "eta": 1.0, "beta": 2.0})
    assert run(["estimate-harness", "--config", cfg, "--out", str(tmp_path)]) == 1


def test_pide_and_crossvalidate(tmp_path):
    cfg = {
        "h1": -1.0,
        "h2": 1.0,
        "terminal": {"kind": "tanh"},
        "grid": {"M": 60},
        "lattice_N": 16,
        "x_points": [0.0, 0.5],
        "comparison_perturbation": 0.1,
    }
    path = write(tmp_path, cfg)
    assert run(["pide", "--config", path, "--out", str(tmp_path / "p")]) == 0
    assert report(tmp_path / "p")["comparison"]["ok"]
    assert run(["crossvalidate", "--config", path, "--out", str(tmp_path / "x")]) == 0
    assert report(tmp_path / "x")["coarse"]["max_gap"] < 5e-2


def test_property_violation_writes_replay(tmp_path):
    cfg = {"h1": -1.0, "h2": 1.0, "terminal": {"kind": "tanh"}, "grid": {"M": 20}, "lattice_N": 4,
           "x_points": [0.5], "tolerance": 1e-9}
    out = tmp_path / "v"
    assert run(["crossvalidate", "--config", write(tmp_path, cfg), "--out", str(out)]) == 2
    replay = json.loads((out / "replay.json").read_text())
    assert replay["kind"] == "crossvalidate" and replay["tolerance"] == 1e-9
