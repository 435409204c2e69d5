"""End-to-end tests of the command line interface and its file outputs."""

import csv
import json

import pytest

from fosmpc.cli import main

TWO_AGENT_SCENARIO = {
    "agents": [
        {"id": 0, "p0": [0.0, 0.0], "p_ref": [1.0, 0.0]},
        {"id": 1, "p0": [20.0, 0.0], "p_ref": [19.0, 0.0]},
    ],
    "max_steps": 80,
}


@pytest.fixture
def scenario_file(tmp_path):
    path = tmp_path / "two_agents.json"
    path.write_text(json.dumps(TWO_AGENT_SCENARIO), encoding="utf-8")
    return str(path)


def test_run_writes_outputs(scenario_file, tmp_path):
    out = tmp_path / "out"
    rc = main(["run", "--scenario", scenario_file, "--out", str(out)])
    assert rc == 0
    with open(out / "steps.csv", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    assert rows and {"t", "agent_id", "px", "set_R", "Jc"} <= set(rows[0])
    assert {r["agent_id"] for r in rows} == {"0", "1"}
    summary = json.loads((out / "summary.json").read_text(encoding="utf-8"))
    assert summary["collision_free"] is True
    assert summary["disjointness_violations"] == 0
    assert summary["terminated_converged"] is True
    assert (out / "distances.csv").exists()
    assert (out / "normalized_cost.csv").exists()


def test_run_byte_identical_across_repeats_and_parallel(scenario_file, tmp_path):
    outs = []
    for i, parallel in enumerate((0, 0, 2)):
        out = tmp_path / f"out{i}"
        rc = main(["run", "--scenario", scenario_file, "--out", str(out),
                   "--parallel", str(parallel)])
        assert rc == 0
        outs.append((out / "steps.csv").read_bytes())
    assert outs[0] == outs[1]
    assert outs[0] == outs[2]


def test_run_strict_mode(scenario_file, tmp_path):
    rc = main(["run", "--scenario", scenario_file, "--out",
               str(tmp_path / "strict"), "--strict"])
    assert rc == 0


def test_run_rejects_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        main(["run", "--scenario", str(tmp_path / "nope.json"),
              "--out", str(tmp_path / "o")])


def test_run_rejects_invalid_json(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json", encoding="utf-8")
    rc = main(["run", "--scenario", str(bad), "--out", str(tmp_path / "o")])
    assert rc == 2


def test_run_rejects_overlapping_starts(tmp_path):
    cfg = {"agents": [
        {"id": 0, "p0": [0.0, 0.0], "p_ref": [1.0, 0.0]},
        {"id": 1, "p0": [0.3, 0.0], "p_ref": [2.0, 0.0]}]}
    path = tmp_path / "overlap.json"
    path.write_text(json.dumps(cfg), encoding="utf-8")
    rc = main(["run", "--scenario", str(path), "--out", str(tmp_path / "o")])
    assert rc == 2


def test_ablate_rejects_unknown_mechanism(tmp_path):
    with pytest.raises(SystemExit):
        main(["ablate", "--which", "nonsense", "--out", str(tmp_path / "o")])


def test_oracle_small_audit(tmp_path):
    out = tmp_path / "oracle"
    rc = main(["oracle", "--out", str(out), "--instances", "15", "--seed", "1"])
    assert rc == 0
    data = json.loads((out / "oracle.json").read_text(encoding="utf-8"))
    assert data["summary"]["instances"] == 15
    assert data["summary"]["mismatches"] == 0
    assert len(data["rows"]) == 15
