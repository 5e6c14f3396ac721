import json

import pytest
import yaml

from lanefusion.cli import main
from lanefusion.io import bundled_scenarios


@pytest.fixture
def scenario(tmp_path):
    p = tmp_path / "short.yaml"
    p.write_text(yaml.safe_dump({"name": "short", "duration": 2.0, "seed": 2}))
    return p


def run(argv, capsys):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_run_writes_report(tmp_path, scenario, capsys):
    out = tmp_path / "o"
    code, _, _ = run(["run", "--scenario", scenario, "--frames", 12, "--out", out], capsys)
    assert code == 0
    for name in ("deviations.csv", "summary.json", "runtime.json", "lanes.jsonl", "config.json"):
        assert (out / name).is_file(), name
    summary = json.loads((out / "summary.json").read_text())
    assert summary["scenario"] == "short" and summary["seed"] == 2
    assert len((out / "lanes.jsonl").read_text().splitlines()) == 12


def test_run_is_deterministic(tmp_path, scenario, capsys):
    for d in ("a", "b"):
        assert run(["run", "--scenario", scenario, "--frames", 15, "--out", tmp_path / d], capsys)[0] == 0
    for name in ("deviations.csv", "summary.json", "lanes.jsonl"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_overrides_reach_both_configs(tmp_path, scenario, capsys):
    out = tmp_path / "o"
    code, _, _ = run(["run", "--scenario", scenario, "--frames", 5, "--out", out,
                      "--set", "solver.max_iterations=2", "--set", "scenario.seed=9"], capsys)
    assert code == 0
    cfg = json.loads((out / "config.json").read_text())
    assert cfg["pipeline"]["solver.max_iterations"] == 2
    assert cfg["seed"] == 9


def test_output_dir_from_environment(tmp_path, scenario, capsys, monkeypatch):
    monkeypatch.setenv("LANEFUSION_OUT", str(tmp_path / "env"))
    assert run(["run", "--scenario", scenario, "--frames", 3], capsys)[0] == 0
    assert (tmp_path / "env" / "lanes.jsonl").is_file()


def test_missing_scenario_is_usage_error(tmp_path, capsys):
    missing = tmp_path / "absent.yaml"
    code, _, err = run(["run", "--scenario", missing, "--out", tmp_path], capsys)
    assert code == 2
    assert str(missing) in err


@pytest.mark.parametrize("override", ["solver.nope=1", "solver.max_iterations=abc", "scenario.lane_count=0",
                                      "fused_covariance=full"])
def test_bad_override_is_config_error(tmp_path, scenario, capsys, override):
    code, _, err = run(["run", "--scenario", scenario, "--out", tmp_path, "--set", override], capsys)
    assert code == 3
    assert "configuration error" in err


def test_malformed_set_is_usage_error(tmp_path, scenario, capsys):
    assert run(["run", "--scenario", scenario, "--out", tmp_path, "--set", "novalue"], capsys)[0] == 2


def test_unknown_command_is_usage_error(capsys):
    assert run(["fly"], capsys)[0] == 2


def test_replay_with_and_without_truth(tmp_path, scenario, capsys):
    rec = tmp_path / "rec"
    assert run(["run", "--scenario", scenario, "--frames", 10, "--log", "--out", rec], capsys)[0] == 0
    log = rec / "frames.jsonl"
    code, _, err = run(["replay", log, "--out", tmp_path / "r1"], capsys)
    assert code == 0 and "notice" not in err
    assert (tmp_path / "r1" / "lanes.jsonl").read_bytes() == (rec / "lanes.jsonl").read_bytes()
    assert (tmp_path / "r1" / "deviations.csv").read_bytes() == (rec / "deviations.csv").read_bytes()

    bare = tmp_path / "bare.jsonl"
    bare.write_bytes(log.read_bytes())
    code, _, err = run(["replay", bare, "--out", tmp_path / "r2"], capsys)
    assert code == 0
    assert "no ground truth" in err
    assert not (tmp_path / "r2" / "deviations.csv").exists()
    assert (tmp_path / "r2" / "lanes.jsonl").is_file()


def test_replay_missing_log_is_io_error(tmp_path, capsys):
    code, _, err = run(["replay", tmp_path / "none.jsonl", "--out", tmp_path], capsys)
    assert code == 4
    assert "none.jsonl" in err


def test_replay_schema_error(tmp_path, capsys):
    log = tmp_path / "broken.jsonl"
    log.write_text(json.dumps({"format": "lanefusion-frames", "version": 1, "scenario": "x"}) + "\n{oops\n")
    code, _, err = run(["replay", log, "--out", tmp_path / "o"], capsys)
    assert code == 5
    assert "record 1" in err


def test_dump_graph(scenario, capsys):
    code, out, _ = run(["dump-graph", "--scenario", scenario, "--frames", 5], capsys)
    assert code == 0
    assert out.startswith("# lanefusion graph")
    assert "EDGE" in out


@pytest.mark.parametrize("fmt, load", [("yaml", yaml.safe_load), ("json", json.loads)])
def test_print_config_defaults(capsys, fmt, load):
    code, out, _ = run(["print-config-defaults", "--format", fmt], capsys)
    assert code == 0
    doc = load(out)
    assert doc["pipeline"]["solver.max_iterations"] == 1
    assert doc["scenario"]["lane_count"] == 3


def test_list_scenarios(capsys):
    code, out, _ = run(["list-scenarios"], capsys)
    assert code == 0
    assert out.split() == bundled_scenarios()


def test_bundled_scenario_by_name(tmp_path, capsys):
    assert run(["run", "--scenario", "lane_change", "--frames", 3, "--out", tmp_path], capsys)[0] == 0
