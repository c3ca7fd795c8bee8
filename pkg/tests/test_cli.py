import csv
import json

import pytest

from vmshield import scenario
from vmshield.cli import ARTIFACTS, RunRequest, UsageError, grid_points, main, parse_grid


def _short(tmp_path, name="co-residency", **over):
    """A shipped preset trimmed to a quick run, saved as a scenario file."""
    cfg = scenario.with_overrides(scenario.preset(name), {"duration": 70, **over})
    path = tmp_path / f"{name}.json"
    path.write_text(cfg.to_json())
    return path


def test_run_writes_all_artifacts(tmp_path):
    out = tmp_path / "out"
    assert main(["run", "--scenario", str(_short(tmp_path)), "--seed", "7", "-o", str(out),
                 "-q"]) == 0
    assert sorted(p.name for p in out.iterdir()) == sorted(ARTIFACTS)
    assert json.loads((out / "metrics.json").read_text())["seed"] == 7


def test_preset_equals_shipped_file(tmp_path):
    shipped = tmp_path / "shipped.json"
    shipped.write_text(scenario.preset_text("grouped-cascade"))
    a, b = tmp_path / "a", tmp_path / "b"
    main(["run", "--preset", "grouped-cascade", "--duration", "70", "-o", str(a), "-q"])
    main(["run", "--scenario", str(shipped), "--duration", "70", "-o", str(b), "-q"])
    for name in ARTIFACTS:
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_env_var_sets_default_output(tmp_path, monkeypatch):
    monkeypatch.setenv("VMSHIELD_OUT", str(tmp_path / "env"))
    assert main(["run", "--scenario", str(_short(tmp_path)), "-q"]) == 0
    assert (tmp_path / "env" / "ticks.csv").exists()


def test_preset_and_scenario_are_exclusive(tmp_path, capsys):
    assert main(["run", "--preset", "co-residency", "--scenario", "f.json"]) == 2
    assert "mutually exclusive" in capsys.readouterr().err
    with pytest.raises(UsageError):
        RunRequest(scenario_path="x", preset="co-residency")


def test_missing_source_is_invalid():
    assert main(["run", "-o", "nowhere"]) == 2


def test_malformed_json_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"seed": 1,\n')
    assert main(["run", "--scenario", str(bad)]) == 2
    assert "line" in capsys.readouterr().err


def test_bad_flag_value_exit_2():
    assert main(["run", "--preset", "co-residency", "--seed", "-1"]) == 2
    assert main(["run", "--preset", "co-residency", "--attack", "ddos"]) == 2


def test_unwritable_output_exit_3(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert main(["run", "--scenario", str(_short(tmp_path)), "-o", str(blocker / "x"),
                 "-q"]) == 3


def test_validate_round_trip(tmp_path):
    path = tmp_path / "dump.json"
    path.write_text(scenario.preset("multi-hijack").to_json())
    assert main(["validate", str(path), "-q"]) == 0


def test_validate_names_dwell_constraint(tmp_path, capsys):
    path = _write(tmp_path, {"breach_dwell_time": 0})
    assert main(["validate", str(path)]) == 2
    assert "breach_dwell_time ≥ 1" in capsys.readouterr().err


def test_validate_negative_capacity(tmp_path):
    data = scenario.ScenarioConfig().to_dict()
    data["servers"][0]["capacity"][0] = -1
    assert main(["validate", str(_write(tmp_path, data))]) == 2


def _write(tmp_path, data):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(data))
    return path


def test_grid_parsing():
    grid = parse_grid(["audit_interval=1,2,4", "D=3,5"])
    assert grid == {"audit_interval": [1, 2, 4], "breach_dwell_time": [3, 5]}
    assert len(grid_points(grid)) == 6
    assert grid_points({}) == []
    with pytest.raises(UsageError):
        parse_grid(["audit_interval"])
    with pytest.raises(UsageError):
        parse_grid(["audit_interval=fast"])


def test_sweep_rows_in_grid_order(tmp_path):
    out = tmp_path / "sw"
    rc = main(["sweep", "--scenario", str(_short(tmp_path)), "--grid", "audit_interval=1,2,4",
               "--grid", "D=3,5", "-o", str(out), "-q"])
    assert rc == 0
    rows = list(csv.DictReader(open(out / "sweep.csv")))
    assert [(r["audit_interval"], r["breach_dwell_time"]) for r in rows] == [
        ("1", "3"), ("1", "5"), ("2", "3"), ("2", "5"), ("4", "3"), ("4", "5")]
    assert all(r["status"] == "ok" for r in rows)
    assert len([p for p in out.iterdir() if p.is_dir()]) == 6


def test_empty_grid_exit_2(tmp_path):
    assert main(["sweep", "--scenario", str(_short(tmp_path)), "-o", str(tmp_path / "s")]) == 2


def test_failing_point_recorded(tmp_path, capsys):
    out = tmp_path / "sw"
    rc = main(["sweep", "--scenario", str(_short(tmp_path)), "--grid", "audit_interval=0,1",
               "-o", str(out), "-q"])
    assert rc == 0
    rows = list(csv.DictReader(open(out / "sweep.csv")))
    assert [r["status"] for r in rows] == ["failed", "ok"]
    assert "1 of 2 sweep points failed" in capsys.readouterr().err
