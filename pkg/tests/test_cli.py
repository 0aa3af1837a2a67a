import json
from pathlib import Path

import pytest

from balayage.cli import EXIT_OK, EXIT_PRECONDITION, main, read_config
from balayage.errors import ParameterError

JENSEN = {
    "schema_version": 1,
    "experiment": "jensen",
    "name": "jensen_single",
    "kernel": {"dim": 3},
    "geometry": {"x": [0.2, 0, 0], "balls": [{"center": [0, 0, 0], "radius": 1.0}],
                 "omega": {"balls": [{"center": [0, 0, 0], "radius": 3.0}]}},
    "dictionary": {"potentials": [{"kind": "constant"}, {"kind": "newton", "point": [0, 2, 0]}]},
    "mc": {"samples": 3000, "seed": 4},
}

SHRINK = {
    "schema_version": 1,
    "experiment": "shrink",
    "kernel": {"dim": 3},
    "measure": {"points": [[0, 1, 0]]},
    "geometry": {"balls": [{"center": [-2, 0, 0], "radius": 0.2}, {"center": [2, 0, 0], "radius": 0.2}],
                 "partition": [0, 1]},
    "lambda": [0.5, 0.5],
    "delta": 0.5,
    "mc": {"samples": 3000, "seed": 1},
}


def write(tmp_path, cfg, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg, indent=1))
    return str(p)


def test_validate_ok(tmp_path, capsys):
    assert main(["validate", write(tmp_path, JENSEN)]) == EXIT_OK
    out = capsys.readouterr().out
    assert out.startswith("ok")
    body = json.loads(out.split("\n", 1)[1])
    assert body["checks"]["x_inside_A"] is True
    assert body["parameters"]["experiment"] == "jensen"


def test_validate_reports_delta_slack(tmp_path, capsys):
    assert main(["validate", write(tmp_path, SHRINK)]) == EXIT_OK
    checks = json.loads(capsys.readouterr().out.split("\n", 1)[1])["checks"]
    assert checks["delta_family"]["valid"] and len(checks["delta_family"]["slack"]) == 2
    assert checks["lambda_sum"] == 1.0


def test_simplex_violation_exits_2(tmp_path, capsys):
    cfg = dict(SHRINK, **{"lambda": [0.5, 0.6]})
    assert main(["run", write(tmp_path, cfg), "--out-dir", str(tmp_path)]) == EXIT_PRECONDITION
    assert "simplex" in capsys.readouterr().err


def test_overlap_exits_2(tmp_path, capsys):
    cfg = json.loads(json.dumps(SHRINK))
    cfg["geometry"]["balls"][1]["center"] = [-1.9, 0, 0]
    assert main(["validate", write(tmp_path, cfg)]) == EXIT_PRECONDITION
    assert "overlap" in capsys.readouterr().err


def test_schema_error_has_location(tmp_path, capsys):
    cfg = dict(JENSEN, kernel={"dim": 3, "alpha": 3.0})
    path = write(tmp_path, cfg)
    assert main(["validate", path]) == EXIT_PRECONDITION
    assert "alpha" in capsys.readouterr().err
    with pytest.raises(ParameterError):
        read_config(path)


def test_wrong_subcommand(tmp_path):
    assert main(["shrink", write(tmp_path, JENSEN), "--out-dir", str(tmp_path)]) == EXIT_PRECONDITION


def test_run_writes_outputs_and_is_reproducible(tmp_path):
    cfg = write(tmp_path, JENSEN)
    assert main(["jensen", cfg, "--out-dir", str(tmp_path / "a"), "--workers", "1"]) == EXIT_OK
    assert main(["run", cfg, "--out-dir", str(tmp_path / "b"), "--workers", "2"]) == EXIT_OK
    for ext in ("json", "csv", "txt"):
        assert (tmp_path / "a" / f"jensen_single.{ext}").exists()
    a = (tmp_path / "a" / "jensen_single.json").read_bytes()
    assert a == (tmp_path / "b" / "jensen_single.json").read_bytes()
    assert json.loads(a)["ok"]
    assert b"\r\n" not in (tmp_path / "a" / "jensen_single.csv").read_bytes()


def test_format_and_seed_override(tmp_path):
    cfg = write(tmp_path, JENSEN)
    main(["run", cfg, "--out-dir", str(tmp_path / "c"), "--format", "csv", "--seed", "9", "--samples", "500"])
    assert not (tmp_path / "c" / "jensen_single.json").exists()
    main(["run", cfg, "--out-dir", str(tmp_path / "d"), "--format", "json", "--seed", "9", "--samples", "500"])
    rep = json.loads((tmp_path / "d" / "jensen_single.json").read_text())
    assert rep["params"]["mc"]["seed"] == 9 and rep["params"]["mc"]["samples"] == 500


def test_shrink_run(tmp_path):
    assert main(["run", write(tmp_path, SHRINK), "--out-dir", str(tmp_path), "--format", "json"]) == EXIT_OK
    rep = json.loads((tmp_path / "shrink.json").read_text())
    assert rep["kind"] == "shrink"


@pytest.mark.parametrize("path", sorted((Path(__file__).parents[1] / "configs").glob("*.json")), ids=lambda p: p.stem)
def test_shipped_configs_validate(path, capsys):
    assert main(["validate", str(path)]) == EXIT_OK
    assert capsys.readouterr().out.startswith("ok")
