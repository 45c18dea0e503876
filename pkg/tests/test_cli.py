import csv
import json
from pathlib import Path

import pytest
import yaml

from rbsdelab import cli

CONFIGS = Path(__file__).resolve().parent.parent / "configs"

SMALL = {
    "azema": {"grid": {"steps": 2, "dt": 1.0}, "model": {"model_kind": "independent", "parameters": {"p": 0.5}}},
    "snell-transfer": {"grid": {"steps": 4}, "model": {"fixture": "adapted"}, "params": {"instances": 3}},
    "rbsde-solve": {"grid": {"steps": 4}, "model": {"fixture": "lookahead"},
                    "data": {"driver": {"kind": "random"}, "barrier": {"kind": "random", "prob": 0.6},
                             "terminal": {"kind": "random"}}},
    "transform-check": {"grid": {"steps": 4}, "model": {"fixture": "terminal"}, "params": {"instances": 4}},
    "picard": {"grid": {"steps": 4}, "model": {"fixture": "adapted"}, "params": {"instances": 2}},
    "estimate-audit": {"grid": {"steps": 4}, "model": {"fixture": "adapted"},
                       "params": {"theorem": "L5.1c", "instances": 5, "batches": 2}},
    "horizon-study": {"grid": {"steps": 6}, "model": {"fixture": "immersion"},
                      "data": {"driver": {"kind": "linear", "value": 1.0}}, "params": {"levels": [2, 4, 6]}},
    "oracle-check": {"grid": {"steps": 3}, "model": {"fixture": "lookahead"}, "params": {"instances": 3}},
}


def _write(tmp_path, name, **extra):
    cfg = {"seed": 4, "task": name, **SMALL[name], **extra}
    path = tmp_path / f"{name}.yaml"
    path.write_text(yaml.safe_dump(cfg))
    return path


@pytest.mark.parametrize("task", sorted(SMALL))
def test_every_task_runs(task, tmp_path):
    out = tmp_path / "out"
    assert cli.main(["run", str(_write(tmp_path, task)), "--out-dir", str(out)]) == cli.EXIT_OK
    report = json.loads((out / f"{task}.json").read_text())
    assert report["passed"] and report["task"] == task and report["failures"] == []
    with open(out / f"{task}.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert len(rows) > 1


def test_azema_csv_values(tmp_path):
    out = tmp_path / "out"
    cli.main(["run", str(_write(tmp_path, "azema")), "--out-dir", str(out)])
    with open(out / "azema.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert [float(r["G"]) for r in rows] == [1.0, 0.5, 0.5, 0.25, 0.25, 0.25, 0.25]
    assert [float(r["Gtilde"]) for r in rows[3:]] == [0.5] * 4
    assert [float(r["Etilde"]) for r in rows] == [1.0, 0.5, 0.5, 0.25, 0.25, 0.25, 0.25]
    assert [float(r["VF"]) for r in rows] == [0.0, 0.5, 0.5, 0.75, 0.75, 0.75, 0.75]
    assert {float(r["m"]) for r in rows} == {1.0} and {float(r["Ztilde"]) for r in rows} == {1.0}


def test_shipped_configs_validate(capsys):
    names = sorted(p.name for p in CONFIGS.glob("*.yaml"))
    assert len(names) == len(cli.TASKS)
    for path in CONFIGS.glob("*.yaml"):
        assert cli.main(["run", str(path), "--validate-only"]) == cli.EXIT_OK
    assert "config ok" in capsys.readouterr().out


def test_list_tasks(capsys):
    assert cli.main(["--list-tasks"]) == 0
    out = capsys.readouterr().out
    for name in cli.TASKS:
        assert name in out


def test_negative_dt_is_config_error_without_output(tmp_path):
    out = tmp_path / "out"
    path = _write(tmp_path, "azema", grid={"steps": 2, "dt": -1.0})
    assert cli.main(["run", str(path), "--out-dir", str(out)]) == cli.EXIT_CONFIG
    assert not out.exists()


@pytest.mark.parametrize("patch", [
    {"bogus": 1},
    {"task": "nope"},
    {"grid": {"steps": 0}},
    {"grid": {"steps": 3, "dt": 0.1, "horizon": 1.0}},
    {"seed": -1},
    {"model": {"fixture": "martian"}},
    {"model": {"model_kind": "independent", "parameters": {"p": 1.5}}},
    {"params": {"levels": [2, 1]}},
    {"params": {"theorem": "T9"}},
    {"data": {"driver": {"kind": "cubic"}}},
])
def test_config_errors(patch, tmp_path):
    path = _write(tmp_path, "azema", **patch)
    assert cli.main(["run", str(path), "--out-dir", str(tmp_path / "o")]) == cli.EXIT_CONFIG
    assert not (tmp_path / "o").exists()


def test_task_specific_config_errors(tmp_path):
    p1 = _write(tmp_path, "oracle-check", grid={"steps": 5})
    assert cli.main(["run", str(p1), "--validate-only"]) == cli.EXIT_CONFIG
    p2 = _write(tmp_path, "horizon-study", data={"driver": {"kind": "sin_plus_z"}})
    assert cli.main(["run", str(p2), "--validate-only"]) == cli.EXIT_CONFIG
    p3 = _write(tmp_path, "rbsde-solve", data={"driver": {"kind": "sin_plus_z", "c_y": 0.5, "lipschitz": 0.1}})
    assert cli.main(["run", str(p3), "--validate-only"]) == cli.EXIT_CONFIG
    assert cli.main(["run", str(tmp_path / "missing.yaml")]) == cli.EXIT_CONFIG
    bad = tmp_path / "bad.yaml"
    bad.write_text("task: [unclosed\n")
    assert cli.main(["run", str(bad)]) == cli.EXIT_CONFIG
    assert cli.main([]) == cli.EXIT_CONFIG


def test_task_failure_exit_code(tmp_path, capsys):
    # one Picard step cannot meet the tolerance
    path = _write(tmp_path, "rbsde-solve", data={"driver": {"kind": "sin_plus_z", "c_y": 0.5, "c_z": 0.5},
                                            "terminal": {"kind": "brownian"}},
                  params={"max_iter": 1, "tol": 1e-12})
    out = tmp_path / "out"
    assert cli.main(["run", str(path), "--out-dir", str(out)]) == cli.EXIT_TASK
    report = json.loads((out / "rbsde-solve.json").read_text())
    assert not report["passed"] and report["failures"][0]["check"] == "convergence"
    assert "convergence" in capsys.readouterr().err


def test_determinism_and_jobs(tmp_path):
    path = _write(tmp_path, "transform-check")
    a, b, c = tmp_path / "a", tmp_path / "b", tmp_path / "c"
    cli.main(["run", str(path), "--out-dir", str(a)])
    cli.main(["run", str(path), "--out-dir", str(b)])
    cli.main(["run", str(path), "--out-dir", str(c), "--jobs", "3"])
    ref = (a / "transform-check.json").read_bytes()
    assert ref == (b / "transform-check.json").read_bytes() == (c / "transform-check.json").read_bytes()
    assert (a / "transform-check.csv").read_bytes() == (c / "transform-check.csv").read_bytes()


def test_report_dir_precedence(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    path = _write(tmp_path, "azema", output={"dir": str(tmp_path / "cfgdir"), "prefix": "x_"})
    assert cli.main(["run", str(path)]) == 0
    assert (tmp_path / "cfgdir" / "x_azema.json").exists()
    monkeypatch.setenv(cli.ENV_REPORT_DIR, str(tmp_path / "envdir"))
    assert cli.main(["run", str(path)]) == 0
    assert (tmp_path / "envdir" / "x_azema.json").exists()
    assert cli.main(["run", str(path), "--out-dir", str(tmp_path / "flag")]) == 0
    assert (tmp_path / "flag" / "x_azema.json").exists()


def test_csv_float_format(tmp_path):
    out = tmp_path / "out"
    cli.main(["run", str(_write(tmp_path, "transform-check")), "--out-dir", str(out)])
    with open(out / "transform-check.csv", newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    for r in rows:
        assert r[1] == f"{float(r[1]):.17g}"


def test_nonfinite_values_in_json():
    assert cli._jsonable({"a": float("inf"), "b": [float("nan"), 1.5]}) == {"a": "inf", "b": ["nan", 1.5]}
