import json

import pytest

from laspec.cli import main
from laspec.estimator import EstimatorModel
from laspec.spectral import load_line_db

TINY = {
    "n_cases": 2,
    "dataset": {"K": 40, "t": [600.0, 2000.0], "c": [0.05, 0.07], "seed": 0, "line_db": "canonical"},
    "estimator": {"checkpoint": "est/model", "train": {"epochs": 2, "batch_size": 16}},
    "correction": {"hidden": [8, 16, 8], "T": 3},
    "thresholds": [0.1],
}


@pytest.fixture
def workdir(tmp_path):
    (tmp_path / "ood.json").write_text(json.dumps({"kind": "ood_test", **TINY}))
    assert main(["train-estimator", "--config", str(tmp_path / "ood.json")]) == 0
    return tmp_path


def test_missing_config_names_path(tmp_path, capsys):
    missing = tmp_path / "absent.json"
    assert main(["run", "--config", str(missing)]) == 1
    assert str(missing) in capsys.readouterr().err


@pytest.mark.parametrize("argv", [["--bogus"], ["run", "--bogus"], ["frobnicate"], []])
def test_usage_errors(argv, capsys):
    assert main(argv) == 1
    assert "usage" in capsys.readouterr().err


def test_runtime_failure_exit_code(tmp_path):
    # a well-formed config whose checkpoint is missing and whose dataset cannot be built
    cfg = {"kind": "ood_test", **TINY, "dataset": {**TINY["dataset"], "K": 3}}
    cfg["estimator"] = {"checkpoint": "nowhere/model"}
    (tmp_path / "c.json").write_text(json.dumps(cfg))
    assert main(["run", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path / "o")]) == 2


def test_gen_lines(tmp_path):
    assert main(["gen-lines", "--seed", "43", "--band", "2175", "2195", "--out", str(tmp_path)]) == 0
    db = load_line_db(tmp_path / "line_db.json")
    assert db.band == (2175.0, 2195.0) and len(db.lines) == 25


def test_gen_data(workdir):
    out = workdir / "data"
    assert main(["gen-data", "--config", str(workdir / "ood.json"), "--out", str(out)]) == 0
    lines = (out / "dataset.csv").read_text().splitlines()
    assert len(lines) == 41


def test_train_and_eval_estimator(workdir):
    assert EstimatorModel.load(workdir / "est" / "model").meta["grid_points"] == 200
    out = workdir / "ev"
    assert main(["eval-estimator", "--config", str(workdir / "ood.json"), "--out", str(out)]) == 0
    ev = json.loads((out / "estimator_eval.json").read_text())
    assert set(ev["metrics"]) == {"temperature", "concentration"}


def test_run_twice_identical_then_report(workdir):
    cfg = str(workdir / "ood.json")
    for name in ("r1", "r2"):
        assert main(["run", "--config", cfg, "--seed", "7", "--out", str(workdir / name)]) == 0
    a, b = workdir / "r1", workdir / "r2"
    assert (a / "cases_eps0.1.csv").read_bytes() == (b / "cases_eps0.1.csv").read_bytes()
    assert (a / "summary.json").read_bytes() == (b / "summary.json").read_bytes()
    # flags before the subcommand are honoured too
    assert main(["--seed", "7", "--threads", "2", "run", "--config", cfg, "--out", str(workdir / "r3")]) == 0
    assert (a / "cases_eps0.1.csv").read_bytes() == (workdir / "r3" / "cases_eps0.1.csv").read_bytes()

    assert main(["report", "--out", str(a)]) == 0
    rep = json.loads((a / "report.json").read_text())
    assert rep["cases_eps0.1.csv"]["n_cases"] == 2


def test_ablate(workdir, capsys):
    cfg = json.loads((workdir / "ood.json").read_text())
    cfg["ablation"] = {"arms": [{"name": "default"}, {"name": "no_diversity", "diversity_enabled": False}],
                       "epsilon": 0.1}
    (workdir / "abl.json").write_text(json.dumps(cfg))
    assert main(["ablate", "--config", str(workdir / "abl.json"), "--out", str(workdir / "abl")]) == 0
    rows = [json.loads(line) for line in capsys.readouterr().out.splitlines() if line.startswith("{")]
    assert [r["arm"] for r in rows] == ["default", "no_diversity"]


def test_report_missing_dir(tmp_path):
    assert main(["report", "--out", str(tmp_path / "nope")]) == 1
