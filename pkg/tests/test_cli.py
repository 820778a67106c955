"""test_cli.py

Subcommands, exit codes and the json error line.
"""
import json
import tempfile
from pathlib import Path

import pytest

from avgflow.__main__ import EXIT_ORACLE_FAILED, Application
from avgflow.cli import EXIT_ERROR, EXIT_OK
from avgflow.dataset import DatasetFile
from avgflow.pipeline import PipelineConfig


@pytest.fixture
def workdir():
    with tempfile.TemporaryDirectory() as tmp:
        yield Path(tmp)


@pytest.fixture
def app():
    return Application()


def test_subcommands_are_registered(app):
    assert {"gen-data", "gen-config", "oracle-check", "bench-target", "train", "reflow-pairs",
            "reflow", "distill", "sample", "eval", "plot-export", "pipeline"} <= set(app._argparse_subcmds)


def test_gen_data(app, workdir):
    path = workdir / "data.json"
    assert app.cmdline(["gen-data", "-n", "3", "--atoms", "5", "7", "--seed", "4", str(path)]) == EXIT_OK
    data = DatasetFile.load(path)
    assert len(data) == 3
    assert all(5 <= m.n_atoms <= 7 for m in data)


def test_gen_config(app, workdir):
    path = workdir / "avgflow.json"
    assert app.cmdline(["gen-config", "--seed", "7", str(path)]) == EXIT_OK
    assert PipelineConfig.from_json(path).seed == 7


def test_missing_stage_reports_json(app, workdir, capsys):
    code = app.cmdline(["sample", str(workdir / "run")])
    assert code == EXIT_ERROR
    line = capsys.readouterr().err.strip().splitlines()[-1]
    payload = json.loads(line)
    assert payload["command"] == "sample"
    assert payload["error"] == "PipelineError"
    assert "data" in payload["message"]


def test_infeasible_dataset_request(app, workdir, capsys):
    code = app.cmdline(["gen-data", "--atoms", "9", "5", str(workdir / "data.json")])
    assert code == EXIT_ERROR
    assert json.loads(capsys.readouterr().err.strip().splitlines()[-1])["error"] == "DatasetError"


def test_oracle_check_exit_codes(app, workdir, capsys):
    out = workdir / "oracle.json"
    args = ["oracle-check", "--instances", "2", "--samples", "20000", "--sigmas", "4.5", "--out", str(out)]
    assert app.cmdline(args) == EXIT_OK
    data = json.loads(out.read_text())
    assert data["passed"] and data["quadrature"] == "gauss"
    assert app.cmdline(args + ["--tamper"]) == EXIT_ORACLE_FAILED
    assert "FAIL" in capsys.readouterr().out


def test_oracle_check_quadrature_options(app, workdir, capsys):
    out = workdir / "oracle.json"
    args = ["oracle-check", "-i", "1", "--samples", "2000", "--quadrature", "trapezoid", "--out", str(out)]
    app.cmdline(args)
    assert json.loads(out.read_text())["quadrature"] == "trapezoid"
    assert app.cmdline(["oracle-check", "-i", "1", "--quad-nodes", "1"]) == EXIT_ERROR
    assert json.loads(capsys.readouterr().err.strip().splitlines()[-1])["error"] == "DomainError"


def test_bench_target(app, workdir, capsys):
    out = workdir / "bench.csv"
    code = app.cmdline(["bench-target", "--batch-sizes", "1", "2", "--conformers", "1", "--nodes", "4", "--out", str(out)])
    assert code == EXIT_OK
    assert len(out.read_text().splitlines()) == 3


def test_train_with_overrides(app, workdir):
    data = workdir / "data.json"
    app.cmdline(["gen-data", "-n", "3", "--atoms", "5", "6", "--conformers", "1", "2", str(data)])
    config = PipelineConfig.from_dict({
        "model": {"hidden_width": 8, "n_layers": 1, "time_embed_width": 4},
        "train": {"batch_size": 2, "samples_per_molecule": 2, "warmup_steps": 1},
        "workers": 1,
    })
    config.to_json(workdir / "config.json")
    run = workdir / "run"
    code = app.cmdline(["train", "-c", str(workdir / "config.json"), "--epochs", "1", "--dataset", str(data), str(run)])
    assert code == EXIT_OK
    assert (run / "stage1.pt").exists()
    stored = PipelineConfig.from_json(run / "config.json")
    assert stored.train.epochs == 1 and stored.dataset == str(data)
