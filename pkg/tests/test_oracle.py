"""test_oracle.py

Closed-form versus Monte-Carlo checks and the target timing grid.
"""
import csv
import json
import math
import tempfile
from pathlib import Path

import pytest

from avgflow.dataset import gen_synthetic_dataset
from avgflow.errors import DomainError
from avgflow.config import ORACLE_SIGMAS
from avgflow.oracle import MAX_ORACLE_ATOMS, OracleCheck, TargetBenchmark, instance_scale
from avgflow.so3 import DEFAULT_QUADRATURE, Quadrature


@pytest.fixture
def workdir():
    with tempfile.TemporaryDirectory() as tmp:
        yield Path(tmp)


def test_instance_scale():
    assert instance_scale(0.5, False) == pytest.approx(0.5)
    assert instance_scale(0.2, False) == pytest.approx(math.sqrt(1.6))
    assert instance_scale(0.8, True) == pytest.approx(0.5 * math.sqrt(0.025))


def test_instances_cycle_times_and_metrics():
    check = OracleCheck(instances=6, samples=1000)
    assert [inst.query.t for inst in check.instances] == [0.2, 0.5, 0.8, 0.2, 0.5, 0.8]
    assert [inst.metric.kind for inst in check.instances] == ["euclidean", "harmonic"] * 3
    assert all(inst.ensemble.n_atoms <= MAX_ORACLE_ATOMS for inst in check.instances)


def test_instances_use_small_molecules():
    molecules = gen_synthetic_dataset(4, atoms_range=(4, 12), conformers_range=(1, 2), seed=1)
    small = {m.id for m in molecules if m.n_atoms <= MAX_ORACLE_ATOMS}
    check = OracleCheck(molecules, instances=5, samples=1000)
    if small:
        assert {inst.mol_id for inst in check.instances} <= small


def test_oracle_defaults():
    check = OracleCheck(instances=1, samples=1000)
    assert check.sigmas == ORACLE_SIGMAS == 3.0
    assert check.quadrature == Quadrature.accurate()
    assert TargetBenchmark().quadrature == DEFAULT_QUADRATURE


def test_oracle_suite_small():
    report = OracleCheck(instances=4, samples=50_000, seed=0, sigmas=4.5).process()
    assert report.passed
    assert report.quadrature == "gauss"
    assert all(r.components == 3 * r.n_atoms for r in report.instances)
    assert len(report.instances) == 4
    assert report.summary().splitlines()[-1].startswith("PASS")


def test_tampered_target_fails():
    report = OracleCheck(instances=3, samples=20_000, seed=0, tamper=True).process()
    assert not report.passed
    assert report.max_z > 10
    assert report.summary().splitlines()[-1].startswith("FAIL")


def test_workers_give_the_same_report():
    a = OracleCheck(instances=3, samples=5000, seed=2).process()
    b = OracleCheck(instances=3, samples=5000, seed=2, workers=3).process()
    assert a.to_dict() == b.to_dict()


def test_report_json(workdir):
    report = OracleCheck(instances=2, samples=5000).process()
    report.to_json(workdir / "oracle.json")
    with open(workdir / "oracle.json") as f:
        data = json.load(f)
    assert data["passed"] == report.passed
    assert len(data["instances"]) == 2


def test_check_validation():
    with pytest.raises(DomainError):
        OracleCheck(instances=0)
    with pytest.raises(DomainError):
        OracleCheck(instances=1, sigmas=0.0)


@pytest.mark.slow
def test_oracle_suite():
    report = OracleCheck(instances=20, samples=200_000, seed=0).process()
    assert report.sigmas == 3.0
    # an exact closed form leaves 0.27% of components beyond 3 standard errors by chance
    assert report.exceedance_rate <= 0.01
    assert report.max_z < 4.5
    tampered = OracleCheck(instances=20, samples=200_000, seed=0, tamper=True).process()
    assert not tampered.passed
    assert tampered.max_z > 10


def test_benchmark_grid(workdir):
    bench = TargetBenchmark(batch_sizes=[1, 4], conformer_counts=[1, 2], nodes=5)
    cells = bench.process()
    assert [(c.batch, c.conformers) for c in cells] == [(1, 1), (1, 2), (4, 1), (4, 2)]
    assert all(c.seconds >= 0 for c in cells)
    lines = bench.table().splitlines()
    assert len(lines) == 3
    bench.to_csv(workdir / "bench.csv")
    with open(workdir / "bench.csv") as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["batch", "conformers", "nodes", "ms"]
    assert len(rows) == 5


def test_benchmark_validation():
    with pytest.raises(DomainError):
        TargetBenchmark(batch_sizes=[0])
    with pytest.raises(DomainError):
        TargetBenchmark(nodes=0)
    with pytest.raises(DomainError):
        TargetBenchmark(batch_sizes=[1], conformer_counts=[1]).cell(1, 1)


@pytest.mark.slow
def test_benchmark_scales_with_conformers():
    bench = TargetBenchmark(batch_sizes=[1000], conformer_counts=[100, 1000], nodes=50, repeats=3)
    bench.process()
    ratio = bench.cell(1000, 1000).seconds / bench.cell(1000, 100).seconds
    assert 5 <= ratio <= 20
