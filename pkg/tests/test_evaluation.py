"""test_evaluation.py

Aligned RMSD and coverage / AMR precision and recall.
"""
import json
import tempfile
from pathlib import Path

import pytest
import torch
from scipy.spatial.transform import Rotation

from avgflow.errors import DomainError
from avgflow.evaluation import (
    MetricReport,
    aggregate_reports,
    coverage_amr,
    format_table,
    rmsd_kabsch,
    rmsd_matrix,
)
from avgflow.interpolants import sample_prior

DTYPE = torch.float64


def rotation(seed: int) -> torch.Tensor:
    return torch.as_tensor(Rotation.random(random_state=seed).as_matrix(), dtype=DTYPE)


@pytest.fixture
def conformers():
    gen = torch.Generator().manual_seed(5)
    return [sample_prior(8, generator=gen) for _ in range(4)]


def test_rmsd_of_rotated_copy(conformers):
    A = conformers[0]
    assert rmsd_kabsch(A, A @ rotation(1).T) < 1e-8


def test_rmsd_ignores_translation(conformers):
    A = conformers[0]
    assert rmsd_kabsch(A, A + torch.tensor([3.0, -2.0, 1.0], dtype=DTYPE)) < 1e-8


def test_rmsd_beats_a_rotation_grid(conformers):
    A, B = conformers[0], conformers[1]
    grid = torch.as_tensor(Rotation.random(100_000, random_state=2).as_matrix(), dtype=DTYPE)
    brute = torch.sqrt(((A - B @ grid.transpose(-1, -2)) ** 2).sum(-1).mean(-1)).min()
    assert rmsd_kabsch(A, B) <= float(brute) + 1e-12


def test_rmsd_rejects_atom_mismatch(conformers):
    with pytest.raises(DomainError):
        rmsd_kabsch(conformers[0], conformers[0][:5])


def test_rmsd_matrix_shape(conformers):
    assert rmsd_matrix(torch.stack(conformers[:3]), torch.stack(conformers)).shape == (3, 4)


def test_coverage_of_identical_sets(conformers):
    report = coverage_amr(conformers, conformers, delta=0.5)
    assert report.cov_p == report.cov_r == 100.0
    assert report.amr_p < 1e-8 and report.amr_r < 1e-8
    assert (report.K, report.L) == (4, 4)


def test_coverage_with_one_far_conformer(conformers):
    C, far = conformers[0], conformers[1]
    d = rmsd_kabsch(far, C)
    report = coverage_amr([C, far], [C], delta=d / 2)
    assert report.cov_p == pytest.approx(50.0)
    assert report.amr_p == pytest.approx(d / 2, abs=1e-8)
    assert report.cov_r == pytest.approx(100.0)
    assert report.amr_r < 1e-8


def test_zero_threshold_counts_exact_matches(conformers):
    report = coverage_amr(conformers[:2], conformers[1:3], delta=0.0)
    assert report.cov_p == pytest.approx(50.0)
    assert report.cov_r == pytest.approx(50.0)


def test_coverage_is_invariant_under_rigid_motions(conformers):
    moved = [c @ rotation(10 + i).T + float(i) for i, c in enumerate(conformers[:2])]
    a = coverage_amr(conformers[:2], conformers[2:], delta=2.0)
    b = coverage_amr(moved, conformers[2:], delta=2.0)
    assert a.cov_p == b.cov_p and a.cov_r == b.cov_r
    assert a.amr_p == pytest.approx(b.amr_p, abs=1e-8)
    assert a.amr_r == pytest.approx(b.amr_r, abs=1e-8)


def test_more_truth_never_hurts_precision(conformers):
    generated = conformers[:2]
    smaller = coverage_amr(generated, conformers[2:3], delta=1.5)
    larger = coverage_amr(generated, conformers[2:], delta=1.5)
    assert larger.amr_p <= smaller.amr_p + 1e-12
    assert larger.cov_p >= smaller.cov_p


def test_coverage_rejects_empty_lists(conformers):
    with pytest.raises(DomainError):
        coverage_amr([], conformers)
    with pytest.raises(DomainError):
        coverage_amr(conformers, [], delta=0.5)


def test_aggregate_and_table():
    a = MetricReport(100.0, 50.0, 0.2, 0.4, 0.75, 2, 4)
    b = MetricReport(50.0, 50.0, 0.4, 0.6, 0.75, 1, 2)
    total = aggregate_reports([a, b])
    assert total.cov_r == pytest.approx(75.0)
    assert total.amr_p == pytest.approx(0.5)
    assert (total.K, total.L) == (3, 6)
    table = format_table({"stage1@2": a, "reflow@2": b})
    assert len(table.splitlines()) == 3
    assert "COV-R" in table.splitlines()[0]


def test_report_json():
    report = MetricReport(100.0, 50.0, 0.2, 0.4, 0.75, 2, 4)
    with tempfile.TemporaryDirectory() as tmpdir:
        path = Path(tmpdir) / "report.json"
        report.to_json(path)
        with open(path) as f:
            assert MetricReport.from_dict(json.load(f)) == report
