"""evaluation: Kabsch-aligned RMSD and coverage / AMR precision and recall."""
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Sequence, Union

import torch
from torch import Tensor

from .config import DELTA_DRUGS, DTYPE
from .errors import DomainError
from .interpolants import kabsch_rotation
from .target import center

log = logging.getLogger(__name__)

EXACT_TOL = 1e-9


def aligned_rmsd(A, B) -> Tensor:
    """batched RMSD after centering both sets and rotating B onto A"""
    A = center(A)
    B = center(B)
    if A.shape[-2:] != B.shape[-2:]:
        raise DomainError(f"atom count mismatch {tuple(A.shape)} vs {tuple(B.shape)}")
    A, B = torch.broadcast_tensors(A, B)
    R = kabsch_rotation(A, B, strict=False)
    resid = A - B @ R.transpose(-1, -2)
    return torch.sqrt((resid**2).sum(-1).mean(-1))


def rmsd_kabsch(A, B) -> float:
    """RMSD between two conformers after optimal proper-rotation alignment"""
    return float(aligned_rmsd(A, B))


def rmsd_matrix(generated, truth) -> Tensor:
    """(L_generated, K_truth) aligned RMSD of every generated/truth pair"""
    generated = torch.as_tensor(generated, dtype=DTYPE)
    truth = torch.as_tensor(truth, dtype=DTYPE)
    return aligned_rmsd(generated[:, None], truth[None, :])


@dataclass
class MetricReport:
    cov_r: float
    cov_p: float
    amr_r: float
    amr_p: float
    delta: float
    K: int
    L: int

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def to_json(self, path: Union[str, Path]):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "MetricReport":
        return cls(**data)

    def row(self, label: str = "") -> str:
        return (
            f"{label:<12} {self.cov_r:>8.2f} {self.amr_r:>8.4f} "
            f"{self.cov_p:>8.2f} {self.amr_p:>8.4f} {self.delta:>6.2f} {self.K:>6d} {self.L:>6d}"
        )


TABLE_HEADER = (
    f"{'':<12} {'COV-R':>8} {'AMR-R':>8} {'COV-P':>8} {'AMR-P':>8} {'delta':>6} {'K':>6} {'L':>6}"
)


def format_table(reports: dict[str, MetricReport]) -> str:
    """fixed-width text table, one row per labelled report"""
    lines = [TABLE_HEADER]
    lines.extend(report.row(str(label)) for label, report in reports.items())
    return "\n".join(lines)


def _covered(mins: Tensor, delta: float) -> Tensor:
    return (mins < delta) | (mins <= EXACT_TOL)


def coverage_amr(generated: Sequence, truth: Sequence, delta: float = DELTA_DRUGS) -> MetricReport:
    """coverage and average minimum RMSD; precision scans generated, recall scans truth"""
    if len(generated) == 0 or len(truth) == 0:
        raise DomainError("both conformer lists must be nonempty")
    if delta < 0:
        raise DomainError("delta must be nonnegative")
    generated = torch.stack([torch.as_tensor(g, dtype=DTYPE) for g in generated])
    truth = torch.stack([torch.as_tensor(c, dtype=DTYPE) for c in truth])
    dist = rmsd_matrix(generated, truth)
    precision = dist.min(dim=1).values
    recall = dist.min(dim=0).values
    return MetricReport(
        cov_r=100.0 * float(_covered(recall, delta).to(DTYPE).mean()),
        cov_p=100.0 * float(_covered(precision, delta).to(DTYPE).mean()),
        amr_r=float(recall.mean()),
        amr_p=float(precision.mean()),
        delta=float(delta),
        K=int(truth.shape[0]),
        L=int(generated.shape[0]),
    )


def aggregate_reports(reports: Sequence[MetricReport]) -> MetricReport:
    """mean of per-molecule reports; counts are summed"""
    if not reports:
        raise DomainError("no reports to aggregate")
    n = len(reports)
    return MetricReport(
        cov_r=sum(r.cov_r for r in reports) / n,
        cov_p=sum(r.cov_p for r in reports) / n,
        amr_r=sum(r.amr_r for r in reports) / n,
        amr_p=sum(r.amr_p for r in reports) / n,
        delta=reports[0].delta,
        K=sum(r.K for r in reports),
        L=sum(r.L for r in reports),
    )
