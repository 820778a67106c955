"""oracle: closed-form versus Monte-Carlo checks and the target timing benchmark."""
import csv
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, NamedTuple, Optional, Sequence, Union

import numpy as np
import torch
from torch import Tensor

from .config import BENCH_GRID, BENCH_NODES, DTYPE, ORACLE_SAMPLES, ORACLE_SIGMAS, substream, substream_seed
from .dataset import Molecule, gen_synthetic_dataset
from .errors import DomainError
from .interpolants import random_rotation, sample_prior
from .so3 import DEFAULT_QUADRATURE, Quadrature
from .target import (
    ConformerEnsemble,
    FlowQuery,
    MetricSpec,
    avg_flow_target,
    averaged_velocity,
    mc_avg_flow,
    per_molecule_metric,
)

ORACLE_TIMES = (0.2, 0.5, 0.8)
MAX_ORACLE_ATOMS = 8
MAX_ORACLE_CONFORMERS = 3
TAMPER_SCALE = 1.5
SE_FLOOR = 1e-12
BENCH_CHUNK = 1 << 21


# ----------------------------------------------------------------------------
# ORACLE CHECK


class OracleInstance(NamedTuple):
    index: int
    mol_id: str
    query: FlowQuery
    ensemble: ConformerEnsemble
    metric: MetricSpec


@dataclass
class InstanceResult:
    index: int
    mol_id: str
    n_atoms: int
    conformers: int
    t: float
    metric: str
    max_z: float
    exceedances: int
    components: int
    ess: float
    passed: bool


@dataclass
class OracleReport:
    samples: int
    sigmas: float
    seed: int
    tampered: bool
    quadrature: str
    instances: list[InstanceResult]

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.instances)

    @property
    def max_z(self) -> float:
        return max(r.max_z for r in self.instances)

    @property
    def exceedance_rate(self) -> float:
        """fraction of all checked components beyond the threshold"""
        total = sum(r.components for r in self.instances)
        return sum(r.exceedances for r in self.instances) / max(total, 1)

    def to_dict(self) -> dict[str, Any]:
        res = asdict(self)
        res["passed"] = self.passed
        res["max_z"] = self.max_z
        res["exceedance_rate"] = self.exceedance_rate
        return res

    def to_json(self, path: Union[str, Path]):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)

    def summary(self) -> str:
        lines = [f"{'#':>3} {'molecule':<10} {'N':>3} {'K':>3} {'t':>5} {'metric':<10} {'max|z|':>8} {'ess':>10}"]
        for r in self.instances:
            lines.append(
                f"{r.index:>3} {r.mol_id:<10} {r.n_atoms:>3} {r.conformers:>3} {r.t:>5.2f} "
                f"{r.metric:<10} {r.max_z:>8.3f} {r.ess:>10.1f} {'ok' if r.passed else 'FAIL'}"
            )
        status = "PASS" if self.passed else "FAIL"
        lines.append(
            f"{status}: max |z| {self.max_z:.3f} (threshold {self.sigmas:g} standard errors, "
            f"{100 * self.exceedance_rate:.2f}% of components beyond, {self.quadrature} quadrature)"
        )
        return "\n".join(lines)


def instance_scale(t: float, harmonic: bool) -> float:
    """per-atom RMS radius that keeps the rotation posterior broad enough to sample"""
    scale = float(np.sqrt(0.5 * (1 - t) ** 2 / t))
    return 0.5 * scale if harmonic else scale


class OracleCheck:
    """compares the closed-form averaged target to the Monte-Carlo estimate

    Instances take molecules with at most MAX_ORACLE_ATOMS atoms from the
    given set (or a small synthetic set), cycle t over ORACLE_TIMES and
    alternate the Euclidean and harmonic metrics. Conformers are rescaled by
    `instance_scale` and the query is a point on the chord from a prior draw
    to a randomly rotated conformer. The closed form uses the accurate
    Gauss-Legendre quadrature unless another one is given.
    """

    def __init__(
        self,
        molecules: Optional[Sequence[Molecule]] = None,
        instances: int = 20,
        samples: int = ORACLE_SAMPLES,
        seed: int = 0,
        sigmas: float = ORACLE_SIGMAS,
        tamper: bool = False,
        workers: int = 1,
        quadrature: Optional[Quadrature] = None,
    ):
        if instances < 1:
            raise DomainError("instances must be positive")
        if sigmas <= 0:
            raise DomainError("sigmas must be positive")
        self.log = logging.getLogger(self.__class__.__name__)
        self.samples = samples
        self.seed = seed
        self.sigmas = sigmas
        self.tamper = tamper
        self.workers = workers
        self.quadrature = quadrature or Quadrature.accurate()
        self.instances = self.build_instances(molecules, instances)

    def __repr__(self):
        return f"<{self.__class__.__name__} instances={len(self.instances)} samples={self.samples}>"

    def _candidates(self, molecules: Optional[Sequence[Molecule]], count: int) -> list[Molecule]:
        pool = [m for m in (molecules or []) if m.n_atoms <= MAX_ORACLE_ATOMS]
        if not pool:
            self.log.info("no molecule with at most %d atoms: using a synthetic set", MAX_ORACLE_ATOMS)
            pool = list(gen_synthetic_dataset(
                count,
                atoms_range=(3, MAX_ORACLE_ATOMS),
                conformers_range=(1, MAX_ORACLE_CONFORMERS),
                seed=self.seed,
            ))
        rng = np.random.default_rng(substream_seed(self.seed, "oracle"))
        order = rng.permutation(len(pool))
        return [pool[order[i % len(pool)]] for i in range(count)]

    def build_instances(self, molecules: Optional[Sequence[Molecule]], count: int) -> list[OracleInstance]:
        gen = substream(self.seed, "oracle-queries")
        res = []
        for i, mol in enumerate(self._candidates(molecules, count)):
            t = ORACLE_TIMES[i % len(ORACLE_TIMES)]
            kind = MetricSpec.HARMONIC if i % 2 else MetricSpec.EUCLIDEAN
            ensemble = mol.ensemble
            if ensemble.size > MAX_ORACLE_CONFORMERS:
                ensemble = ConformerEnsemble(ensemble.conformers, ensemble.weights, MAX_ORACLE_CONFORMERS)
            rms = torch.sqrt((ensemble.conformers**2).sum(-1).mean())
            scale = instance_scale(t, kind == MetricSpec.HARMONIC) / float(rms)
            ensemble = ConformerEnsemble(ensemble.conformers * scale, ensemble.weights)
            k = int(torch.multinomial(ensemble.weights, 1, generator=gen))
            x1 = ensemble.conformers[k] @ random_rotation(gen).T
            x0 = sample_prior(mol.n_atoms, generator=gen)
            query = FlowQuery(t, (1 - t) * x0 + t * x1)
            metric = per_molecule_metric(kind, mol.graph)
            res.append(OracleInstance(i, mol.id, query, ensemble, metric))
        return res

    def closed_form(self, instance: OracleInstance) -> Tensor:
        u = avg_flow_target(instance.query, instance.ensemble, instance.metric, self.quadrature)
        if not self.tamper:
            return u
        # fault injection: inflate the posterior mean of the rotated conformer
        t, x = instance.query.t, instance.query.x
        avg = u * (1 - t) + x
        return (TAMPER_SCALE * avg - x) / (1 - t)

    def check(self, instance: OracleInstance) -> InstanceResult:
        exact = self.closed_form(instance)
        estimate = mc_avg_flow(
            instance.query,
            instance.ensemble,
            instance.metric,
            self.samples,
            substream_seed(self.seed, f"oracle-mc:{instance.index}"),
        )
        z = (exact - estimate.velocity).abs() / (estimate.stderr + SE_FLOOR)
        max_z = float(z.max())
        exceedances = int((z > self.sigmas).sum())
        return InstanceResult(
            index=instance.index,
            mol_id=instance.mol_id,
            n_atoms=instance.ensemble.n_atoms,
            conformers=instance.ensemble.size,
            t=instance.query.t,
            metric=instance.metric.kind,
            max_z=max_z,
            exceedances=exceedances,
            components=z.numel(),
            ess=estimate.ess,
            passed=max_z <= self.sigmas,
        )

    def process(self) -> OracleReport:
        """run every instance; results keep instance order"""
        self.log.info(
            "checking %d instances at %d samples%s",
            len(self.instances), self.samples, " (tampered)" if self.tamper else "",
        )
        if self.workers > 1:
            with ThreadPoolExecutor(max_workers=self.workers) as pool:
                results = list(pool.map(self.check, self.instances))
        else:
            results = [self.check(inst) for inst in self.instances]
        report = OracleReport(self.samples, self.sigmas, self.seed, self.tamper, self.quadrature.rule, results)
        for r in results:
            if not r.passed:
                self.log.warning("instance %d (%s): max |z| %.2f", r.index, r.mol_id, r.max_z)
        self.log.info("oracle check %s: max |z| %.3f", "passed" if report.passed else "failed", report.max_z)
        return report


# ----------------------------------------------------------------------------
# TIMING BENCHMARK


@dataclass
class BenchCell:
    batch: int
    conformers: int
    nodes: int
    seconds: float


class TargetBenchmark:
    """wall-clock of the batched averaged target over a (batch x conformers) grid"""

    def __init__(
        self,
        batch_sizes: Sequence[int] = BENCH_GRID,
        conformer_counts: Sequence[int] = BENCH_GRID,
        nodes: int = BENCH_NODES,
        repeats: int = 1,
        seed: int = 0,
        quadrature: Quadrature = DEFAULT_QUADRATURE,
    ):
        if any(b < 1 for b in batch_sizes) or any(k < 1 for k in conformer_counts):
            raise DomainError("batch sizes and conformer counts must be positive")
        if nodes < 1 or repeats < 1:
            raise DomainError("nodes and repeats must be positive")
        self.log = logging.getLogger(self.__class__.__name__)
        self.batch_sizes = list(batch_sizes)
        self.conformer_counts = list(conformer_counts)
        self.nodes = nodes
        self.repeats = repeats
        self.seed = seed
        self.quadrature = quadrature
        self.metric = MetricSpec.euclidean()
        self.cells: list[BenchCell] = []

    def __repr__(self):
        return f"<{self.__class__.__name__} grid={len(self.batch_sizes)}x{len(self.conformer_counts)} nodes={self.nodes}>"

    def time_cell(self, batch: int, conformers: int) -> float:
        """median seconds of one full-batch evaluation, chunked along the batch"""
        gen = substream(self.seed, f"bench:{batch}:{conformers}")
        x = torch.randn(batch, self.nodes, 3, generator=gen, dtype=DTYPE)
        targets = torch.randn(conformers, self.nodes, 3, generator=gen, dtype=DTYPE)
        t = torch.rand(batch, generator=gen, dtype=DTYPE)
        chunk = max(1, BENCH_CHUNK // (conformers * self.nodes))
        times = []
        for _ in range(self.repeats):
            start = time.perf_counter()
            for lo in range(0, batch, chunk):
                hi = lo + chunk
                averaged_velocity(x[lo:hi], targets, t[lo:hi], self.metric, quadrature=self.quadrature)
            times.append(time.perf_counter() - start)
        return float(np.median(times))

    def process(self) -> list[BenchCell]:
        self.cells = []
        for batch in self.batch_sizes:
            for conformers in self.conformer_counts:
                seconds = self.time_cell(batch, conformers)
                self.log.info("batch %d conformers %d: %.2f ms", batch, conformers, 1e3 * seconds)
                self.cells.append(BenchCell(batch, conformers, self.nodes, seconds))
        return self.cells

    def cell(self, batch: int, conformers: int) -> BenchCell:
        for c in self.cells:
            if c.batch == batch and c.conformers == conformers:
                return c
        raise DomainError(f"no timing for batch {batch}, conformers {conformers}")

    def to_csv(self, path: Union[str, Path]):
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["batch", "conformers", "nodes", "ms"])
            for c in self.cells:
                writer.writerow([c.batch, c.conformers, c.nodes, f"{1e3 * c.seconds:.4f}"])

    def table(self) -> str:
        """milliseconds, one row per batch size, one column per conformer count"""
        lines = [f"{'batch':>8} " + " ".join(f"{k:>10d}" for k in self.conformer_counts)]
        for b in self.batch_sizes:
            row = " ".join(f"{1e3 * self.cell(b, k).seconds:>10.2f}" for k in self.conformer_counts)
            lines.append(f"{b:>8d} {row}")
        return "\n".join(lines)
