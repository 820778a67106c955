"""training: losses, time samplers, EMA and the three training stages.

    stage 1   fit v(x_t, t) to the averaged target u_t(x_t)   (Stage1Trainer)
    reflow    fit v(x'_t, t) to x'_1 - x'_0 on teacher pairs   (ReflowTrainer)
    distill   the reflow loss at t = 0 for one-step transport  (Distiller)

All randomness comes from named sub-streams of the configured seed, and
per-element work fanned out to worker threads is reduced in a fixed order.
"""
import csv
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Callable, Iterable, NamedTuple, Optional, Sequence, Union

import torch
from torch import Tensor, nn

from . import config as cfg
from .config import DTYPE, substream
from .dataset import DatasetFile, Molecule
from .errors import ConfigError, DatasetError, DomainError, TrainingDivergedError
from .interpolants import (
    baseline_target,
    integration_interpolant,
    linear_interpolant,
    random_rotation,
    sample_prior,
)
from .model import VectorFieldNet
from .sampling import bind_field, euler_integrate
from .target import ConformerEnsemble, MetricSpec, averaged_velocity, per_molecule_metric

OBJECTIVES = ("avgflow", "condot", "kabschot")
SCHEDULES = ("cosine", "piecewise", "constant")
T_SAMPLERS = ("uniform", "exponential")
PAIRS_SCHEMA_VERSION = 1


# ----------------------------------------------------------------------------
# CONFIGURATION


@dataclass
class TrainConfig:
    objective: str = "avgflow"
    interpolant: str = "linear"
    interpolant_steps: int = cfg.INTEGRATION_STEPS
    metric: str = "euclidean"
    sigma0: float = cfg.SIGMA0
    sigma1: float = cfg.SIGMA1
    schedule: str = "cosine"
    learning_rate: float = cfg.PEAK_LR
    init_lr: float = cfg.INIT_LR
    end_lr: float = cfg.END_LR
    warmup_steps: int = cfg.WARMUP_STEPS
    milestones: list[int] = field(default_factory=list)
    decay_factor: float = 0.5
    weight_decay: float = 0.0
    batch_size: int = 4
    samples_per_molecule: int = 8
    epochs: int = 200
    ema_decay: float = cfg.EMA_DECAY
    ema_warmup: bool = False
    seed: int = 0
    t_sampler: str = "uniform"
    t_lambda: float = cfg.REFLOW_LAMBDA
    full_ensemble: bool = False
    max_conformers: Optional[int] = None
    val_fraction: float = cfg.VAL_FRACTION
    grad_clip: float = cfg.GRAD_CLIP
    divergence_factor: float = cfg.DIVERGENCE_FACTOR
    workers: int = 1
    pairs_per_graph: int = cfg.PAIRS_PER_GRAPH
    teacher_steps: int = cfg.TEACHER_STEPS
    from_ema: bool = True

    def __post_init__(self):
        checks = [
            (self.objective in OBJECTIVES, f"objective must be one of {OBJECTIVES}"),
            (self.interpolant in ("linear", "integrated"), "interpolant must be linear or integrated"),
            (self.metric in (MetricSpec.EUCLIDEAN, MetricSpec.HARMONIC), "metric must be euclidean or harmonic"),
            (self.schedule in SCHEDULES, f"schedule must be one of {SCHEDULES}"),
            (self.t_sampler in T_SAMPLERS, f"t_sampler must be one of {T_SAMPLERS}"),
            (self.learning_rate > 0 and self.init_lr > 0 and self.end_lr > 0, "learning rates must be positive"),
            (0 < self.ema_decay < 1, "ema_decay must lie in (0, 1)"),
            (self.batch_size >= 1 and self.samples_per_molecule >= 1, "batch sizes must be positive"),
            (self.epochs >= 1, "epochs must be positive"),
            (self.interpolant_steps >= 1, "interpolant_steps must be positive"),
            (self.warmup_steps >= 0, "warmup_steps must be nonnegative"),
            (0 < self.decay_factor <= 1, "decay_factor must lie in (0, 1]"),
            (self.t_sampler != "exponential" or self.t_lambda != 0, "t_lambda must be nonzero"),
            (self.workers >= 1, "workers must be positive"),
            (self.pairs_per_graph >= 1 and self.teacher_steps >= 1, "reflow pair settings must be positive"),
            (self.grad_clip > 0 and self.divergence_factor > 1, "grad_clip and divergence_factor out of range"),
            (0 <= self.val_fraction < 1, "val_fraction must lie in [0, 1)"),
            (self.max_conformers is None or self.max_conformers >= 1, "max_conformers must be positive"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)

    @classmethod
    def for_stage(cls, stage: str, **overrides) -> "TrainConfig":
        """defaults of a named stage: avgflow, reflow or distill"""
        defaults = {
            "avgflow": {},
            "reflow": {"learning_rate": cfg.REFLOW_PEAK_LR, "t_sampler": "exponential"},
            "distill": {"learning_rate": cfg.DISTILL_PEAK_LR},
        }
        if stage not in defaults:
            raise ConfigError(f"unknown stage: {stage}")
        return cls(**{**defaults[stage], **overrides})

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**data)

    def to_json(self, path: Union[str, Path]):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, path: Union[str, Path]) -> "TrainConfig":
        try:
            with open(path) as f:
                data = json.load(f)
        except (OSError, json.JSONDecodeError) as err:
            raise ConfigError(f"cannot read training config {path}: {err}") from err
        return cls.from_dict(data)


def lr_factor(config: TrainConfig, total_steps: int, steps_per_epoch: int) -> Callable[[int], float]:
    """multiplier of the peak rate per optimizer step, for LambdaLR"""
    peak = config.learning_rate
    warmup = config.warmup_steps

    def factor(step: int) -> float:
        if step < warmup:
            return (config.init_lr + (peak - config.init_lr) * step / warmup) / peak
        if config.schedule == "constant":
            return 1.0
        if config.schedule == "piecewise":
            epoch = step // max(steps_per_epoch, 1)
            passed = sum(1 for m in config.milestones if epoch >= m)
            return config.decay_factor**passed
        span = max(total_steps - warmup, 1)
        progress = min((step - warmup) / span, 1.0)
        lr = config.end_lr + 0.5 * (peak - config.end_lr) * (1 + math.cos(math.pi * progress))
        return lr / peak

    return factor


# ----------------------------------------------------------------------------
# TIME SAMPLING


def sample_t(
    sampler: str = "uniform",
    lam: float = cfg.REFLOW_LAMBDA,
    size: Sequence[int] = (),
    seed: Optional[int] = None,
    generator: Optional[torch.Generator] = None,
) -> Tensor:
    """uniform times, or inverse-CDF draws from p(t) ~ exp(lam t) on [0, 1]"""
    if generator is None:
        generator = torch.Generator()
        generator.manual_seed(0 if seed is None else int(seed))
    u = torch.rand(*size, generator=generator, dtype=DTYPE)
    if sampler == "uniform":
        return u
    if sampler != "exponential":
        raise DomainError(f"unknown t sampler: {sampler}")
    if lam == 0:
        raise DomainError("exponential t sampler needs a nonzero lambda")
    return torch.clamp(torch.log1p(u * math.expm1(lam)) / lam, 0.0, 1.0)


def exponential_t_cdf(t, lam: float) -> Tensor:
    """P(T <= t) of the exponential time density"""
    t = torch.as_tensor(t, dtype=DTYPE)
    return torch.expm1(lam * t) / math.expm1(lam)


# ----------------------------------------------------------------------------
# EMA


class ExponentialMovingAverage:
    """shadow copy of a network's parameters updated after each optimizer step

    The decay is constant unless `warmup` is set; then the effective decay is min(decay, (1 + n) / (10 + n)) after
    n updates, so early shadows are not dominated by the initialization.
    """

    def __init__(self, net: nn.Module, decay: float = cfg.EMA_DECAY, warmup: bool = False):
        self.decay = decay
        self.warmup = warmup
        self.num_updates = 0
        self.shadow = {k: v.detach().clone() for k, v in net.state_dict().items()}

    def __repr__(self):
        return f"<{self.__class__.__name__} decay={self.decay} updates={self.num_updates}>"

    def current_decay(self) -> float:
        if self.warmup:
            return min(self.decay, (1 + self.num_updates) / (10 + self.num_updates))
        return self.decay

    @torch.no_grad()
    def update(self, net: nn.Module):
        decay = self.current_decay()
        for key, value in net.state_dict().items():
            if value.is_floating_point():
                self.shadow[key].mul_(decay).add_(value.detach(), alpha=1 - decay)
            else:
                self.shadow[key].copy_(value)
        self.num_updates += 1

    def state_dict(self) -> dict[str, Tensor]:
        return {k: v.clone() for k, v in self.shadow.items()}

    def copy_to(self, net: nn.Module):
        net.load_state_dict(self.shadow)


# ----------------------------------------------------------------------------
# LOSSES


def _squared_error(v: Tensor, target: Tensor) -> Tensor:
    """squared norm per atom, averaged over atoms and batch"""
    return ((v - target) ** 2).sum(-1).mean()


def avgflow_loss(net: Callable, graph, ensemble: ConformerEnsemble, metric: MetricSpec, t, x_t) -> Tensor:
    """|v(x_t, t) - u_t(x_t)|^2 with the averaged target held constant"""
    with torch.no_grad():
        target = averaged_velocity(x_t, ensemble.conformers, t, metric, ensemble.weights)
    return _squared_error(net(graph, x_t, t), target)


def baseline_loss(net: Callable, graph, kind: str, x0, x1, t) -> Tensor:
    """conditional OT or Kabsch-aligned OT regression loss"""
    path = baseline_target(kind, x0, x1)
    return _squared_error(net(graph, path.interpolate(t), t), path.velocity)


def reflow_loss(net: Callable, graph, x0, x1, t) -> Tensor:
    """|v(x'_t, t) - (x'_1 - x'_0)|^2 on the chord of a coupled pair"""
    x0 = torch.as_tensor(x0, dtype=DTYPE)
    x1 = torch.as_tensor(x1, dtype=DTYPE)
    return _squared_error(net(graph, linear_interpolant(x0, x1, t), t), x1 - x0)


def distill_loss(net: Callable, graph, x0, x1) -> Tensor:
    """reflow loss at t = 0"""
    x0 = torch.as_tensor(x0, dtype=DTYPE)
    return reflow_loss(net, graph, x0, x1, torch.zeros(x0.shape[:-2], dtype=DTYPE))


def parameter_gradient(net: nn.Module, loss: Tensor) -> Tensor:
    """flat gradient of a loss with respect to the network parameters"""
    params = [p for p in net.parameters() if p.requires_grad]
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    return torch.cat([
        (g if g is not None else torch.zeros_like(p)).reshape(-1) for g, p in zip(grads, params)
    ])


# ----------------------------------------------------------------------------
# LOSS CURVES


class LossCurve:
    """per-epoch losses; epoch 0 holds the untrained validation values"""

    COLUMNS = ["epoch", "train_loss", "val_loss", "val_field_error", "lr"]

    def __init__(self, rows: Optional[list[dict[str, Any]]] = None):
        self.rows = list(rows or [])

    def __repr__(self):
        return f"<{self.__class__.__name__} epochs={len(self.rows)}>"

    def append(self, epoch: int, train_loss: Optional[float], val_loss: float, val_field_error: float, lr: float):
        self.rows.append({
            "epoch": epoch,
            "train_loss": train_loss,
            "val_loss": val_loss,
            "val_field_error": val_field_error,
            "lr": lr,
        })

    @property
    def initial(self) -> dict[str, Any]:
        return self.rows[0]

    @property
    def final(self) -> dict[str, Any]:
        return self.rows[-1]

    def to_csv(self, path: Union[str, Path]):
        with open(path, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=self.COLUMNS)
            writer.writeheader()
            for row in self.rows:
                writer.writerow({k: ("" if v is None else repr(v)) for k, v in row.items()})

    @classmethod
    def from_csv(cls, path: Union[str, Path]) -> "LossCurve":
        rows = []
        with open(path, newline="") as f:
            for row in csv.DictReader(f):
                rows.append({
                    "epoch": int(row["epoch"]),
                    **{k: (None if row[k] == "" else float(row[k])) for k in cls.COLUMNS[1:]},
                })
        return cls(rows)


# ----------------------------------------------------------------------------
# VALIDATION FIELD


class FieldItem(NamedTuple):
    molecule: Molecule
    metric: MetricSpec
    x0: Tensor
    x1: Tensor
    t: Tensor
    x_t: Tensor
    target: Tensor


class FieldCheck:
    """fixed validation draws scored against the full-ensemble averaged field"""

    def __init__(self, molecules: Sequence[Molecule], config: TrainConfig):
        self.log = logging.getLogger(self.__class__.__name__)
        self.items: list[FieldItem] = []
        gen = substream(config.seed, "validation")
        for mol in molecules:
            metric = per_molecule_metric(config.metric, mol.graph, config.sigma0, config.sigma1)
            n = config.samples_per_molecule
            x0 = sample_prior(mol.n_atoms, generator=gen, batch=(n,))
            index = torch.multinomial(mol.ensemble.weights, n, replacement=True, generator=gen)
            x1 = mol.ensemble.conformers[index] @ random_rotation(gen, (n,)).transpose(-1, -2)
            t = torch.rand(n, generator=gen, dtype=DTYPE)
            x_t = linear_interpolant(x0, x1, t)
            target = averaged_velocity(x_t, mol.ensemble.conformers, t, metric, mol.ensemble.weights)
            self.items.append(FieldItem(mol, metric, x0, x1, t, x_t, target))

    def __repr__(self):
        return f"<{self.__class__.__name__} molecules={len(self.items)}>"

    def __len__(self):
        return len(self.items)

    @torch.no_grad()
    def field_error(self, net: Callable) -> float:
        """mean squared distance of v(x_t, t) from the averaged target"""
        if not self.items:
            return float("nan")
        errors = [_squared_error(net(it.molecule.graph, it.x_t, it.t), it.target) for it in self.items]
        return float(torch.stack(errors).mean())


# ----------------------------------------------------------------------------
# TRAINERS


class TrainResult(NamedTuple):
    net: VectorFieldNet
    ema_state: dict[str, Tensor]
    curve: LossCurve


class Trainer:
    """optimizer, schedule, EMA and the epoch loop shared by every stage"""

    stage = "base"

    def __init__(self, net: VectorFieldNet, config: TrainConfig, steps_per_epoch: int):
        self.log = logging.getLogger(self.__class__.__name__)
        self.net = net
        self.config = config
        self.steps_per_epoch = max(steps_per_epoch, 1)
        self.optimizer = torch.optim.AdamW(
            net.parameters(), lr=config.learning_rate, weight_decay=config.weight_decay
        )
        total = self.steps_per_epoch * config.epochs
        self.scheduler = torch.optim.lr_scheduler.LambdaLR(
            self.optimizer, lr_factor(config, total, self.steps_per_epoch)
        )
        self.ema = ExponentialMovingAverage(net, config.ema_decay, config.ema_warmup)
        self.curve = LossCurve()
        self.gen = substream(config.seed, "t-sampling")
        self.executor: Optional[ThreadPoolExecutor] = None

    def __repr__(self):
        return f"<{self.__class__.__name__} stage={self.stage}>"

    def map(self, func: Callable, items: Iterable) -> list:
        """order-preserving map, on worker threads when configured"""
        if self.executor is None:
            return [func(item) for item in items]
        return list(self.executor.map(func, items))

    def draw_t(self, size: Sequence[int]) -> Tensor:
        return sample_t(self.config.t_sampler, self.config.t_lambda, size, generator=self.gen)

    def optimizer_step(self, loss: Tensor):
        self.optimizer.zero_grad()
        loss.backward()
        nn.utils.clip_grad_norm_(self.net.parameters(), self.config.grad_clip)
        self.optimizer.step()
        self.scheduler.step()
        self.ema.update(self.net)

    @property
    def lr(self) -> float:
        return float(self.optimizer.param_groups[0]["lr"])

    # stage hooks
    def train_epoch(self, epoch: int) -> float:
        raise NotImplementedError

    def validate(self) -> tuple[float, float]:
        """(validation loss, averaged-field error)"""
        raise NotImplementedError

    def fit(self) -> TrainResult:
        workers = self.config.workers
        self.executor = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
        try:
            self.net.eval()
            val_loss, field_error = self.validate()
            self.curve.append(0, None, val_loss, field_error, self.lr)
            # without a validation split the first epoch's loss is the reference
            reference = val_loss if math.isfinite(val_loss) else None
            if reference is None:
                self.log.warning("%s: no validation loss, divergence is checked against epoch 1", self.stage)
            self.log.info("%s epoch 0: val %.5f field %.5f", self.stage, val_loss, field_error)
            for epoch in range(1, self.config.epochs + 1):
                self.net.train()
                train_loss = self.train_epoch(epoch)
                self.net.eval()
                val_loss, field_error = self.validate()
                self.curve.append(epoch, train_loss, val_loss, field_error, self.lr)
                self.log.info(
                    "%s epoch %d: train %.5f val %.5f field %.5f lr %.2e",
                    self.stage, epoch, train_loss, val_loss, field_error, self.lr,
                )
                if reference is None and math.isfinite(train_loss):
                    reference = train_loss
                limit = self.config.divergence_factor * max(reference or 0.0, 1e-12)
                if not math.isfinite(train_loss) or train_loss > limit:
                    raise TrainingDivergedError(
                        f"{self.stage} training diverged at epoch {epoch}",
                        diagnostics={
                            "stage": self.stage,
                            "epoch": epoch,
                            "train_loss": train_loss,
                            "reference_loss": reference,
                            "lr": self.lr,
                        },
                    )
        finally:
            if self.executor is not None:
                self.executor.shutdown()
                self.executor = None
        return TrainResult(self.net, self.ema.state_dict(), self.curve)


class Stage1Trainer(Trainer):
    """averaged-flow (or baseline objective) training on conformer ensembles"""

    stage = "avgflow"

    def __init__(
        self,
        net: VectorFieldNet,
        train: Sequence[Molecule],
        val: Sequence[Molecule],
        config: TrainConfig,
    ):
        if not train:
            raise DomainError("training set is empty")
        n_steps = math.ceil(len(train) / config.batch_size)
        super().__init__(net, config, n_steps)
        self.train_set = list(train)
        self.metrics = {
            m.id: per_molecule_metric(config.metric, m.graph, config.sigma0, config.sigma1)
            for m in self.train_set
        }
        self.field_check = FieldCheck(val, config)
        self.order_gen = substream(config.seed, "order")
        self.prior_gen = substream(config.seed, "prior")
        self.conformer_gen = substream(config.seed, "conformer")

    def _ensemble(self, mol: Molecule) -> ConformerEnsemble:
        ensemble = mol.ensemble
        if self.config.max_conformers is not None and ensemble.size > self.config.max_conformers:
            ensemble = ConformerEnsemble(ensemble.conformers, ensemble.weights, self.config.max_conformers)
        if self.config.full_ensemble:
            return ensemble
        return ensemble.sample(self.conformer_gen)

    def _draw(self, mol: Molecule, ensemble: ConformerEnsemble) -> tuple[Tensor, Tensor, Tensor]:
        n = self.config.samples_per_molecule
        x0 = sample_prior(mol.n_atoms, generator=self.prior_gen, batch=(n,))
        index = torch.multinomial(ensemble.weights, n, replacement=True, generator=self.conformer_gen)
        x1 = ensemble.conformers[index] @ random_rotation(self.prior_gen, (n,)).transpose(-1, -2)
        t = self.draw_t((n,))
        return x0, x1, t

    def _interpolate(self, mol: Molecule, ensemble: ConformerEnsemble, x0: Tensor, x1: Tensor, t: Tensor) -> Tensor:
        if self.config.interpolant == "linear":
            return linear_interpolant(x0, x1, t)
        metric = self.metrics[mol.id]
        return torch.stack([
            integration_interpolant(x0[b], ensemble, metric, float(t[b]), self.config.interpolant_steps)
            for b in range(x0.shape[0])
        ])

    def _target(self, job: tuple) -> Tensor:
        mol, ensemble, x_t, t = job
        with torch.no_grad():
            return averaged_velocity(x_t, ensemble.conformers, t, self.metrics[mol.id], ensemble.weights)

    def objective_loss(self, mol: Molecule, x0: Tensor, x1: Tensor, t: Tensor, x_t: Tensor, target: Optional[Tensor]) -> Tensor:
        if self.config.objective == "avgflow":
            return _squared_error(self.net(mol.graph, x_t, t), target)
        return baseline_loss(self.net, mol.graph, self.config.objective, x0, x1, t)

    def train_epoch(self, epoch: int) -> float:
        order = torch.randperm(len(self.train_set), generator=self.order_gen).tolist()
        # one ensemble draw per molecule per epoch
        ensembles = {m.id: self._ensemble(m) for m in self.train_set}
        losses = []
        for start in range(0, len(order), self.config.batch_size):
            batch = [self.train_set[i] for i in order[start : start + self.config.batch_size]]
            draws = []
            for mol in batch:
                x0, x1, t = self._draw(mol, ensembles[mol.id])
                x_t = self._interpolate(mol, ensembles[mol.id], x0, x1, t)
                draws.append((mol, x0, x1, t, x_t))
            targets: list[Optional[Tensor]] = [None] * len(draws)
            if self.config.objective == "avgflow":
                targets = self.map(
                    self._target, [(mol, ensembles[mol.id], x_t, t) for mol, _, _, t, x_t in draws]
                )
            loss = torch.stack([
                self.objective_loss(mol, x0, x1, t, x_t, target)
                for (mol, x0, x1, t, x_t), target in zip(draws, targets)
            ]).mean()
            self.optimizer_step(loss)
            losses.append(float(loss.detach()))
        return sum(losses) / len(losses)

    @torch.no_grad()
    def validate(self) -> tuple[float, float]:
        if not len(self.field_check):
            return float("nan"), float("nan")
        field_error = self.field_check.field_error(self.net)
        if self.config.objective == "avgflow":
            return field_error, field_error
        losses = [
            baseline_loss(self.net, it.molecule.graph, self.config.objective, it.x0, it.x1, it.t)
            for it in self.field_check.items
        ]
        return float(torch.stack(losses).mean()), field_error


def train_stage1(
    molecules: Sequence[Molecule],
    config: TrainConfig,
    net: Optional[VectorFieldNet] = None,
) -> TrainResult:
    """stage-1 training with a seeded validation split of `molecules`"""
    if not molecules:
        raise DomainError("dataset is empty")
    train, val = DatasetFile(molecules).split(config.val_fraction, config.seed)
    if net is None:
        net = VectorFieldNet(seed=cfg.substream_seed(config.seed, "init"))
    return Stage1Trainer(net, train, val, config).fit()


# ----------------------------------------------------------------------------
# REFLOW PAIRS


class ReflowPair(NamedTuple):
    graph_id: str
    x0: Tensor
    x1: Tensor


class ReflowPairSet:
    """teacher couplings (x'_0, x'_1) with the settings that produced them"""

    def __init__(self, pairs: Sequence[ReflowPair], metadata: Optional[dict[str, Any]] = None):
        self.pairs = list(pairs)
        self.metadata = dict(metadata or {})

    def __repr__(self):
        return f"<{self.__class__.__name__} pairs={len(self)}>"

    def __len__(self):
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)

    def by_graph(self) -> dict[str, tuple[Tensor, Tensor]]:
        """stacked (x0, x1) per graph id, in first-appearance order"""
        groups: dict[str, list[ReflowPair]] = {}
        for pair in self.pairs:
            groups.setdefault(pair.graph_id, []).append(pair)
        return {
            gid: (torch.stack([p.x0 for p in ps]), torch.stack([p.x1 for p in ps]))
            for gid, ps in groups.items()
        }

    def to_dict(self) -> dict[str, Any]:
        return {
            "schema_version": PAIRS_SCHEMA_VERSION,
            "metadata": self.metadata,
            "pairs": [
                {"graph_id": p.graph_id, "x0": p.x0.tolist(), "x1": p.x1.tolist()} for p in self.pairs
            ],
        }

    def save(self, path: Union[str, Path]):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, sort_keys=True)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "ReflowPairSet":
        try:
            with open(path) as f:
                data = json.load(f)
        except (OSError, json.JSONDecodeError) as err:
            raise DatasetError(f"cannot read reflow pairs {path}: {err}") from err
        if data.get("schema_version") != PAIRS_SCHEMA_VERSION:
            raise DatasetError(f"reflow pair schema version {data.get('schema_version')} is not supported")
        pairs = [
            ReflowPair(p["graph_id"], torch.as_tensor(p["x0"], dtype=DTYPE), torch.as_tensor(p["x1"], dtype=DTYPE))
            for p in data["pairs"]
        ]
        return cls(pairs, data.get("metadata"))


def generate_reflow_pairs(
    teacher: Callable,
    molecules: Sequence[Molecule],
    steps: int = cfg.TEACHER_STEPS,
    pairs_per_graph: int = cfg.PAIRS_PER_GRAPH,
    seed: int = 0,
    workers: int = 1,
    teacher_id: str = "in-memory",
) -> ReflowPairSet:
    """integrate the teacher from prior draws with the shared Euler kernel"""
    if steps < 1 or pairs_per_graph < 1:
        raise DomainError("steps and pairs_per_graph must be positive")
    log = logging.getLogger("generate_reflow_pairs")

    def run(mol: Molecule) -> list[ReflowPair]:
        gen = substream(seed, f"reflow-pairs:{mol.id}")
        x0 = sample_prior(mol.n_atoms, generator=gen, batch=(pairs_per_graph,))
        with torch.no_grad():
            _, states = euler_integrate(bind_field(teacher, mol.graph), x0, steps)
        return [ReflowPair(mol.id, x0[k], states[-1][k]) for k in range(pairs_per_graph)]

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            groups = list(pool.map(run, molecules))
    else:
        groups = [run(mol) for mol in molecules]
    pairs = [pair for group in groups for pair in group]
    log.info("generated %d reflow pairs over %d molecules", len(pairs), len(molecules))
    metadata = {"steps": steps, "seed": seed, "pairs_per_graph": pairs_per_graph, "teacher": teacher_id}
    return ReflowPairSet(pairs, metadata)


# ----------------------------------------------------------------------------
# REFLOW AND DISTILLATION


class ReflowTrainer(Trainer):
    """rectified-flow fine-tuning on teacher couplings"""

    stage = "reflow"

    def __init__(
        self,
        net: VectorFieldNet,
        pairs: ReflowPairSet,
        molecules: Sequence[Molecule],
        config: TrainConfig,
        val_ids: Sequence[str] = (),
    ):
        if not len(pairs):
            raise DomainError("reflow needs at least one pair")
        self.graphs = {m.id: m.graph for m in molecules}
        grouped = pairs.by_graph()
        missing = set(grouped) - set(self.graphs)
        if missing:
            raise DomainError(f"pairs reference unknown molecules: {sorted(missing)}")
        self.train_groups = {k: v for k, v in grouped.items() if k not in set(val_ids)} or grouped
        self.val_groups = {k: v for k, v in grouped.items() if k in set(val_ids)}
        self.train_ids = list(self.train_groups)
        super().__init__(net, config, math.ceil(len(self.train_ids) / config.batch_size))
        self.order_gen = substream(config.seed, "order")
        self.pair_gen = substream(config.seed, "pairs")
        val_mols = [m for m in molecules if m.id in self.val_groups]
        self.field_check = FieldCheck(val_mols, config)
        val_gen = substream(config.seed, "validation-t")
        self.val_t = {
            k: self._fixed_t(v[0].shape[0], val_gen) for k, v in self.val_groups.items()
        }

    def _fixed_t(self, n: int, gen: torch.Generator) -> Tensor:
        return sample_t(self.config.t_sampler, self.config.t_lambda, (n,), generator=gen)

    def pair_loss(self, graph, x0: Tensor, x1: Tensor, t: Tensor) -> Tensor:
        return reflow_loss(self.net, graph, x0, x1, t)

    def train_epoch(self, epoch: int) -> float:
        order = torch.randperm(len(self.train_ids), generator=self.order_gen).tolist()
        n = self.config.samples_per_molecule
        losses = []
        for start in range(0, len(order), self.config.batch_size):
            items = []
            for i in order[start : start + self.config.batch_size]:
                gid = self.train_ids[i]
                x0, x1 = self.train_groups[gid]
                index = torch.randint(x0.shape[0], (n,), generator=self.pair_gen)
                items.append((self.graphs[gid], x0[index], x1[index], self.draw_t((n,))))
            loss = torch.stack([self.pair_loss(*item) for item in items]).mean()
            self.optimizer_step(loss)
            losses.append(float(loss.detach()))
        return sum(losses) / len(losses)

    @torch.no_grad()
    def validate(self) -> tuple[float, float]:
        field_error = self.field_check.field_error(self.net) if len(self.field_check) else float("nan")
        if not self.val_groups:
            return float("nan"), field_error
        losses = [
            self.pair_loss(self.graphs[gid], x0, x1, self.val_t[gid])
            for gid, (x0, x1) in self.val_groups.items()
        ]
        return float(torch.stack(losses).mean()), field_error


class Distiller(ReflowTrainer):
    """one-step distillation: the reflow loss with t fixed at 0"""

    stage = "distill"

    def draw_t(self, size: Sequence[int]) -> Tensor:
        return torch.zeros(*size, dtype=DTYPE)

    def _fixed_t(self, n: int, gen: torch.Generator) -> Tensor:
        return torch.zeros(n, dtype=DTYPE)

    def pair_loss(self, graph, x0: Tensor, x1: Tensor, t: Tensor) -> Tensor:
        return distill_loss(self.net, graph, x0, x1)


def train_reflow(
    net: VectorFieldNet,
    pairs: ReflowPairSet,
    molecules: Sequence[Molecule],
    config: TrainConfig,
    val_ids: Sequence[str] = (),
) -> TrainResult:
    return ReflowTrainer(net, pairs, molecules, config, val_ids).fit()


def train_distill(
    net: VectorFieldNet,
    pairs: ReflowPairSet,
    molecules: Sequence[Molecule],
    config: TrainConfig,
    val_ids: Sequence[str] = (),
) -> TrainResult:
    return Distiller(net, pairs, molecules, config, val_ids).fit()


def stage_config(config: TrainConfig, stage: str) -> TrainConfig:
    """copy of `config` with the stage's learning rate and time sampler"""
    defaults = TrainConfig.for_stage(stage)
    return replace(config, learning_rate=defaults.learning_rate, t_sampler=defaults.t_sampler)
