"""pipeline: run directories, the manifest and the stage classes.

A run directory holds every artifact of one run:

    config.json             the PipelineConfig
    manifest.json           seed, config, versions, per-stage input/output hashes
    dataset.json            the molecules (data)
    stage1.pt / .csv        averaged-flow checkpoint and loss curve (train)
    reflow_pairs.json       teacher couplings of the stage-1 model (reflow-pairs)
    reflow.pt / .csv        rectified model (reflow)
    distill_pairs.json      couplings of the rectified model (distill)
    distill.pt / .csv       one-step model (distill)
    samples.json            generated conformers per stage and step count (sample)
    eval.json / eval.txt    MetricReports and transport diagnostics (eval)
    plots/                  trajectories and loss curves for plotting (plot-export)

Each stage reads only what earlier stages wrote and raises PipelineError
naming the stage to run when an input is missing.
"""
import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Optional, Sequence, Union

import torch

from . import __version__
from .config import DELTA_DRUGS, DTYPE, SCHEMA_VERSION, STEP_SWEEP, substream, substream_seed
from .dataset import DatasetFile, Molecule, bundled_dataset
from .errors import ConfigError, PipelineError
from .evaluation import MetricReport, aggregate_reports, aligned_rmsd, coverage_amr, format_table
from .interpolants import sample_prior
from .model import ModelConfig, VectorFieldNet, load_checkpoint, save_checkpoint
from .sampling import euler_sample, straightness
from .shell import FileOps
from .training import (
    LossCurve,
    ReflowPairSet,
    TrainConfig,
    TrainResult,
    generate_reflow_pairs,
    train_distill,
    train_reflow,
    train_stage1,
)

STAGES = ("data", "train", "reflow-pairs", "reflow", "distill", "sample", "eval", "plot-export")
MODEL_STAGES = ("stage1", "reflow", "distill")
STRAIGHTNESS_STEPS = 100


# ----------------------------------------------------------------------------
# CONFIGURATION


@dataclass
class PipelineConfig:
    seed: int = 0
    dataset: Optional[str] = None
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=lambda: TrainConfig.for_stage("avgflow"))
    reflow: TrainConfig = field(default_factory=lambda: TrainConfig.for_stage("reflow", epochs=100))
    distill: TrainConfig = field(default_factory=lambda: TrainConfig.for_stage("distill", epochs=100))
    eval_steps: list[int] = field(default_factory=lambda: list(STEP_SWEEP))
    eval_split: str = "all"
    delta: float = DELTA_DRUGS
    generated_factor: int = 2
    straightness_samples: int = 64
    export_molecules: int = 4
    export_samples: int = 8
    workers: Optional[int] = None

    def __post_init__(self):
        if self.eval_split not in ("all", "train", "val"):
            raise ConfigError("eval_split must be all, train or val")
        if not self.eval_steps or any(s < 1 for s in self.eval_steps):
            raise ConfigError("eval_steps must be positive step counts")
        if self.generated_factor < 1 or self.straightness_samples < 1:
            raise ConfigError("generated_factor and straightness_samples must be positive")
        if self.delta < 0:
            raise ConfigError("delta must be nonnegative")

    @property
    def n_workers(self) -> int:
        return self.workers or os.cpu_count() or 1

    def stage_config(self, stage: str) -> TrainConfig:
        """stage training config carrying the run seed and worker count"""
        base = {"train": self.train, "reflow": self.reflow, "distill": self.distill}[stage]
        return replace(base, seed=self.seed, workers=self.n_workers)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown pipeline config keys: {sorted(unknown)}")
        data = dict(data)
        if "model" in data:
            data["model"] = ModelConfig.from_dict(data["model"])
        for stage in ("train", "reflow", "distill"):
            if stage in data:
                data[stage] = TrainConfig.from_dict(data[stage])
        try:
            return cls(**data)
        except TypeError as err:
            raise ConfigError(f"invalid pipeline config: {err}") from err

    def to_json(self, path: Union[str, Path]):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, path: Union[str, Path]) -> "PipelineConfig":
        try:
            with open(path) as f:
                data = json.load(f)
        except (OSError, json.JSONDecodeError) as err:
            raise ConfigError(f"cannot read pipeline config {path}: {err}") from err
        return cls.from_dict(data)


class Generator:
    """pipeline generator class

    Generates a sample, fully populated config.json.
    """

    def __init__(self, path: Union[str, Path] = "avgflow.json"):
        self.path = Path(path)
        self.log = logging.getLogger(self.__class__.__name__)

    def __repr__(self):
        return f"<{self.__class__.__name__}>"

    def generate_config(self, **overrides) -> Path:
        """writes the default configuration, with top-level overrides"""
        config = PipelineConfig(**overrides)
        config.to_json(self.path)
        self.log.info("wrote sample config to %s", self.path)
        return self.path


# ----------------------------------------------------------------------------
# RUN DIRECTORY


class RunDirectory:
    """artifact paths and the manifest of one run"""

    ARTIFACTS = {
        "config": ("config.json", None),
        "dataset": ("dataset.json", "data"),
        "stage1": ("stage1.pt", "train"),
        "stage1_curve": ("stage1.csv", "train"),
        "reflow_pairs": ("reflow_pairs.json", "reflow-pairs"),
        "reflow": ("reflow.pt", "reflow"),
        "reflow_curve": ("reflow.csv", "reflow"),
        "distill_pairs": ("distill_pairs.json", "distill"),
        "distill": ("distill.pt", "distill"),
        "distill_curve": ("distill.csv", "distill"),
        "samples": ("samples.json", "sample"),
        "eval": ("eval.json", "eval"),
        "eval_table": ("eval.txt", "eval"),
        "plots": ("plots", "plot-export"),
    }

    def __init__(self, path: Union[str, Path]):
        self.path = Path(path)
        self.log = logging.getLogger(self.__class__.__name__)
        self.files = FileOps(self.log)
        self.files.makedirs(self.path)

    def __repr__(self):
        return f"<{self.__class__.__name__} {self.path}>"

    def __getitem__(self, name: str) -> Path:
        return self.path / self.ARTIFACTS[name][0]

    def require(self, name: str) -> Path:
        """existing artifact path, or PipelineError naming the stage that writes it"""
        path = self[name]
        if not path.exists():
            stage = self.ARTIFACTS[name][1]
            raise PipelineError(f"missing {path.name}: run the `{stage}` stage first")
        return path

    @property
    def manifest_path(self) -> Path:
        return self.path / "manifest.json"

    def manifest(self) -> dict[str, Any]:
        if not self.manifest_path.exists():
            return {"schema_version": SCHEMA_VERSION, "stages": {}}
        return self.files.read_json(self.manifest_path)

    def config(self, config: Optional[PipelineConfig] = None) -> PipelineConfig:
        """stored config; a given config is written on first use and must match later"""
        path = self["config"]
        if path.exists():
            stored = PipelineConfig.from_json(path)
            if config is not None and config != stored:
                raise PipelineError(f"{self.path} was created with a different config")
            return stored
        config = config or PipelineConfig()
        config.to_json(path)
        return config

    def hash(self, name: str) -> str:
        path = self[name]
        if path.is_dir():
            return "dir"
        return self.files.sha256(path)

    def record(
        self,
        stage: str,
        config: PipelineConfig,
        inputs: Sequence[str],
        outputs: Sequence[str],
        settings: Optional[dict[str, Any]] = None,
    ):
        manifest = self.manifest()
        manifest.update({
            "schema_version": SCHEMA_VERSION,
            "seed": config.seed,
            "config": config.to_dict(),
            "versions": {"avgflow": __version__, "torch": torch.__version__},
        })
        manifest["stages"][stage] = {
            "inputs": {name: self.hash(name) for name in inputs},
            "outputs": {name: self.hash(name) for name in outputs},
        }
        if settings:
            manifest["stages"][stage]["settings"] = settings
        self.files.write_json(self.manifest_path, manifest)


# ----------------------------------------------------------------------------
# STAGES


class Stage:
    """one step of the pipeline; subclasses implement `run`"""

    name = "stage"
    inputs: tuple[str, ...] = ()
    outputs: tuple[str, ...] = ()

    def __init__(self, run: RunDirectory, config: PipelineConfig):
        self.log = logging.getLogger(self.__class__.__name__)
        self.run_dir = run
        self.config = config

    def __repr__(self):
        return f"<{self.__class__.__name__} {self.run_dir.path}>"

    def dataset(self) -> DatasetFile:
        return DatasetFile.load(self.run_dir.require("dataset"), pe_width=self.config.model.pe_width)

    def split(self) -> tuple[list[Molecule], list[Molecule]]:
        return self.dataset().split(self.config.train.val_fraction, self.config.seed)

    def load_model(self, name: str, ema: bool = True) -> VectorFieldNet:
        return load_checkpoint(self.run_dir.require(name), self.config.model, ema=ema)

    def save_result(self, name: str, result: TrainResult, metadata: dict[str, Any]):
        save_checkpoint(result.net, self.run_dir[name], result.ema_state, metadata)
        result.curve.to_csv(self.run_dir[f"{name}_curve"])

    def run(self) -> Any:
        raise NotImplementedError

    def settings(self) -> dict[str, Any]:
        """per-invocation values that are not part of the stored config"""
        return {}

    def process(self) -> Any:
        """main class process"""
        for name in self.inputs:
            self.run_dir.require(name)
        self.log.info("running stage %s in %s", self.name, self.run_dir.path)
        res = self.run()
        self.run_dir.record(self.name, self.config, self.inputs, self.outputs, self.settings())
        return res


class DataStage(Stage):
    name = "data"
    outputs = ("dataset",)

    def run(self) -> DatasetFile:
        if self.config.dataset:
            data = DatasetFile.load(self.config.dataset, pe_width=self.config.model.pe_width)
        else:
            data = bundled_dataset()
        data.save(self.run_dir["dataset"])
        return data


class TrainStage(Stage):
    name = "train"
    inputs = ("dataset",)
    outputs = ("stage1", "stage1_curve")

    def run(self) -> TrainResult:
        molecules = list(self.dataset())
        cfg = self.config.stage_config("train")
        net = VectorFieldNet(self.config.model, seed=substream_seed(self.config.seed, "init"))
        result = train_stage1(molecules, cfg, net)
        self.save_result("stage1", result, {"stage": "avgflow", "train": cfg.to_dict()})
        return result


class ReflowPairsStage(Stage):
    name = "reflow-pairs"
    inputs = ("dataset", "stage1")
    outputs = ("reflow_pairs",)

    def run(self) -> ReflowPairSet:
        train, _ = self.split()
        cfg = self.config.stage_config("reflow")
        teacher = self.load_model("stage1", ema=cfg.from_ema)
        pairs = generate_reflow_pairs(
            teacher,
            train,
            steps=cfg.teacher_steps,
            pairs_per_graph=cfg.pairs_per_graph,
            seed=self.config.seed,
            workers=cfg.workers,
            teacher_id=self.run_dir.hash("stage1"),
        )
        pairs.save(self.run_dir["reflow_pairs"])
        return pairs


class ReflowStage(Stage):
    name = "reflow"
    inputs = ("dataset", "stage1", "reflow_pairs")
    outputs = ("reflow", "reflow_curve")

    def run(self) -> TrainResult:
        train, val = self.split()
        cfg = self.config.stage_config("reflow")
        net = self.load_model("stage1", ema=cfg.from_ema)
        pairs = ReflowPairSet.load(self.run_dir["reflow_pairs"])
        # validation pairs come from the same teacher on held-out molecules
        val_pairs = _teacher_pairs(net, val, cfg, self.config.seed, "reflow-val")
        molecules = train + val
        result = train_reflow(net, _merge(pairs, val_pairs), molecules, cfg, [m.id for m in val])
        self.save_result("reflow", result, {"stage": "reflow", "train": cfg.to_dict()})
        return result


class DistillStage(Stage):
    name = "distill"
    inputs = ("dataset", "reflow")
    outputs = ("distill_pairs", "distill", "distill_curve")

    def run(self) -> TrainResult:
        train, val = self.split()
        cfg = self.config.stage_config("distill")
        teacher = self.load_model("reflow", ema=cfg.from_ema)
        pairs = generate_reflow_pairs(
            teacher,
            train + val,
            steps=cfg.teacher_steps,
            pairs_per_graph=cfg.pairs_per_graph,
            seed=substream_seed(self.config.seed, "distill-pairs"),
            workers=cfg.workers,
            teacher_id=self.run_dir.hash("reflow"),
        )
        pairs.save(self.run_dir["distill_pairs"])
        net = self.load_model("reflow", ema=cfg.from_ema)
        result = train_distill(net, pairs, train + val, cfg, [m.id for m in val])
        self.save_result("distill", result, {"stage": "distill", "train": cfg.to_dict()})
        return result


class SampleStage(Stage):
    """Euler samples of every available model at every evaluated step count"""

    name = "sample"
    inputs = ("dataset", "stage1")
    outputs = ("samples",)

    def molecules(self) -> list[Molecule]:
        train, val = self.split()
        return {"all": train + val, "train": train, "val": val}[self.config.eval_split] or train

    def run(self) -> dict[str, Any]:
        molecules = self.molecules()
        samples: dict[str, Any] = {}
        for stage in MODEL_STAGES:
            if not self.run_dir[stage].exists():
                self.log.info("no %s checkpoint: skipped", stage)
                continue
            net = self.load_model(stage)
            samples[stage] = {
                str(steps): {
                    mol.id: euler_sample(net, mol.graph, self.prior(mol), steps).endpoint.tolist()
                    for mol in molecules
                }
                for steps in self.config.eval_steps
            }
        with open(self.run_dir["samples"], "w") as f:
            json.dump({"schema_version": SCHEMA_VERSION, "samples": samples}, f, sort_keys=True)
        return samples

    def prior(self, mol: Molecule) -> torch.Tensor:
        """L = generated_factor * K shared prior draws per molecule"""
        n = self.config.generated_factor * mol.ensemble.size
        return sample_prior(mol.n_atoms, generator=substream(self.config.seed, f"sample:{mol.id}"), batch=(n,))


class EvalStage(Stage):
    """coverage/AMR per stage and step count plus transport diagnostics"""

    name = "eval"
    inputs = ("dataset", "samples")
    outputs = ("eval", "eval_table")

    def __init__(self, run: RunDirectory, config: PipelineConfig):
        super().__init__(run, config)
        self.delta = config.delta

    def settings(self) -> dict[str, Any]:
        return {"delta": self.delta}

    def run(self) -> dict[str, Any]:
        data = self.dataset()
        with open(self.run_dir["samples"]) as f:
            samples = json.load(f)["samples"]
        reports: dict[str, dict[str, MetricReport]] = {}
        for stage, by_steps in samples.items():
            reports[stage] = {}
            for steps, by_mol in by_steps.items():
                per_mol = [
                    coverage_amr(torch.as_tensor(coords, dtype=DTYPE), data.get(mol_id).ensemble.conformers, self.delta)
                    for mol_id, coords in by_mol.items()
                ]
                reports[stage][steps] = aggregate_reports(per_mol)
        diagnostics = self.diagnostics(SampleStage(self.run_dir, self.config).molecules())
        result = {
            "schema_version": SCHEMA_VERSION,
            "delta": self.delta,
            "reports": {s: {k: r.to_dict() for k, r in by.items()} for s, by in reports.items()},
            "diagnostics": diagnostics,
        }
        self.run_dir.files.write_json(self.run_dir["eval"], result)
        table = "\n\n".join(
            f"[{stage}]\n" + format_table({f"{k} steps": r for k, r in by.items()})
            for stage, by in reports.items()
        )
        self.run_dir["eval_table"].write_text(table + "\n")
        self.log.info("evaluation:\n%s", table)
        return result

    def diagnostics(self, molecules: Sequence[Molecule]) -> dict[str, Any]:
        """mean straightness at 100 steps and one-step endpoint RMSD to 100-step endpoints"""
        res: dict[str, Any] = {"straightness": {}, "one_step_rmsd": {}}
        nets = {s: self.load_model(s) for s in MODEL_STAGES if self.run_dir[s].exists()}
        gen = substream(self.config.seed, "diagnostics")
        draws = []
        for k in range(self.config.straightness_samples):
            mol = molecules[k % len(molecules)]
            draws.append((mol, sample_prior(mol.n_atoms, generator=gen)))
        for stage, net in nets.items():
            res["straightness"][stage] = sum(
                straightness(euler_sample(net, mol.graph, x0, STRAIGHTNESS_STEPS)) for mol, x0 in draws
            ) / len(draws)
        # the reflow model is the teacher of the one-step comparison
        if "reflow" in nets:
            teacher = nets["reflow"]
            for stage, net in nets.items():
                rmsd = [
                    float(aligned_rmsd(
                        euler_sample(net, mol.graph, x0, 1).endpoint,
                        euler_sample(teacher, mol.graph, x0, STRAIGHTNESS_STEPS).endpoint,
                    ))
                    for mol, x0 in draws
                ]
                res["one_step_rmsd"][stage] = sum(rmsd) / len(rmsd)
        return res


class ExportStage(Stage):
    """trajectories and loss curves as CSV/JSON for external plotting"""

    name = "plot-export"
    inputs = ("dataset", "stage1")
    outputs = ()

    STEPS = {"stage1": STRAIGHTNESS_STEPS, "reflow": STRAIGHTNESS_STEPS, "distill": 1}

    def run(self) -> Path:
        out = self.run_dir.files.makedirs(self.run_dir["plots"])
        molecules = list(self.dataset())[: self.config.export_molecules]
        for stage, steps in self.STEPS.items():
            if not self.run_dir[stage].exists():
                continue
            net = self.load_model(stage)
            for mol in molecules:
                gen = substream(self.config.seed, f"export:{mol.id}")
                x0 = sample_prior(mol.n_atoms, generator=gen, batch=(self.config.export_samples,))
                traj = euler_sample(net, mol.graph, x0, steps)
                traj.to_csv(out / f"{stage}_{mol.id}_{steps}.csv")
                traj.to_json(out / f"{stage}_{mol.id}_{steps}.json")
            curve = self.run_dir[f"{stage}_curve"]
            if curve.exists():
                self.run_dir.files.copy(curve, out / f"{stage}_loss.csv")
        self.log.info("exported plot data to %s", out)
        return out


STAGE_CLASSES: dict[str, type[Stage]] = {
    cls.name: cls
    for cls in (
        DataStage,
        TrainStage,
        ReflowPairsStage,
        ReflowStage,
        DistillStage,
        SampleStage,
        EvalStage,
        ExportStage,
    )
}


def _teacher_pairs(teacher, molecules: Sequence[Molecule], cfg: TrainConfig, seed: int, name: str) -> ReflowPairSet:
    if not molecules:
        return ReflowPairSet([])
    return generate_reflow_pairs(
        teacher, molecules, cfg.teacher_steps, cfg.pairs_per_graph, seed=substream_seed(seed, name), workers=cfg.workers
    )


def _merge(*sets: ReflowPairSet) -> ReflowPairSet:
    pairs = [p for s in sets for p in s]
    return ReflowPairSet(pairs, sets[0].metadata)


# ----------------------------------------------------------------------------
# ORCHESTRATION


class Pipeline:
    """runs the stages of one run directory in order"""

    def __init__(self, path: Union[str, Path], config: Optional[PipelineConfig] = None):
        self.log = logging.getLogger(self.__class__.__name__)
        self.run_dir = RunDirectory(path)
        self.config = self.run_dir.config(config)

    def __repr__(self):
        return f"<{self.__class__.__name__} {self.run_dir.path}>"

    @classmethod
    def from_config(cls, path: Union[str, Path], config_json: Optional[Union[str, Path]] = None) -> "Pipeline":
        """configures a pipeline from config.json (defaults when omitted)"""
        config = PipelineConfig.from_json(config_json) if config_json else None
        return cls(path, config)

    def stage(self, name: str) -> Stage:
        if name not in STAGE_CLASSES:
            raise PipelineError(f"unknown stage {name}; choose from {list(STAGE_CLASSES)}")
        return STAGE_CLASSES[name](self.run_dir, self.config)

    def run_stage(self, name: str) -> Any:
        return self.stage(name).process()

    def process(self, stages: Sequence[str] = STAGES) -> dict[str, Any]:
        """main automated process; returns each stage's result"""
        results = {}
        for name in stages:
            results[name] = self.run_stage(name)
        self.log.info("pipeline finished in %s", self.run_dir.path)
        return results

    def curves(self) -> dict[str, LossCurve]:
        return {
            s: LossCurve.from_csv(self.run_dir[f"{s}_curve"])
            for s in MODEL_STAGES
            if self.run_dir[f"{s}_curve"].exists()
        }
