__version__ = "0.1.0"

from .dataset import DatasetFile, gen_synthetic_dataset
from .evaluation import MetricReport, coverage_amr, rmsd_kabsch
from .model import VectorFieldNet, load_checkpoint, save_checkpoint
from .pipeline import Pipeline, PipelineConfig
from .target import ConformerEnsemble, FlowQuery, MetricSpec, avg_flow_target, mc_avg_flow


__all__ = [
    "ConformerEnsemble",
    "DatasetFile",
    "FlowQuery",
    "MetricReport",
    "MetricSpec",
    "Pipeline",
    "PipelineConfig",
    "VectorFieldNet",
    "avg_flow_target",
    "coverage_amr",
    "gen_synthetic_dataset",
    "load_checkpoint",
    "mc_avg_flow",
    "rmsd_kabsch",
    "save_checkpoint",
]
