#!/usr/bin/env python3
"""
% python3 -m avgflow

"""
import sys
from dataclasses import replace
from pathlib import Path

from . import oracle, pipeline
from .cli import Commander, arg, option, option_group
from .config import (
    BENCH_GRID,
    BENCH_NODES,
    DELTA_DRUGS,
    DELTA_QM9,
    ORACLE_SAMPLES,
    ORACLE_SIGMAS,
    QUADRATURE_RULES,
)
from .dataset import DatasetFile, gen_synthetic_dataset
from .so3 import Quadrature

EXIT_ORACLE_FAILED = 2
THRESHOLDS = {"drugs": DELTA_DRUGS, "qm9": DELTA_QM9}

run_dir_arg = arg("run_dir", type=str, help="path to run directory")
config_option = option("--config", "-c", type=str, help="path to pipeline config.json")
quad_nodes_option = option("--quad-nodes", type=int, help="quadrature nodes (trapezoid total, gauss per panel)")

# ----------------------------------------------------------------------------
# Commandline interface


class Application(Commander):
    """avgflow: rotation-averaged flow matching for conformer generation."""

    name = "avgflow"
    epilog = ""
    version = "0.1.0"
    default_args = ["--help"]

    def _pipeline(self, args, seed=None, dataset=None, **train_overrides) -> pipeline.Pipeline:
        """open a run directory, applying --config and command-line overrides"""
        config = None
        if getattr(args, "config", None):
            config = pipeline.PipelineConfig.from_json(args.config)
        top = {k: v for k, v in {"seed": seed, "dataset": dataset}.items() if v is not None}
        overrides = {k: v for k, v in train_overrides.items() if v is not None}
        if top or overrides:
            if config is None:
                run = pipeline.RunDirectory(args.run_dir)
                config = run.config() if run["config"].exists() else pipeline.PipelineConfig()
            config = replace(config, train=replace(config.train, **overrides), **top)
        return pipeline.Pipeline(args.run_dir, config)

    # ----------------------------------------------------------------------------
    # data and config

    @option("--seed", "-s", type=int, default=0, help="dataset seed")
    @option("--conformers", type=int, nargs=2, default=[1, 4], help="min and max conformers per molecule")
    @option("--atoms", type=int, nargs=2, default=[5, 16], help="min and max atoms per molecule")
    @option("--n-molecules", "-n", type=int, default=32, help="number of molecules")
    @arg("path", type=str, help="output dataset.json")
    def do_gen_data(self, args):
        """generate a synthetic conformer dataset."""
        data = gen_synthetic_dataset(args.n_molecules, args.atoms, args.conformers, args.seed)
        data.save(args.path)

    @option("--seed", "-s", type=int, default=0, help="run seed")
    @arg("path", type=str, nargs="?", default="avgflow.json", help="output config.json")
    def do_gen_config(self, args):
        """generate a sample pipeline config.json."""
        pipeline.Generator(args.path).generate_config(seed=args.seed)

    # ----------------------------------------------------------------------------
    # checks

    @quad_nodes_option
    @option("--quadrature", choices=QUADRATURE_RULES, default="gauss", help="closed-form quadrature rule")
    @option("--out", "-o", type=str, help="write the report as json")
    @option("--workers", "-w", type=int, default=1, help="worker threads")
    @option("--tamper", action="store_true", help="inflate the closed-form target (negative control)")
    @option("--sigmas", type=float, default=ORACLE_SIGMAS, help="pass threshold in standard errors")
    @option("--seed", "-s", type=int, default=0, help="suite seed")
    @option("--samples", type=int, default=ORACLE_SAMPLES, help="Monte-Carlo rotations per instance")
    @option("--instances", "-i", type=int, default=20, help="number of instances")
    @option("--dataset", "-d", type=str, help="dataset.json (default: synthetic molecules)")
    def do_oracle_check(self, args):
        """check the closed-form target against the Monte-Carlo oracle."""
        molecules = list(DatasetFile.load(args.dataset)) if args.dataset else None
        check = oracle.OracleCheck(
            molecules,
            args.instances,
            args.samples,
            args.seed,
            args.sigmas,
            args.tamper,
            args.workers,
            Quadrature(args.quadrature, args.quad_nodes),
        )
        report = check.process()
        print(report.summary())
        if args.out:
            report.to_json(args.out)
        return None if report.passed else EXIT_ORACLE_FAILED

    @quad_nodes_option
    @option("--quadrature", choices=QUADRATURE_RULES, default="trapezoid", help="target quadrature rule")
    @option("--out", "-o", type=str, default="bench_target.csv", help="output csv")
    @option("--repeats", "-r", type=int, default=1, help="timed repeats per cell")
    @option("--nodes", type=int, default=BENCH_NODES, help="atoms per graph")
    @option("--conformers", type=int, nargs="+", default=BENCH_GRID, help="conformer counts")
    @option("--batch-sizes", type=int, nargs="+", default=BENCH_GRID, help="batch sizes")
    def do_bench_target(self, args):
        """time the batched averaged target over a batch x conformers grid."""
        bench = oracle.TargetBenchmark(
            args.batch_sizes,
            args.conformers,
            args.nodes,
            args.repeats,
            quadrature=Quadrature(args.quadrature, args.quad_nodes),
        )
        bench.process()
        bench.to_csv(args.out)
        print(bench.table())

    # ----------------------------------------------------------------------------
    # stages

    @option("--seed", "-s", type=int, help="run seed")
    @option("--epochs", type=int, help="stage-1 epochs")
    @option("--objective", choices=["avgflow", "condot", "kabschot"], help="stage-1 objective")
    @option("--dataset", "-d", type=str, help="dataset.json (default: bundled synthetic set)")
    @option_group(config_option, run_dir_arg)
    def do_train(self, args):
        """train the stage-1 vector field."""
        pipe = self._pipeline(
            args, seed=args.seed, dataset=args.dataset, objective=args.objective, epochs=args.epochs
        )
        if not pipe.run_dir["dataset"].exists():
            pipe.run_stage("data")
        pipe.run_stage("train")

    @option_group(config_option, run_dir_arg)
    def do_reflow_pairs(self, args):
        """generate reflow pairs with the stage-1 model."""
        self._pipeline(args).run_stage("reflow-pairs")

    @option_group(config_option, run_dir_arg)
    def do_reflow(self, args):
        """fine-tune the stage-1 model on reflow pairs."""
        self._pipeline(args).run_stage("reflow")

    @option_group(config_option, run_dir_arg)
    def do_distill(self, args):
        """distill the reflow model into a one-step model."""
        self._pipeline(args).run_stage("distill")

    @option_group(config_option, run_dir_arg)
    def do_sample(self, args):
        """sample conformers from every trained model."""
        self._pipeline(args).run_stage("sample")

    @option("--threshold", choices=sorted(THRESHOLDS), help="coverage threshold preset (drugs 0.75, qm9 0.5)")
    @option_group(config_option, run_dir_arg)
    def do_eval(self, args):
        """evaluate coverage and AMR of the sampled conformers."""
        pipe = self._pipeline(args)
        stage = pipe.stage("eval")
        if args.threshold:
            stage.delta = THRESHOLDS[args.threshold]
        stage.process()
        print(pipe.run_dir["eval_table"].read_text())

    @option_group(config_option, run_dir_arg)
    def do_plot_export(self, args):
        """export trajectories and loss curves for plotting."""
        path = self._pipeline(args).run_stage("plot-export")
        print(Path(path))

    @option("--stages", nargs="+", choices=pipeline.STAGES, default=list(pipeline.STAGES), help="stages to run")
    @option_group(config_option, run_dir_arg)
    def do_pipeline(self, args):
        """run train, reflow, distill, sample and eval in order."""
        pipe = self._pipeline(args)
        pipe.process(args.stages)
        if pipe.run_dir["eval_table"].exists():
            print(pipe.run_dir["eval_table"].read_text())


def commandline():
    sys.exit(Application().cmdline())


if __name__ == "__main__":
    commandline()
