"""test_training.py

Losses, time samplers, EMA, schedules and short runs of the three stages.
"""
import math
import tempfile
from pathlib import Path

import pytest
import torch
from torch import nn

from avgflow.dataset import bundled_dataset, gen_synthetic_dataset
from avgflow.errors import ConfigError, DatasetError, DomainError, TrainingDivergedError
from avgflow.interpolants import sample_prior
from avgflow.model import ModelConfig, VectorFieldNet
from avgflow.target import ConformerEnsemble, MetricSpec, OracleField, averaged_velocity
from avgflow.training import (
    ExponentialMovingAverage,
    LossCurve,
    ReflowPairSet,
    TrainConfig,
    avgflow_loss,
    distill_loss,
    exponential_t_cdf,
    generate_reflow_pairs,
    lr_factor,
    parameter_gradient,
    reflow_loss,
    sample_t,
    stage_config,
    train_distill,
    train_reflow,
    train_stage1,
)

DTYPE = torch.float64

SMALL = ModelConfig(hidden_width=8, n_layers=1, time_embed_width=4)


def decay(graph, x, t):
    return -x


def quick(**overrides) -> TrainConfig:
    settings = dict(epochs=2, batch_size=2, samples_per_molecule=2, warmup_steps=1, val_fraction=0.34)
    settings.update(overrides)
    return TrainConfig(**settings)


@pytest.fixture(scope="module")
def molecules():
    return list(gen_synthetic_dataset(3, atoms_range=(5, 6), conformers_range=(1, 2), seed=4))


@pytest.fixture
def workdir():
    with tempfile.TemporaryDirectory() as tmp:
        yield Path(tmp)


@pytest.fixture
def problem():
    gen = torch.Generator().manual_seed(0)
    ensemble = ConformerEnsemble(torch.randn(2, 5, 3, generator=gen, dtype=DTYPE))
    x_t = sample_prior(5, generator=gen, batch=(4,))
    t = torch.tensor([0.1, 0.3, 0.6, 0.9], dtype=DTYPE)
    return ensemble, MetricSpec.euclidean(), x_t, t


# losses


def test_oracle_network_has_zero_loss(problem):
    ensemble, metric, x_t, t = problem
    loss = avgflow_loss(OracleField(ensemble, metric), None, ensemble, metric, t, x_t)
    assert float(loss) < 1e-20


def test_untrained_network_loss_is_target_norm(molecules, problem):
    _, metric, _, t = problem
    mol = molecules[0]
    ensemble = mol.ensemble
    x_t = sample_prior(mol.n_atoms, seed=1, batch=(4,))
    net = VectorFieldNet(SMALL)
    loss = avgflow_loss(net, mol.graph, ensemble, metric, t, x_t)
    u = averaged_velocity(x_t, ensemble.conformers, t, metric, ensemble.weights)
    assert float(loss) == pytest.approx(float((u**2).sum(-1).mean()), rel=1e-12)


def test_distill_is_reflow_at_time_zero():
    x0 = sample_prior(5, seed=0, batch=(3,))
    x1 = sample_prior(5, seed=1, batch=(3,))
    net = lambda graph, x, t: 0.5 * x  # noqa: E731
    assert float(distill_loss(net, None, x0, x1)) == float(reflow_loss(net, None, x0, x1, torch.zeros(3)))


def test_reflow_loss_vanishes_on_the_chord_velocity():
    x0 = sample_prior(5, seed=0)
    x1 = sample_prior(5, seed=1)

    def net(graph, x, t):
        return x1 - x0

    assert float(reflow_loss(net, None, x0, x1, 0.4)) == 0.0


def test_parameter_gradient_matches_backward(molecules, problem):
    _, metric, _, t = problem
    mol = molecules[0]
    net = VectorFieldNet(SMALL)
    x_t = sample_prior(mol.n_atoms, seed=2, batch=(4,))
    flat = parameter_gradient(net, avgflow_loss(net, mol.graph, mol.ensemble, metric, t, x_t))
    avgflow_loss(net, mol.graph, mol.ensemble, metric, t, x_t).backward()
    manual = torch.cat([p.grad.reshape(-1) for p in net.parameters()])
    torch.testing.assert_close(flat, manual)
    assert float(flat.abs().sum()) > 0


# time samplers


def test_uniform_times():
    t = sample_t("uniform", size=(10_000,), seed=0)
    assert float(t.min()) >= 0 and float(t.max()) < 1
    assert torch.equal(t, sample_t("uniform", size=(10_000,), seed=0))


def test_exponential_times_match_density():
    lam = -1.2
    t = sample_t("exponential", lam, size=(100_000,), seed=1)
    assert float(t.min()) >= 0 and float(t.max()) <= 1
    expected = (math.exp(lam) * (lam - 1) + 1) / (lam * math.expm1(lam))
    assert float(t.mean()) == pytest.approx(expected, abs=5e-3)
    for q in (0.1, 0.3, 0.5, 0.7, 0.9):
        empirical = float((t <= q).to(DTYPE).mean())
        assert empirical == pytest.approx(float(exponential_t_cdf(q, lam)), abs=1e-2)


def test_time_sampler_validation():
    with pytest.raises(DomainError):
        sample_t("beta", size=(3,))
    with pytest.raises(DomainError):
        sample_t("exponential", 0.0, size=(3,))


# EMA and schedules


def test_ema_decays_geometrically():
    net = nn.Linear(2, 1, dtype=DTYPE)
    with torch.no_grad():
        net.weight.fill_(1.0)
    ema = ExponentialMovingAverage(net, decay=0.9, warmup=False)
    with torch.no_grad():
        net.weight.fill_(0.0)
    for _ in range(5):
        ema.update(net)
    torch.testing.assert_close(ema.shadow["weight"], torch.full((1, 2), 0.9**5, dtype=DTYPE))


def test_ema_default_decay_is_constant():
    net = nn.Linear(2, 1, dtype=DTYPE)
    ema = ExponentialMovingAverage(net)
    assert ema.current_decay() == 0.999
    for _ in range(3):
        ema.update(net)
    assert ema.current_decay() == 0.999
    assert TrainConfig().ema_warmup is False
    assert all(not TrainConfig.for_stage(stage).ema_warmup for stage in ("avgflow", "reflow", "distill"))


def test_ema_warmup():
    ema = ExponentialMovingAverage(nn.Linear(2, 1), decay=0.999, warmup=True)
    assert ema.current_decay() == pytest.approx(0.1)
    ema.num_updates = 10_000
    assert ema.current_decay() == 0.999


def test_ema_copy_to():
    a, b = nn.Linear(2, 1), nn.Linear(2, 1)
    ExponentialMovingAverage(a).copy_to(b)
    assert torch.equal(a.weight, b.weight)


def test_cosine_schedule():
    config = TrainConfig(learning_rate=1e-3, init_lr=1e-6, end_lr=1e-5, warmup_steps=10)
    factor = lr_factor(config, total_steps=110, steps_per_epoch=11)
    assert factor(0) * 1e-3 == pytest.approx(1e-6)
    assert factor(10) == pytest.approx(1.0)
    assert factor(110) * 1e-3 == pytest.approx(1e-5)
    assert factor(60) < factor(30)


def test_piecewise_schedule():
    config = TrainConfig(schedule="piecewise", milestones=[2, 4], decay_factor=0.5, warmup_steps=0)
    factor = lr_factor(config, total_steps=60, steps_per_epoch=10)
    assert [factor(s) for s in (0, 19, 20, 40)] == [1.0, 1.0, 0.5, 0.25]


# configuration


def test_stage_defaults():
    reflow = TrainConfig.for_stage("reflow")
    assert reflow.learning_rate == 1e-4 and reflow.t_sampler == "exponential"
    assert TrainConfig.for_stage("distill").learning_rate == 5e-5
    assert stage_config(TrainConfig(epochs=3), "reflow").epochs == 3
    with pytest.raises(ConfigError):
        TrainConfig.for_stage("pretrain")


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(objective="score")
    with pytest.raises(ConfigError):
        TrainConfig(ema_decay=1.0)
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"epochs": 3, "momentum": 0.9})


def test_config_json(workdir):
    config = TrainConfig(epochs=7, milestones=[2])
    config.to_json(workdir / "train.json")
    assert TrainConfig.from_json(workdir / "train.json") == config
    with pytest.raises(ConfigError):
        TrainConfig.from_json(workdir / "missing.json")


def test_loss_curve_csv(workdir):
    curve = LossCurve()
    curve.append(0, None, 1.5, 1.5, 1e-6)
    curve.append(1, 0.7, 0.9, 0.9, 2e-4)
    curve.to_csv(workdir / "loss.csv")
    loaded = LossCurve.from_csv(workdir / "loss.csv")
    assert loaded.rows == curve.rows


# stage 1


def test_stage1_run(molecules):
    result = train_stage1(molecules, quick(), VectorFieldNet(SMALL))
    assert [row["epoch"] for row in result.curve.rows] == [0, 1, 2]
    assert result.curve.initial["train_loss"] is None
    assert all(math.isfinite(row["val_loss"]) for row in result.curve.rows)
    assert set(result.ema_state) == set(result.net.state_dict())


def test_stage1_is_deterministic_across_workers(molecules):
    a = train_stage1(molecules, quick(workers=1), VectorFieldNet(SMALL))
    b = train_stage1(molecules, quick(workers=2), VectorFieldNet(SMALL))
    assert torch.equal(a.net.flat_parameters(), b.net.flat_parameters())
    assert a.curve.rows == b.curve.rows


@pytest.mark.parametrize("objective", ["condot", "kabschot"])
def test_stage1_baselines(molecules, objective):
    result = train_stage1(molecules, quick(objective=objective, epochs=1), VectorFieldNet(SMALL))
    assert math.isfinite(result.curve.final["train_loss"])
    assert math.isfinite(result.curve.final["val_field_error"])


def test_stage1_integrated_interpolant(molecules):
    config = quick(interpolant="integrated", interpolant_steps=2, epochs=1)
    result = train_stage1(molecules, config, VectorFieldNet(SMALL))
    assert math.isfinite(result.curve.final["train_loss"])


def test_stage1_harmonic_full_ensemble(molecules):
    config = quick(metric="harmonic", full_ensemble=True, max_conformers=1, epochs=1)
    result = train_stage1(molecules, config, VectorFieldNet(SMALL))
    assert math.isfinite(result.curve.final["train_loss"])


def test_divergence_is_reported(molecules):
    config = quick(learning_rate=10.0, schedule="constant", warmup_steps=0, divergence_factor=1.5, epochs=3)
    with pytest.raises(TrainingDivergedError) as info:
        train_stage1(molecules, config, VectorFieldNet(SMALL))
    assert info.value.diagnostics["stage"] == "avgflow"
    assert "epoch" in info.value.to_dict()["diagnostics"]


def test_empty_dataset():
    with pytest.raises(DomainError):
        train_stage1([], quick())


# reflow pairs, reflow and distillation


def test_reflow_pairs_follow_the_teacher(molecules):
    pairs = generate_reflow_pairs(decay, molecules, steps=5, pairs_per_graph=3, seed=0)
    assert len(pairs) == 9
    for pair in pairs:
        torch.testing.assert_close(pair.x1, 0.8**5 * pair.x0)


def test_reflow_pairs_are_deterministic(molecules):
    a = generate_reflow_pairs(decay, molecules, steps=3, pairs_per_graph=2, seed=1)
    b = generate_reflow_pairs(decay, molecules, steps=3, pairs_per_graph=2, seed=1, workers=2)
    assert [p.graph_id for p in a] == [p.graph_id for p in b]
    assert all(torch.equal(p.x0, q.x0) and torch.equal(p.x1, q.x1) for p, q in zip(a, b))


def test_reflow_pair_file(molecules, workdir):
    pairs = generate_reflow_pairs(decay, molecules, steps=2, pairs_per_graph=2, seed=0)
    pairs.save(workdir / "pairs.json")
    loaded = ReflowPairSet.load(workdir / "pairs.json")
    assert loaded.metadata == pairs.metadata
    assert all(torch.equal(p.x1, q.x1) for p, q in zip(loaded, pairs))
    (workdir / "old.json").write_text('{"schema_version": 0, "pairs": []}')
    with pytest.raises(DatasetError):
        ReflowPairSet.load(workdir / "old.json")


def test_reflow_and_distill_runs(molecules):
    pairs = generate_reflow_pairs(decay, molecules, steps=2, pairs_per_graph=4, seed=0)
    val_ids = [molecules[-1].id]
    config = stage_config(quick(), "reflow")
    reflow = train_reflow(VectorFieldNet(SMALL), pairs, molecules, config, val_ids)
    assert math.isfinite(reflow.curve.final["val_loss"])
    distill = train_distill(reflow.net, pairs, molecules, stage_config(quick(), "distill"), val_ids)
    assert [row["epoch"] for row in distill.curve.rows] == [0, 1, 2]
    assert math.isfinite(distill.curve.final["train_loss"])


def test_reflow_without_validation(molecules):
    pairs = generate_reflow_pairs(decay, molecules, steps=2, pairs_per_graph=2, seed=0)
    result = train_reflow(VectorFieldNet(SMALL), pairs, molecules, quick(epochs=1))
    assert math.isnan(result.curve.initial["val_loss"])


def test_reflow_rejects_unknown_molecules(molecules):
    pairs = generate_reflow_pairs(decay, molecules, steps=2, pairs_per_graph=2, seed=0)
    with pytest.raises(DomainError):
        train_reflow(VectorFieldNet(SMALL), pairs, molecules[:1], quick())


def test_small_lambda_is_nearly_uniform():
    t = sample_t("exponential", 1e-6, size=(100_000,), seed=3)
    grid = torch.linspace(0, 1, 101, dtype=DTYPE)
    empirical = (t[:, None] <= grid).to(DTYPE).mean(0)
    assert float((empirical - grid).abs().max()) < 0.01


def test_exponential_times_favour_early_t():
    t = sample_t("exponential", -1.2, size=(100_000,), seed=4)
    fraction = float((t < 0.5).to(DTYPE).mean())
    assert fraction > 0.5
    assert fraction == pytest.approx(float(exponential_t_cdf(0.5, -1.2)), abs=1e-2)


def test_identical_pairs_give_zero_reflow_loss(molecules):
    pairs = generate_reflow_pairs(lambda graph, x, t: torch.zeros_like(x), molecules, steps=3, pairs_per_graph=2)
    result = train_reflow(VectorFieldNet(SMALL), pairs, molecules, quick(epochs=1), [molecules[-1].id])
    assert result.curve.initial["val_loss"] == 0.0
    assert result.curve.final["train_loss"] == 0.0


@pytest.mark.slow
def test_distillation_memorizes_one_pair(molecules):
    pairs = generate_reflow_pairs(decay, molecules[:1], steps=4, pairs_per_graph=1, seed=0)
    config = quick(epochs=800, batch_size=1, samples_per_molecule=1, learning_rate=1e-2, end_lr=1e-6,
                   warmup_steps=10)
    net = VectorFieldNet(ModelConfig(hidden_width=16, n_layers=2, time_embed_width=4))
    result = train_distill(net, pairs, molecules[:1], config)
    pair = next(iter(pairs))
    endpoint = pair.x0 + result.net(molecules[0].graph, pair.x0, 0.0)
    assert float((endpoint - pair.x1).abs().max()) < 1e-3


@pytest.mark.slow
def test_averaged_objective_beats_conditional_ot():
    molecules = list(bundled_dataset())
    errors = {}
    for objective in ("avgflow", "condot"):
        config = TrainConfig(objective=objective, epochs=30, seed=0)
        result = train_stage1(molecules, config, VectorFieldNet(seed=0))
        errors[objective] = result.curve.final["val_field_error"]
    assert errors["avgflow"] <= errors["condot"], errors
