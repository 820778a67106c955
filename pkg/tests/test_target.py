"""test_target.py

The closed-form averaged target, its building blocks and the Monte-Carlo
oracle.
"""
import math

import pytest
import torch
from scipy.spatial.transform import Rotation

from avgflow.errors import DomainError, NumericalError
from avgflow.graph import MoleculeGraph
from avgflow.interpolants import kabsch_rotation, random_rotation, sample_prior
from avgflow.oracle import instance_scale
from avgflow.target import (
    ConformerEnsemble,
    FlowQuery,
    MetricSpec,
    OracleField,
    avg_flow_target,
    averaged_velocity,
    harmonic_metric_apply,
    mc_avg_flow,
    weighted_logsumexp,
)

DTYPE = torch.float64


def chain(n: int) -> MoleculeGraph:
    return MoleculeGraph([0] * n, [(i, i + 1) for i in range(n - 1)])


@pytest.fixture
def gen():
    return torch.Generator().manual_seed(0)


@pytest.fixture
def ensemble(gen):
    return ConformerEnsemble(torch.randn(2, 6, 3, generator=gen, dtype=DTYPE), [1.0, 2.0])


def oracle_instance(gen, n_atoms: int, conformers: int, t: float, harmonic: bool = False):
    raw = torch.randn(conformers, n_atoms, 3, generator=gen, dtype=DTYPE)
    ens = ConformerEnsemble(raw)
    rms = torch.sqrt((ens.conformers**2).sum(-1).mean())
    ens = ConformerEnsemble(ens.conformers * instance_scale(t, harmonic) / rms)
    x1 = ens.conformers[0] @ random_rotation(gen).T
    x0 = sample_prior(n_atoms, generator=gen)
    return FlowQuery(t, (1 - t) * x0 + t * x1), ens


def test_logsumexp_pair():
    value = weighted_logsumexp(torch.tensor([0.0, 0.0]), torch.tensor([1.0, 1.0]))
    assert float(value) == pytest.approx(math.log(2), abs=1e-15)


def test_logsumexp_single_entry():
    assert float(weighted_logsumexp(torch.tensor([3.5]))) == pytest.approx(3.5, abs=1e-15)


def test_logsumexp_matches_naive(gen):
    v = torch.randn(10, generator=gen, dtype=DTYPE)
    w = torch.rand(10, generator=gen, dtype=DTYPE)
    naive = torch.log((w * torch.exp(v)).sum())
    assert float(weighted_logsumexp(v, w)) == pytest.approx(float(naive), abs=1e-12)


def test_logsumexp_is_stable():
    value = weighted_logsumexp(torch.tensor([-1e6, -1e6], dtype=DTYPE))
    assert float(value) == pytest.approx(-1e6 + math.log(2), abs=1e-9)


def test_logsumexp_ignores_zero_weights():
    value = weighted_logsumexp(torch.tensor([1.0, 1e300], dtype=DTYPE), torch.tensor([1.0, 0.0]))
    assert float(value) == pytest.approx(1.0)


def test_logsumexp_rejects_zero_weights():
    with pytest.raises(DomainError):
        weighted_logsumexp(torch.tensor([1.0, 2.0]), torch.tensor([0.0, 0.0]))


def test_ensemble_validation():
    with pytest.raises(DomainError):
        ConformerEnsemble(torch.zeros(0, 3, 3))
    with pytest.raises(DomainError):
        ConformerEnsemble(torch.zeros(2, 3, 3), [1.0, -1.0])
    with pytest.raises(NumericalError):
        ConformerEnsemble(torch.full((1, 3, 3), float("nan")))


def test_ensemble_centers_and_truncates(gen):
    conformers = torch.randn(4, 5, 3, generator=gen, dtype=DTYPE) + 10.0
    ens = ConformerEnsemble(conformers, [1.0, 4.0, 2.0, 3.0], max_conformers=2)
    assert ens.size == 2
    assert ens.weights.tolist() == [4.0, 3.0]
    assert float(ens.conformers.mean(dim=1).abs().max()) < 1e-12


def test_query_rejects_time_one():
    with pytest.raises(DomainError):
        FlowQuery(1.0, torch.zeros(3, 3))


def test_zero_query_has_zero_target(ensemble):
    u = avg_flow_target(FlowQuery(0.3, torch.zeros(6, 3)), ensemble, MetricSpec.euclidean())
    assert float(u.abs().max()) < 1e-10


def test_collapsed_conformer(gen):
    ens = ConformerEnsemble(torch.zeros(1, 5, 3, dtype=DTYPE))
    query = FlowQuery(0.4, sample_prior(5, generator=gen))
    u = avg_flow_target(query, ens, MetricSpec.euclidean())
    torch.testing.assert_close(u, -query.x / 0.6, rtol=1e-12, atol=1e-12)


def test_rotational_equivariance(gen, ensemble):
    x = sample_prior(6, generator=gen)
    Q = torch.as_tensor(Rotation.random(random_state=4).as_matrix(), dtype=DTYPE)
    metric = MetricSpec.euclidean()
    u = avg_flow_target(FlowQuery(0.5, x), ensemble, metric)
    u_rot = avg_flow_target(FlowQuery(0.5, x @ Q.T), ensemble, metric)
    torch.testing.assert_close(u_rot, u @ Q.T, rtol=1e-8, atol=1e-8)


def test_harmonic_rotational_equivariance(gen, ensemble):
    x = sample_prior(6, generator=gen)
    Q = torch.as_tensor(Rotation.random(random_state=5).as_matrix(), dtype=DTYPE)
    metric = MetricSpec.harmonic(chain(6))
    u = avg_flow_target(FlowQuery(0.5, x), ensemble, metric)
    u_rot = avg_flow_target(FlowQuery(0.5, x @ Q.T), ensemble, metric)
    torch.testing.assert_close(u_rot, u @ Q.T, rtol=1e-8, atol=1e-8)


def test_weight_scaling_invariance(gen, ensemble):
    query = FlowQuery(0.6, sample_prior(6, generator=gen))
    scaled = ConformerEnsemble(ensemble.conformers, 3.0 * ensemble.weights)
    metric = MetricSpec.euclidean()
    torch.testing.assert_close(
        avg_flow_target(query, scaled, metric),
        avg_flow_target(query, ensemble, metric),
        rtol=1e-12,
        atol=1e-12,
    )


def test_zero_weight_conformer_is_ignored(gen, ensemble):
    query = FlowQuery(0.6, sample_prior(6, generator=gen))
    padded = ConformerEnsemble(
        torch.cat([ensemble.conformers[:1], ensemble.conformers[1:] * 5]), [1.0, 0.0]
    )
    metric = MetricSpec.euclidean()
    torch.testing.assert_close(
        avg_flow_target(query, padded, metric),
        avg_flow_target(query, ensemble.select(0), metric),
        rtol=1e-12,
        atol=1e-12,
    )


def test_late_time_aligns_to_conformer(gen):
    conformer = torch.randn(1, 6, 3, generator=gen, dtype=DTYPE)
    ens = ConformerEnsemble(conformer)
    x = sample_prior(6, generator=gen)
    t = 0.999
    u = avg_flow_target(FlowQuery(t, x), ens, MetricSpec.euclidean())
    avg = (1 - t) * u + x
    R = kabsch_rotation(x, ens.conformers[0])
    torch.testing.assert_close(avg, ens.conformers[0] @ R.T, rtol=0, atol=1e-2)


def test_harmonic_apply_on_path():
    g = MoleculeGraph([0, 0], [(0, 1)])
    assert float(harmonic_metric_apply(g, [1.0, 1.0], [1.0, 1.0], 1.0)) == 0.0
    assert float(harmonic_metric_apply(g, [1.0, -1.0], [1.0, -1.0], 1.0)) == pytest.approx(4.0)


def test_harmonic_apply_matches_dense(gen):
    g = chain(5)
    u = torch.randn(5, generator=gen, dtype=DTYPE)
    v = torch.randn(5, generator=gen, dtype=DTYPE)
    dense = u @ g.laplacian() @ v / 0.25
    assert float(harmonic_metric_apply(g, u, v, 0.5)) == pytest.approx(float(dense), abs=1e-12)


def test_identity_form_matches_euclidean(gen, ensemble):
    query = FlowQuery(0.5, sample_prior(6, generator=gen))
    identity = MetricSpec(MetricSpec.HARMONIC, graph=chain(6), form=torch.eye(6, dtype=DTYPE))
    torch.testing.assert_close(
        avg_flow_target(query, ensemble, identity),
        avg_flow_target(query, ensemble, MetricSpec.euclidean()),
        rtol=1e-12,
        atol=1e-12,
    )


def test_harmonic_metric_checks_atom_count(gen, ensemble):
    query = FlowQuery(0.5, sample_prior(6, generator=gen))
    with pytest.raises(DomainError):
        avg_flow_target(query, ensemble, MetricSpec.harmonic(chain(4)))


def test_metric_validation():
    with pytest.raises(DomainError):
        MetricSpec("riemannian")
    with pytest.raises(DomainError):
        MetricSpec(MetricSpec.HARMONIC)
    with pytest.raises(DomainError):
        MetricSpec(sigma0=0.0)


def test_batched_velocity_matches_single(gen, ensemble):
    x = sample_prior(6, generator=gen, batch=(3,))
    t = torch.tensor([0.1, 0.5, 0.9], dtype=DTYPE)
    metric = MetricSpec.euclidean()
    batched = averaged_velocity(x, ensemble.conformers, t, metric, ensemble.weights)
    for i in range(3):
        single = avg_flow_target(FlowQuery(float(t[i]), x[i]), ensemble, metric)
        torch.testing.assert_close(batched[i], single, rtol=1e-10, atol=1e-10)


def test_oracle_field_calls_like_a_network(gen, ensemble):
    field = OracleField(ensemble)
    x = sample_prior(6, generator=gen)
    u = field(None, x, 0.5)
    torch.testing.assert_close(u, avg_flow_target(FlowQuery(0.5, x), ensemble, field.metric))


def test_monte_carlo_agreement(gen):
    query, ens = oracle_instance(gen, 6, 2, 0.5)
    metric = MetricSpec.euclidean()
    exact = avg_flow_target(query, ens, metric)
    estimate = mc_avg_flow(query, ens, metric, 200_000, seed=1)
    z = (exact - estimate.velocity).abs() / estimate.stderr
    assert float(z.max()) < 4.5


def test_monte_carlo_harmonic_agreement(gen):
    query, ens = oracle_instance(gen, 5, 2, 0.2, harmonic=True)
    metric = MetricSpec.harmonic(chain(5))
    exact = avg_flow_target(query, ens, metric)
    estimate = mc_avg_flow(query, ens, metric, 200_000, seed=2)
    z = (exact - estimate.velocity).abs() / estimate.stderr
    assert float(z.max()) < 4.5


def test_monte_carlo_error_shrinks(gen):
    query, ens = oracle_instance(gen, 6, 2, 0.5)
    metric = MetricSpec.euclidean()
    small = mc_avg_flow(query, ens, metric, 50_000, seed=3)
    large = mc_avg_flow(query, ens, metric, 100_000, seed=4)
    ratio = float(small.stderr.mean() / large.stderr.mean())
    assert 1.2 < ratio < 1.7


def test_monte_carlo_zero_query(ensemble):
    estimate = mc_avg_flow(FlowQuery(0.3, torch.zeros(6, 3)), ensemble, MetricSpec.euclidean(), 20_000, 0)
    assert bool((estimate.velocity.abs() <= 5 * estimate.stderr + 1e-12).all())


def test_monte_carlo_is_deterministic(gen, ensemble):
    query = FlowQuery(0.3, sample_prior(6, generator=gen))
    metric = MetricSpec.euclidean()
    a = mc_avg_flow(query, ensemble, metric, 2000, seed=9)
    b = mc_avg_flow(query, ensemble, metric, 2000, seed=9)
    assert torch.equal(a.velocity, b.velocity)


def test_monte_carlo_rejects_few_samples(ensemble):
    with pytest.raises(DomainError):
        mc_avg_flow(FlowQuery(0.3, torch.zeros(6, 3)), ensemble, MetricSpec.euclidean(), 999, 0)


def test_monte_carlo_low_ess(gen):
    ens = ConformerEnsemble(50 * torch.randn(1, 6, 3, generator=gen, dtype=DTYPE))
    x = 0.9 * ens.conformers[0]
    with pytest.raises(NumericalError):
        mc_avg_flow(FlowQuery(0.9, x), ens, MetricSpec.euclidean(), 1000, 0)
