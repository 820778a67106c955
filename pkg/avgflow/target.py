"""target: the rotation- and conformer-averaged flow field and its Monte-Carlo oracle.

For a noisy point x at time t and a conformer ensemble {x_k, q_k} the averaged
target is

    u_t(x) = (E[x_k R^T] - x) / (1 - t)

where the expectation runs over the posterior on (conformer, rotation)

    p(k, R | x) ~ q_k exp(-0.5 |x - t x_k R^T|^2_M)

and |.|_M is the Euclidean or graph-Laplacian form scaled by 1/sigma_t^2.
Expanding the square gives per-conformer terms logcF(F_k) - c_k with
F_k = t x_k^T M x, so that the expectation is the gradient of the weighted
log-sum-exp of those terms with respect to a perturbation alpha of F_k.
"""
import logging
from typing import Any, Callable, NamedTuple, Optional, Union

import numpy as np
import torch
from scipy.spatial.transform import Rotation
from torch import Tensor

from .config import DTYPE, SIGMA0, SIGMA1, T_CLAMP
from .errors import DomainError, NumericalError
from .graph import MoleculeGraph
from .so3 import DEFAULT_QUADRATURE, Quadrature, logcF

log = logging.getLogger(__name__)

MIN_MC_SAMPLES = 1000
MIN_ESS = 10.0
CENTER_TOL = 1e-9


def _as_tensor(value) -> Tensor:
    return torch.as_tensor(value, dtype=DTYPE)


def center(x) -> Tensor:
    """subtract the per-structure centroid from (..., N, 3) coordinates"""
    x = _as_tensor(x)
    return x - x.mean(dim=-2, keepdim=True)


# ----------------------------------------------------------------------------
# DOMAIN TYPES


class ConformerEnsemble:
    """centered conformers of one molecule with nonnegative weights"""

    def __init__(self, conformers, weights=None, max_conformers: Optional[int] = None):
        conformers = _as_tensor(conformers)
        if conformers.ndim == 2:
            conformers = conformers.unsqueeze(0)
        if conformers.ndim != 3 or conformers.shape[-1] != 3:
            raise DomainError(f"conformers must be (K, N, 3), got {tuple(conformers.shape)}")
        if conformers.shape[0] < 1:
            raise DomainError("ensemble is empty")
        if not bool(torch.isfinite(conformers).all()):
            raise NumericalError("ensemble has non-finite coordinates")
        if weights is None:
            weights = torch.ones(conformers.shape[0], dtype=DTYPE)
        weights = _as_tensor(weights).reshape(-1)
        if weights.shape[0] != conformers.shape[0]:
            raise DomainError("one weight per conformer is required")
        if bool((weights < 0).any()) or not bool((weights > 0).any()):
            raise DomainError("weights must be nonnegative with at least one positive")
        if max_conformers is not None and conformers.shape[0] > max_conformers:
            # stable sort keeps the original order among equal weights
            keep = torch.sort(torch.argsort(-weights, stable=True)[:max_conformers]).values
            conformers, weights = conformers[keep], weights[keep]
        if float(conformers.mean(dim=-2).abs().max()) > CENTER_TOL:
            conformers = center(conformers)
        self.conformers = conformers
        self.weights = weights

    def __repr__(self):
        return f"<{self.__class__.__name__} conformers={self.size} atoms={self.n_atoms}>"

    def __len__(self):
        return self.size

    @property
    def size(self) -> int:
        return int(self.conformers.shape[0])

    @property
    def n_atoms(self) -> int:
        return int(self.conformers.shape[1])

    def select(self, index: int) -> "ConformerEnsemble":
        """single-conformer ensemble holding conformer `index`"""
        return ConformerEnsemble(self.conformers[index], self.weights[index : index + 1])

    def sample(self, generator: torch.Generator) -> "ConformerEnsemble":
        """draw one conformer with probability proportional to its weight"""
        index = int(torch.multinomial(self.weights, 1, generator=generator))
        return self.select(index)


FormOverride = Union[Tensor, Callable[[int], Tensor]]


class MetricSpec:
    """bilinear form of the Gaussian: Euclidean or graph-Laplacian, scaled by 1 / sigma_t^2"""

    EUCLIDEAN = "euclidean"
    HARMONIC = "harmonic"

    def __init__(
        self,
        kind: str = EUCLIDEAN,
        sigma0: float = SIGMA0,
        sigma1: float = SIGMA1,
        graph: Optional[MoleculeGraph] = None,
        form: Optional[FormOverride] = None,
    ):
        if kind not in (self.EUCLIDEAN, self.HARMONIC):
            raise DomainError(f"unknown metric kind: {kind}")
        if kind == self.HARMONIC and graph is None:
            raise DomainError("harmonic metric needs a graph")
        if not sigma0 > 0 or sigma1 < 0:
            raise DomainError("sigma0 must be positive and sigma1 nonnegative")
        if not self.sigma_t_of(1 - T_CLAMP, sigma0, sigma1) > 0:
            raise DomainError("sigma_t vanishes inside the evaluated time range")
        self.kind = kind
        self.sigma0 = float(sigma0)
        self.sigma1 = float(sigma1)
        self.graph = graph
        self.override = form

    def __repr__(self):
        return f"<{self.__class__.__name__} {self.kind} sigma0={self.sigma0} sigma1={self.sigma1}>"

    @classmethod
    def euclidean(cls, sigma0: float = SIGMA0, sigma1: float = SIGMA1) -> "MetricSpec":
        return cls(cls.EUCLIDEAN, sigma0, sigma1)

    @classmethod
    def harmonic(cls, graph: MoleculeGraph, sigma0: float = SIGMA0, sigma1: float = SIGMA1) -> "MetricSpec":
        return cls(cls.HARMONIC, sigma0, sigma1, graph=graph)

    @staticmethod
    def sigma_t_of(t, sigma0: float, sigma1: float):
        return (1 - t) * sigma0 + t * sigma1

    def sigma_t(self, t):
        return self.sigma_t_of(t, self.sigma0, self.sigma1)

    def check_atoms(self, n_atoms: int):
        if self.kind == self.HARMONIC and self.override is None and self.graph.n_atoms != n_atoms:
            raise DomainError(
                f"harmonic metric graph has {self.graph.n_atoms} atoms, coordinates have {n_atoms}"
            )

    def matrix(self, n_atoms: int) -> Optional[Tensor]:
        """the unscaled (N, N) form, or None for the plain Euclidean identity"""
        if self.override is not None:
            form = self.override(n_atoms) if callable(self.override) else self.override
            return _as_tensor(form)
        if self.kind == self.EUCLIDEAN:
            return None
        return self.graph.laplacian()

    def apply(self, y: Tensor) -> Tensor:
        """unscaled form applied to (..., N, 3) coordinates"""
        form = self.matrix(y.shape[-2])
        return y if form is None else form @ y

    def to_dict(self) -> dict[str, Any]:
        return {"kind": self.kind, "sigma0": self.sigma0, "sigma1": self.sigma1}


class FlowQuery:
    """a centered point x at time t in [0, 1)"""

    def __init__(self, t: float, x):
        t = float(t)
        if not 0 <= t < 1:
            raise DomainError(f"query time must lie in [0, 1), got {t}")
        x = _as_tensor(x)
        if x.ndim != 2 or x.shape[-1] != 3:
            raise DomainError(f"query coordinates must be (N, 3), got {tuple(x.shape)}")
        self.t = t
        self.x = center(x)

    def __repr__(self):
        return f"<{self.__class__.__name__} t={self.t} atoms={self.x.shape[0]}>"


class MonteCarloEstimate(NamedTuple):
    velocity: Tensor
    stderr: Tensor
    ess: float


# ----------------------------------------------------------------------------
# CLOSED FORM


def weighted_logsumexp(values, weights=None, dim: int = -1) -> Tensor:
    """log sum_i w_i exp(a_i), max-shifted with zero-weight entries masked out"""
    values = _as_tensor(values)
    weights = torch.ones_like(values) if weights is None else _as_tensor(weights)
    if weights.shape != values.shape:
        try:
            weights = weights.expand_as(values)
        except RuntimeError as err:
            raise DomainError(
                f"weights {tuple(weights.shape)} do not match values {tuple(values.shape)}"
            ) from err
    if bool((weights < 0).any()):
        raise DomainError("weights must be nonnegative")
    mask = weights > 0
    if not bool(mask.any(dim).all()):
        raise DomainError("all weights are zero")
    shift = torch.where(mask, values, torch.full_like(values, -torch.inf))
    shift = shift.amax(dim, keepdim=True).detach()
    shifted = torch.where(mask, values - shift, torch.zeros_like(values))
    total = (torch.exp(shifted) * weights).sum(dim)
    return torch.log(total) + shift.squeeze(dim)


def posterior_mean(
    x: Tensor,
    conformers: Tensor,
    t,
    metric: MetricSpec,
    weights: Tensor,
    quadrature: Quadrature = DEFAULT_QUADRATURE,
) -> Tensor:
    """E[x_k R^T] under the posterior, batched over leading dimensions of x.

    x: (..., N, 3); conformers: (..., K, N, 3) or (K, N, 3);
    t: scalar or (...); weights: (..., K) or (K,)
    """
    batch = x.shape[:-2]
    conformers = conformers.expand(*batch, *conformers.shape[-3:])
    weights = weights.expand(*batch, weights.shape[-1])
    t = _as_tensor(t).expand(batch)
    inv_var = 1.0 / metric.sigma_t(t) ** 2

    with torch.enable_grad():
        alpha = torch.zeros_like(x, requires_grad=True)
        mx = metric.apply(x) * inv_var[..., None, None]
        coupling = torch.einsum("...kna,...nb->...kab", conformers, mx)
        perturb = torch.einsum("...kna,...nb->...kab", conformers, alpha)
        F = t[..., None, None, None] * coupling + perturb
        mt = metric.apply(conformers) * inv_var[..., None, None, None]
        inner_x = (x * mx).sum((-2, -1))
        inner_target = (conformers * mt).sum((-2, -1))
        c = 0.5 * (inner_x[..., None] + t[..., None] ** 2 * inner_target)
        logz = weighted_logsumexp(logcF(F, quadrature) - c, weights, dim=-1)
        (grad,) = torch.autograd.grad(logz.sum(), alpha)
    return grad


def averaged_velocity(
    x, conformers, t, metric: MetricSpec, weights=None, quadrature: Quadrature = DEFAULT_QUADRATURE
) -> Tensor:
    """batched u_t(x); x is (..., N, 3) and t is scalar or (...)"""
    x = _as_tensor(x)
    conformers = _as_tensor(conformers)
    if weights is None:
        weights = torch.ones(conformers.shape[-3], dtype=DTYPE)
    t = torch.clamp(_as_tensor(t), max=1 - T_CLAMP)
    metric.check_atoms(x.shape[-2])
    avg = posterior_mean(x, conformers, t, metric, _as_tensor(weights), quadrature)
    return (avg - x) / (1 - t)[..., None, None]


def avg_flow_target(
    query: FlowQuery,
    ensemble: ConformerEnsemble,
    metric: MetricSpec,
    quadrature: Quadrature = DEFAULT_QUADRATURE,
) -> Tensor:
    """averaged flow target u_t(x) for one query"""
    if query.x.shape[0] != ensemble.n_atoms:
        raise DomainError(
            f"query has {query.x.shape[0]} atoms, ensemble has {ensemble.n_atoms}"
        )
    return averaged_velocity(query.x, ensemble.conformers, query.t, metric, ensemble.weights, quadrature)


def harmonic_metric_apply(graph: MoleculeGraph, u, v, sigma_t: float) -> Tensor:
    """sum_i deg_i u_i v_i - sum_edges (u_i v_j + u_j v_i), divided by sigma_t^2"""
    u, v = _as_tensor(u), _as_tensor(v)
    if u.shape[0] != graph.n_atoms or v.shape[0] != graph.n_atoms:
        raise DomainError("vectors must have one entry per atom")
    degree = graph.degree.to(DTYPE)
    res = (degree * u * v).sum(0)
    if graph.edges:
        idx = torch.as_tensor(graph.pairs, dtype=torch.long)
        i, j = idx[:, 0], idx[:, 1]
        res = res - (u[i] * v[j] + u[j] * v[i]).sum(0)
    return res / sigma_t**2


# ----------------------------------------------------------------------------
# MONTE CARLO ORACLE


def mc_avg_flow(
    query: FlowQuery,
    ensemble: ConformerEnsemble,
    metric: MetricSpec,
    num_samples: int,
    seed: int,
) -> MonteCarloEstimate:
    """self-normalized importance estimate of u_t(x) over Haar-uniform rotations.

    Returns the velocity, a per-component standard error (delta method over
    rotation draws) and the effective sample size of the rotation weights.
    """
    if num_samples < MIN_MC_SAMPLES:
        raise DomainError(f"num_samples must be at least {MIN_MC_SAMPLES}")
    metric.check_atoms(ensemble.n_atoms)
    t = min(query.t, 1 - T_CLAMP)
    x = query.x.numpy()
    targets = ensemble.conformers.numpy()
    weights = ensemble.weights.numpy()
    form = metric.matrix(ensemble.n_atoms)
    form = np.eye(ensemble.n_atoms) if form is None else form.numpy()
    form = form / metric.sigma_t(t) ** 2

    rotations = Rotation.random(num_samples, random_state=np.random.default_rng(seed)).as_matrix()
    rotated = np.einsum("kna,sba->sknb", targets, rotations)
    resid = x - t * rotated
    quad = np.einsum("sknb,nm,skmb->sk", resid, form, resid)
    with np.errstate(divide="ignore"):
        logw = np.log(weights) - 0.5 * quad
    logw = logw - logw.max()
    w = np.exp(logw)

    velocity = (rotated - x) / (1 - t)
    per_rotation = w.sum(axis=1)
    numer = np.einsum("sk,sknb->snb", w, velocity)
    total = per_rotation.sum()
    mean = numer.sum(axis=0) / total
    spread = numer - mean * per_rotation[:, None, None]
    stderr = np.sqrt((spread**2).sum(axis=0)) / total
    ess = float(total**2 / (per_rotation**2).sum())
    log.debug("monte carlo: %d rotations, effective sample size %.1f", num_samples, ess)
    if ess < MIN_ESS:
        raise NumericalError(
            f"effective sample size {ess:.1f} is below {MIN_ESS:.0f}; increase num_samples"
        )
    return MonteCarloEstimate(_as_tensor(mean), _as_tensor(stderr), ess)


# ----------------------------------------------------------------------------
# FIELDS


class OracleField:
    """exact averaged field of one ensemble, callable like a trained network on centered x"""

    def __init__(
        self,
        ensemble: ConformerEnsemble,
        metric: Optional[MetricSpec] = None,
        quadrature: Quadrature = DEFAULT_QUADRATURE,
    ):
        self.log = logging.getLogger(self.__class__.__name__)
        self.ensemble = ensemble
        self.metric = metric or MetricSpec.euclidean()
        self.quadrature = quadrature

    def __repr__(self):
        return f"<{self.__class__.__name__} {self.ensemble!r}>"

    def __call__(self, graph: Optional[MoleculeGraph], x, t) -> Tensor:
        return averaged_velocity(
            x, self.ensemble.conformers, t, self.metric, self.ensemble.weights, self.quadrature
        )


def per_molecule_metric(kind: str, graph: MoleculeGraph, sigma0: float = SIGMA0, sigma1: float = SIGMA1) -> MetricSpec:
    """metric of the requested kind bound to a molecule's graph"""
    if kind == MetricSpec.HARMONIC:
        return MetricSpec.harmonic(graph, sigma0, sigma1)
    return MetricSpec(kind, sigma0, sigma1)

