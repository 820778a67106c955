"""interpolants: training paths, Kabsch alignment, baseline targets and the prior."""
import logging
from dataclasses import dataclass
from typing import NamedTuple, Optional

import torch
from torch import Tensor

from .config import DTYPE, INTEGRATION_STEPS
from .errors import DomainError, NumericalError
from .sampling import euler_integrate
from .target import ConformerEnsemble, MetricSpec, averaged_velocity, center

log = logging.getLogger(__name__)

RANK_TOL = 1e-10


@dataclass(frozen=True)
class InterpolantKind:
    """linear chord, or Euler integration of the averaged field with `steps` steps"""

    kind: str = "linear"
    steps: int = INTEGRATION_STEPS

    def __post_init__(self):
        if self.kind not in ("linear", "integrated"):
            raise DomainError(f"unknown interpolant: {self.kind}")
        if self.kind == "integrated" and self.steps < 1:
            raise DomainError("integrated interpolant needs at least one step")


def linear_interpolant(x0, x1, t) -> Tensor:
    """(1 - t) x0 + t x1; t is a scalar or one value per leading batch entry"""
    x0 = torch.as_tensor(x0, dtype=DTYPE)
    x1 = torch.as_tensor(x1, dtype=DTYPE)
    if x0.shape != x1.shape:
        raise DomainError(f"shape mismatch {tuple(x0.shape)} vs {tuple(x1.shape)}")
    t = torch.as_tensor(t, dtype=DTYPE)
    if t.ndim:
        t = t[..., None, None]
    return (1 - t) * x0 + t * x1


def integration_interpolant(
    x0,
    ensemble: ConformerEnsemble,
    metric: MetricSpec,
    t: float,
    steps: int = INTEGRATION_STEPS,
) -> Tensor:
    """Euler solution of dx/dtau = u_tau(x) from tau = 0 to t started at a centered x0"""
    t = float(t)
    if not 0 <= t < 1:
        raise DomainError(f"interpolant time must lie in [0, 1), got {t}")
    if steps < 1:
        raise DomainError("steps must be at least 1")
    x0 = torch.as_tensor(x0, dtype=DTYPE)
    if t == 0:
        return x0.clone()

    def field(x: Tensor, tau: float) -> Tensor:
        return averaged_velocity(x, ensemble.conformers, tau, metric, ensemble.weights)

    _, states = euler_integrate(field, x0, steps, t_end=t)
    return states[-1]


def kabsch_rotation(P, Q, strict: bool = True) -> Tensor:
    """proper rotation R minimizing |P - Q R^T|_F for centered (..., N, 3) point sets

    With `strict` a covariance of rank < 2 raises; otherwise one of the
    equally optimal rotations is returned.
    """
    P = torch.as_tensor(P, dtype=DTYPE)
    Q = torch.as_tensor(Q, dtype=DTYPE)
    if P.shape != Q.shape or P.shape[-1] != 3:
        raise DomainError(f"shape mismatch {tuple(P.shape)} vs {tuple(Q.shape)}")
    H = P.transpose(-1, -2) @ Q
    try:
        U, S, Vh = torch.linalg.svd(H)
    except RuntimeError as err:
        raise NumericalError(f"kabsch: svd did not converge ({err})") from err
    scale = torch.clamp(S[..., :1], min=1.0)
    if strict and bool((S[..., 1:2] <= RANK_TOL * scale).any()):
        raise DomainError("kabsch: covariance has rank < 2, rotation is not unique")
    d = torch.sign(torch.linalg.det(U @ Vh))
    d = torch.where(d == 0, torch.ones_like(d), d)
    ones = torch.ones_like(d)
    D = torch.diag_embed(torch.stack([ones, ones, d], dim=-1))
    R = U @ D @ Vh
    assert bool((torch.linalg.det(R) > 0).all()), "kabsch must return a proper rotation"
    return R


class BaselinePath(NamedTuple):
    """straight path between x0 and the (possibly aligned) x1 with constant velocity"""

    x0: Tensor
    x1: Tensor
    velocity: Tensor

    def interpolate(self, t) -> Tensor:
        return linear_interpolant(self.x0, self.x1, t)


def baseline_target(kind: str, x0, x1) -> BaselinePath:
    """conditional OT ("condot") or Kabsch-aligned OT ("kabschot") path"""
    x0 = center(x0)
    x1 = center(x1)
    if x0.shape != x1.shape:
        raise DomainError(f"shape mismatch {tuple(x0.shape)} vs {tuple(x1.shape)}")
    if kind == "kabschot":
        R = kabsch_rotation(x0, x1)
        x1 = x1 @ R.transpose(-1, -2)
    elif kind != "condot":
        raise DomainError(f"unknown baseline: {kind}")
    return BaselinePath(x0, x1, x1 - x0)


def sample_prior(
    n_atoms: int,
    seed: Optional[int] = None,
    generator: Optional[torch.Generator] = None,
    batch: tuple[int, ...] = (),
) -> Tensor:
    """centered standard normal coordinates of shape (*batch, n_atoms, 3)"""
    if n_atoms < 1:
        raise DomainError("n_atoms must be at least 1")
    if generator is None:
        generator = torch.Generator()
        generator.manual_seed(0 if seed is None else int(seed))
    x = torch.randn(*batch, n_atoms, 3, generator=generator, dtype=DTYPE)
    return center(x)


def random_rotation(generator: torch.Generator, batch: tuple[int, ...] = ()) -> Tensor:
    """Haar-uniform proper rotations from the QR decomposition of Gaussian matrices"""
    q, r = torch.linalg.qr(torch.randn(*batch, 3, 3, generator=generator, dtype=DTYPE))
    q = q * torch.sign(torch.diagonal(r, dim1=-2, dim2=-1))[..., None, :]
    det = torch.linalg.det(q)
    return torch.cat([q[..., :, :2], q[..., :, 2:] * det[..., None, None]], dim=-1)
