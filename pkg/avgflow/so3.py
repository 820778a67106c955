"""so3: closed-form log-partition of the matrix Fisher integral over SO(3).

    logcF(F) = log  integral over SO(3) of exp(tr(F R^T)) dR

with dR the Haar measure of unit mass, so that logcF(0) == 0. The integral
depends on F only through its signed singular values (s1 >= s2 >= |s3|, with
s3 carrying the sign of det F) and reduces to a one dimensional integral of
two exponentially scaled Bessel functions. The default is the 512-node trapezoid
rule; `Quadrature.accurate()` selects graded composite Gauss-Legendre for
reference values and accuracy studies.

The gradient of logcf with respect to the spectrum is itself a ratio of two
such integrals; `LogCF` wires it in as a custom backward so that autograd
through `logcF` never differentiates the quadrature.

All functions accept arbitrary leading batch dimensions.
"""
import functools
import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
from torch import Tensor

from .config import (
    BRANCH_THRESHOLD,
    DTYPE,
    GAUSS_LEVELS,
    GAUSS_ORDER,
    QUADRATURE_NODES,
    QUADRATURE_RULE,
    QUADRATURE_RULES,
)
from .errors import DomainError, NumericalError

__all__ = [
    "DEFAULT_QUADRATURE",
    "LogCF",
    "Quadrature",
    "bessel0_scaled",
    "factor",
    "grad_logcF",
    "grad_logcf",
    "logcF",
    "logcf",
    "signed_svdvals",
]

log = logging.getLogger(__name__)

# ----------------------------------------------------------------------------
# CONSTANTS

# polynomial approximations of I0, ascending powers
BESSEL0_SMALL = [1.0, 3.5156229, 3.0899424, 1.2067492, 0.2659732, 0.360768e-1, 0.45813e-2]
BESSEL0_LARGE = [
    0.39894228, 0.1328592e-1, 0.225319e-2, -0.157565e-2, 0.916281e-2,
    -0.2057706e-1, 0.2635537e-1, -0.1647633e-1, 0.392377e-2,
]
BESSEL0_SWITCH = 3.75

CHUNK = 8192  # spectra per quadrature block
DEGENERACY_GAP = 1e-8

# ----------------------------------------------------------------------------
# UTILITY FUNCTIONS


def _as_tensor(value) -> Tensor:
    return torch.as_tensor(value, dtype=DTYPE)


def _check_finite(value: Tensor, where: str):
    if not bool(torch.isfinite(value).all()):
        raise NumericalError(f"{where}: non-finite input")


def _polyval(coeffs: list[float], x: Tensor) -> Tensor:
    """horner evaluation of ascending coefficients"""
    res = torch.zeros_like(x)
    for coeff in reversed(coeffs):
        res = res * x + coeff
    return res


def _bessel0_scaled(x: Tensor) -> Tensor:
    abs_x = x.abs()
    small = abs_x <= BESSEL0_SWITCH
    safe_x = torch.where(small, torch.full_like(abs_x, BESSEL0_SWITCH), abs_x)
    ratio = torch.where(small, abs_x / BESSEL0_SWITCH, torch.ones_like(abs_x))
    lower = _polyval(BESSEL0_SMALL, ratio**2) * torch.exp(-abs_x)
    upper = _polyval(BESSEL0_LARGE, BESSEL0_SWITCH / safe_x) / torch.sqrt(safe_x)
    return torch.where(small, lower, upper)


def _factor_block(
    add_x: bool, s1: Tensor, s2: Tensor, s3: Tensor, nodes: int, branch: str
) -> Tensor:
    s1, s2, s3 = s1.unsqueeze(-1), s2.unsqueeze(-1), s3.unsqueeze(-1)

    def integrand(x: Tensor) -> Tensor:
        res = _bessel0_scaled((s2 - s3) * x) * _bessel0_scaled((s2 + s3) * (1 - x))
        if add_x:
            res = res * (1 - 2 * x)
        return res

    grid = torch.linspace(0.0, 1.0, nodes, dtype=DTYPE)
    a = 2 * (s3 + s1)

    # substitution y = exp(-a x), only used where a is well away from zero
    a_sub = torch.clamp(a, min=0.5)
    lower = torch.finfo(DTYPE).tiny + torch.exp(-a_sub)
    y = lower + (1 - lower) * grid
    substituted = torch.trapezoid(integrand(-torch.log(y) / a_sub), y, dim=-1)
    substituted = substituted / a_sub.squeeze(-1)
    if branch == "substitution":
        return substituted

    direct = torch.trapezoid(integrand(grid) * torch.exp(-a * grid), grid, dim=-1)
    if branch == "direct":
        return direct

    return torch.where(a.squeeze(-1) > BRANCH_THRESHOLD, substituted, direct)


@functools.lru_cache(maxsize=8)
def _gauss_panels(order: int, levels: int = GAUSS_LEVELS) -> tuple[Tensor, Tensor]:
    """composite Gauss-Legendre nodes and weights on [0, 1], panels halving toward both ends"""
    ref_x, ref_w = np.polynomial.legendre.leggauss(order)
    ends = {2.0**-k for k in range(1, levels + 1)}
    edges = sorted({0.0, 1.0} | ends | {1 - e for e in ends})
    xs, ws = [], []
    for lo, hi in zip(edges[:-1], edges[1:]):
        xs.append(lo + 0.5 * (hi - lo) * (ref_x + 1))
        ws.append(0.5 * (hi - lo) * ref_w)
    return torch.as_tensor(np.concatenate(xs), dtype=DTYPE), torch.as_tensor(np.concatenate(ws), dtype=DTYPE)


def _gauss_block(add_x: bool, s1: Tensor, s2: Tensor, s3: Tensor, order: int) -> Tensor:
    s1, s2, s3 = s1.unsqueeze(-1), s2.unsqueeze(-1), s3.unsqueeze(-1)
    x, w = _gauss_panels(order)
    res = torch.special.i0e((s2 - s3) * x) * torch.special.i0e((s2 + s3) * (1 - x))
    res = res * torch.exp(-2 * (s3 + s1) * x)
    if add_x:
        res = res * (1 - 2 * x)
    return (res * w).sum(-1)


def _flag_degeneracy(spectrum: Tensor):
    mags = spectrum.detach().abs()
    gaps = torch.stack([mags[..., 0] - mags[..., 1], mags[..., 1] - mags[..., 2]], -1)
    if gaps.numel() and bool((gaps < DEGENERACY_GAP).any()):
        log.debug("repeated singular values: gradient accuracy reduced")


# ----------------------------------------------------------------------------
# PUBLIC API


@dataclass(frozen=True)
class Quadrature:
    """how `factor` integrates over [0, 1].

    "trapezoid" uses `nodes` uniform nodes (512 by default) with the y = exp(-a x)
    substitution above BRANCH_THRESHOLD; `branch` forces "direct" or "substitution".
    "gauss" uses `nodes` Gauss-Legendre points (16 by default) on each of a set of
    panels that halve in width toward both ends, with `torch.special.i0e`.
    """

    rule: str = QUADRATURE_RULE
    nodes: Optional[int] = None
    branch: str = "auto"

    def __post_init__(self):
        if self.rule not in QUADRATURE_RULES:
            raise DomainError(f"unknown quadrature rule: {self.rule}")
        if self.branch not in ("auto", "direct", "substitution"):
            raise DomainError(f"unknown quadrature branch: {self.branch}")
        if self.nodes is None:
            object.__setattr__(self, "nodes", QUADRATURE_NODES if self.rule == "trapezoid" else GAUSS_ORDER)
        if self.nodes < 2:
            raise DomainError("quadrature needs at least 2 nodes")

    @classmethod
    def accurate(cls) -> "Quadrature":
        return cls("gauss")

    def block(self, add_x: bool, s1: Tensor, s2: Tensor, s3: Tensor) -> Tensor:
        if self.rule == "gauss":
            return _gauss_block(add_x, s1, s2, s3, self.nodes)
        return _factor_block(add_x, s1, s2, s3, self.nodes, self.branch)


DEFAULT_QUADRATURE = Quadrature()


def bessel0_scaled(x) -> Tensor:
    """exponentially scaled modified Bessel function I0(x) * exp(-|x|)."""
    x = _as_tensor(x)
    _check_finite(x, "bessel0_scaled")
    return _bessel0_scaled(x)


def factor(
    add_x: bool,
    s1,
    s2,
    s3,
    nodes: Optional[int] = None,
    branch: str = "auto",
    rule: str = QUADRATURE_RULE,
) -> Tensor:
    """quadrature over [0, 1] of

        (1 - 2x)^add_x * I0s((s2 - s3) x) * I0s((s2 + s3)(1 - x)) * exp(-2 (s3 + s1) x)

    where I0s is `bessel0_scaled`. See `Quadrature` for `nodes`, `branch` and `rule`.
    """
    return _factor(add_x, s1, s2, s3, Quadrature(rule, nodes, branch))


def _factor(add_x: bool, s1, s2, s3, quadrature: Quadrature) -> Tensor:
    s1, s2, s3 = torch.broadcast_tensors(_as_tensor(s1), _as_tensor(s2), _as_tensor(s3))
    for s in (s1, s2, s3):
        _check_finite(s, "factor")
    shape = s1.shape
    flat = [s.reshape(-1) for s in (s1, s2, s3)]
    total = flat[0].shape[0]
    blocks = [
        quadrature.block(add_x, *(s[i : i + CHUNK] for s in flat))
        for i in range(0, total, CHUNK)
    ]
    if not blocks:
        return torch.zeros(shape, dtype=DTYPE)
    return torch.cat(blocks).reshape(shape)


def _spectral_gradient(spectrum: Tensor, base: Tensor, quadrature: Quadrature) -> Tensor:
    s1, s2, s3 = spectrum.unbind(-1)
    return torch.stack(
        [
            _factor(True, s1, s2, s3, quadrature) / base,
            _factor(True, s2, s1, s3, quadrature) / base,
            _factor(True, s3, s1, s2, quadrature) / base,
        ],
        dim=-1,
    )


def _checked_base(spectrum: Tensor, quadrature: Quadrature) -> Tensor:
    s1, s2, s3 = spectrum.unbind(-1)
    base = _factor(False, s1, s2, s3, quadrature)
    bad = ~(base > 0) | ~torch.isfinite(base)
    if bool(bad.any()):
        first = spectrum[bad][0].tolist()
        raise NumericalError(
            f"logcf: quadrature factor underflowed at spectrum {first}; "
            "increase the quadrature node count or rescale F"
        )
    return base


def _check_spectrum(spectrum: Tensor, where: str):
    if spectrum.shape[-1:] != (3,):
        raise DomainError(f"{where}: spectrum must end in a dimension of 3, got {tuple(spectrum.shape)}")
    _check_finite(spectrum, where)


class LogCF(torch.autograd.Function):
    """logcf with the closed-form spectral gradient as its backward pass"""

    @staticmethod
    def forward(ctx, spectrum: Tensor, quadrature: Quadrature = DEFAULT_QUADRATURE) -> Tensor:
        base = _checked_base(spectrum, quadrature)
        ctx.quadrature = quadrature
        ctx.save_for_backward(spectrum, base)
        return spectrum.sum(-1) + torch.log(base)

    @staticmethod
    def backward(ctx, grad: Tensor) -> tuple[Tensor, None]:
        spectrum, base = ctx.saved_tensors
        return grad.unsqueeze(-1) * _spectral_gradient(spectrum, base, ctx.quadrature), None


def logcf(spectrum, quadrature: Quadrature = DEFAULT_QUADRATURE) -> Tensor:
    """log-partition from a signed spectrum (..., 3) ordered s1 >= s2 >= |s3|."""
    spectrum = _as_tensor(spectrum)
    _check_spectrum(spectrum, "logcf")
    return LogCF.apply(spectrum, quadrature)


def grad_logcf(spectrum, quadrature: Quadrature = DEFAULT_QUADRATURE) -> Tensor:
    """d logcf / d(s1, s2, s3)"""
    spectrum = _as_tensor(spectrum)
    _check_spectrum(spectrum, "grad_logcf")
    _flag_degeneracy(spectrum)
    return _spectral_gradient(spectrum, _checked_base(spectrum, quadrature), quadrature)


def _signed_svd(F: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    if F.shape[-2:] != (3, 3):
        raise DomainError(f"expected (..., 3, 3) matrices, got {tuple(F.shape)}")
    _check_finite(F, "signed_svdvals")
    try:
        u, s, vh = torch.linalg.svd(F.detach())
    except RuntimeError as err:
        raise NumericalError(f"signed_svdvals: svd did not converge ({err})") from err
    assert bool((s[..., :-1] >= s[..., 1:]).all()), "singular values must come out descending"
    sign = torch.where(torch.linalg.det(u @ vh) < 0, -1.0, 1.0).to(DTYPE)
    sign = torch.where(s[..., 2] == 0, torch.ones_like(sign), sign)
    # rotation factors are held fixed; only the singular values carry gradient
    diag = torch.einsum("...ia,...ij,...aj->...a", u, F, vh)
    s = s + (diag - diag.detach())
    ones = torch.ones_like(sign)
    return s * torch.stack([ones, ones, sign], dim=-1), u, vh


def signed_svdvals(F) -> Tensor:
    """singular values in descending order, the smallest signed by det(U V^T)."""
    spectrum, _, _ = _signed_svd(_as_tensor(F))
    return spectrum


def logcF(F, quadrature: Quadrature = DEFAULT_QUADRATURE) -> Tensor:
    """log integral over SO(3) of exp(tr(F R^T)) dR, differentiable in F."""
    return LogCF.apply(signed_svdvals(F), quadrature)


def grad_logcF(F, quadrature: Quadrature = DEFAULT_QUADRATURE) -> Tensor:
    """d logcF / dF, equal to the mean rotation under the density exp(tr(F R^T))."""
    F = _as_tensor(F).detach().requires_grad_(True)
    with torch.enable_grad():
        spectrum, _, _ = _signed_svd(F)
        _flag_degeneracy(spectrum)
        value = LogCF.apply(spectrum, quadrature)
        (grad,) = torch.autograd.grad(value.sum(), F)
    return grad
