"""model: a reduced attention network for v(graph, x, t) and its checkpoints.

Every layer attends over all atom pairs. Attention logits carry a bias built
from the pairwise distance (radial basis) and the bond type. The velocity is
the sum of a per-atom linear head and a pairwise head that weights relative
positions, both zero-initialized so that the untrained field is 0.
"""
import logging
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Optional, Union

import torch
from torch import Tensor, nn

from .config import DTYPE, PE_WIDTH
from .errors import CheckpointError, ConfigError, DomainError, NumericalError
from .graph import BOND_TYPES, MoleculeGraph, feature_width, featurize

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "avgflow-checkpoint"
CHECKPOINT_VERSION = 1
N_RBF = 8
RBF_MAX = 5.0
DIST_EPS = 1e-8
TIME_SCALE = 100.0


@dataclass
class ModelConfig:
    hidden_width: int = 64
    n_layers: int = 3
    time_embed_width: int = 16
    pe_width: int = PE_WIDTH
    use_pair_bias: bool = True

    def __post_init__(self):
        for name in ("hidden_width", "n_layers", "time_embed_width", "pe_width"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise ConfigError(f"model config {name} must be a positive integer, got {value!r}")
        if self.time_embed_width % 2:
            raise ConfigError("time_embed_width must be even")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data)


def time_embedding(t: Tensor, width: int) -> Tensor:
    """sinusoidal embedding (..., width) of times in [0, 1]"""
    half = width // 2
    freqs = torch.exp(torch.linspace(0.0, math.log(TIME_SCALE), half, dtype=DTYPE))
    angles = t[..., None] * freqs
    return torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1)


def pair_features(x: Tensor, bonds: Tensor) -> Tensor:
    """(..., N, N, N_RBF + bond types) distance basis and bond one-hot"""
    diff = x[..., :, None, :] - x[..., None, :, :]
    dist = torch.sqrt((diff**2).sum(-1) + DIST_EPS)
    centers = torch.linspace(0.0, RBF_MAX, N_RBF, dtype=DTYPE)
    gamma = RBF_MAX / N_RBF
    rbf = torch.exp(-((dist[..., None] - centers) ** 2) / (2 * gamma**2))
    onehot = nn.functional.one_hot(bonds, len(BOND_TYPES)).to(DTYPE)
    onehot = onehot.expand(*rbf.shape[:-1], len(BOND_TYPES))
    return torch.cat([rbf, onehot], dim=-1)


class AttentionBlock(nn.Module):
    def __init__(self, width: int, pair_width: int, use_pair_bias: bool):
        super().__init__()
        self.norm1 = nn.LayerNorm(width, dtype=DTYPE)
        self.query = nn.Linear(width, width, dtype=DTYPE)
        self.key = nn.Linear(width, width, dtype=DTYPE)
        self.value = nn.Linear(width, width, dtype=DTYPE)
        self.out = nn.Linear(width, width, dtype=DTYPE)
        self.pair_bias = nn.Linear(pair_width, 1, dtype=DTYPE) if use_pair_bias else None
        self.norm2 = nn.LayerNorm(width, dtype=DTYPE)
        self.mlp = nn.Sequential(
            nn.Linear(width, 2 * width, dtype=DTYPE),
            nn.SiLU(),
            nn.Linear(2 * width, width, dtype=DTYPE),
        )
        self.scale = 1.0 / math.sqrt(width)

    def forward(self, h: Tensor, pairs: Tensor) -> Tensor:
        z = self.norm1(h)
        logits = self.query(z) @ self.key(z).transpose(-1, -2) * self.scale
        if self.pair_bias is not None:
            logits = logits + self.pair_bias(pairs).squeeze(-1)
        attn = torch.softmax(logits, dim=-1)
        h = h + self.out(attn @ self.value(z))
        return h + self.mlp(self.norm2(h))


class VectorFieldNet(nn.Module):
    """v(graph, x, t) -> per-atom velocity, batched over leading dimensions of x"""

    def __init__(self, config: Optional[ModelConfig] = None, seed: int = 0):
        super().__init__()
        self.config = config or ModelConfig()
        self.metadata: dict[str, Any] = {}
        cfg = self.config
        width = cfg.hidden_width
        pair_width = N_RBF + len(BOND_TYPES)
        self.embed = nn.Linear(
            feature_width(cfg.pe_width) + cfg.time_embed_width + 3, width, dtype=DTYPE
        )
        self.blocks = nn.ModuleList(
            AttentionBlock(width, pair_width, cfg.use_pair_bias) for _ in range(cfg.n_layers)
        )
        self.norm = nn.LayerNorm(width, dtype=DTYPE)
        self.node_head = nn.Linear(width, 3, dtype=DTYPE)
        self.pair_head = nn.Linear(2 * width + pair_width, 1, dtype=DTYPE)
        self.reset_parameters(seed)

    def __repr__(self):
        return f"<{self.__class__.__name__} {self.config} params={self.num_parameters()}>"

    def reset_parameters(self, seed: int = 0):
        """deterministic init: scaled uniform weights, zero biases, zero output heads"""
        gen = torch.Generator()
        gen.manual_seed(seed)
        with torch.no_grad():
            for name, param in self.named_parameters():
                if name.startswith(("node_head", "pair_head")):
                    param.zero_()
                elif param.ndim == 2:
                    bound = math.sqrt(6.0 / (param.shape[0] + param.shape[1]))
                    param.uniform_(-bound, bound, generator=gen)
                elif "norm" in name and name.endswith("weight"):
                    param.fill_(1.0)
                else:
                    param.zero_()

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def flat_parameters(self) -> Tensor:
        return nn.utils.parameters_to_vector(self.parameters()).detach().clone()

    def load_flat_parameters(self, flat: Tensor):
        nn.utils.vector_to_parameters(torch.as_tensor(flat, dtype=DTYPE), self.parameters())

    def _check(self, h: Tensor, layer: Union[int, str]):
        if not bool(torch.isfinite(h).all()):
            raise NumericalError(f"non-finite activations in layer {layer}")

    def forward(self, graph: MoleculeGraph, x, t) -> Tensor:
        x = torch.as_tensor(x, dtype=DTYPE)
        if x.shape[-2:] != (graph.n_atoms, 3):
            raise DomainError(
                f"coordinates {tuple(x.shape)} do not match a graph of {graph.n_atoms} atoms"
            )
        batch = x.shape[:-2]
        t = torch.as_tensor(t, dtype=DTYPE).expand(batch)
        nodes = featurize(graph).expand(*batch, graph.n_atoms, -1)
        temb = time_embedding(t, self.config.time_embed_width)
        temb = temb[..., None, :].expand(*batch, graph.n_atoms, -1)
        pairs = pair_features(x, graph.bond_matrix())

        h = self.embed(torch.cat([nodes, temb, x], dim=-1))
        self._check(h, "embed")
        for idx, block in enumerate(self.blocks):
            h = block(h, pairs)
            self._check(h, idx)
        h = self.norm(h)

        n = graph.n_atoms
        hi = h[..., :, None, :].expand(*batch, n, n, -1)
        hj = h[..., None, :, :].expand(*batch, n, n, -1)
        weights = self.pair_head(torch.cat([hi, hj, pairs], dim=-1)).squeeze(-1)
        rel = x[..., :, None, :] - x[..., None, :, :]
        out = self.node_head(h) + (weights[..., None] * rel).sum(-2) / n
        self._check(out, "head")
        return out


# ----------------------------------------------------------------------------
# CHECKPOINTS


def save_checkpoint(
    net: VectorFieldNet,
    path: Union[str, Path],
    ema_state: Optional[dict[str, Tensor]] = None,
    metadata: Optional[dict[str, Any]] = None,
):
    """write config, raw and EMA parameters and metadata to a versioned torch file"""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": net.config.to_dict(),
        "state_dict": net.state_dict(),
        "ema_state_dict": ema_state,
        "metadata": metadata if metadata is not None else dict(net.metadata),
    }
    torch.save(payload, path)
    log.debug("saved checkpoint %s (%d parameters)", path, net.num_parameters())


def read_checkpoint(path: Union[str, Path]) -> dict[str, Any]:
    """load and validate the raw checkpoint payload"""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as err:
        raise CheckpointError(f"cannot read checkpoint {path}: {err}") from err
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not an avgflow checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint version {payload.get('version')} is not supported "
            f"(expected {CHECKPOINT_VERSION})"
        )
    return payload


def load_checkpoint(
    path: Union[str, Path],
    config: Optional[ModelConfig] = None,
    ema: bool = False,
) -> VectorFieldNet:
    """rebuild a network from a checkpoint, optionally from its EMA parameters"""
    payload = read_checkpoint(path)
    try:
        stored = ModelConfig.from_dict(payload["config"])
    except (ConfigError, TypeError) as err:
        raise CheckpointError(f"checkpoint config is invalid: {err}") from err
    if config is not None and config != stored:
        raise CheckpointError(f"checkpoint config {stored} does not match requested {config}")
    state = payload["ema_state_dict"] if ema else payload["state_dict"]
    if state is None:
        raise CheckpointError("checkpoint holds no EMA parameters")
    net = VectorFieldNet(stored)
    try:
        net.load_state_dict(state)
    except RuntimeError as err:
        raise CheckpointError(f"checkpoint parameters do not fit the model: {err}") from err
    net.metadata = dict(payload.get("metadata") or {})
    return net
