"""graph: molecular graphs, node featurization and Laplacian positional encodings."""
import logging
from typing import Any, Optional, Sequence

import networkx as nx
import numpy as np
import torch
from torch import Tensor

from .config import DTYPE, PE_WIDTH
from .errors import DomainError

log = logging.getLogger(__name__)

BOND_TYPES = ("none", "single", "double", "triple", "aromatic")
N_ATOM_TYPES = 5
MAX_DEGREE = 6
SIGN_TOL = 1e-8


def feature_width(pe_width: int = PE_WIDTH) -> int:
    """width of the per-node feature rows produced by `featurize`"""
    return N_ATOM_TYPES + MAX_DEGREE + 1 + pe_width


def _bond_index(bond) -> int:
    if isinstance(bond, str):
        if bond not in BOND_TYPES:
            raise DomainError(f"unknown bond type: {bond}")
        return BOND_TYPES.index(bond)
    bond = int(bond)
    if not 0 <= bond < len(BOND_TYPES):
        raise DomainError(f"bond type index out of range: {bond}")
    return bond


def laplacian_encoding(n_atoms: int, edges: Sequence[tuple[int, int]], width: int = PE_WIDTH) -> Tensor:
    """lowest nontrivial eigenvectors of the symmetric normalized Laplacian.

    Each connected component is encoded on its own and zero-padded to `width`;
    every eigenvector is sign-fixed so that its first nonzero entry is positive.
    """
    g = nx.Graph()
    g.add_nodes_from(range(n_atoms))
    g.add_edges_from((i, j) for i, j in edges)
    pe = np.zeros((n_atoms, width))
    components = sorted(nx.connected_components(g), key=min)
    if len(components) > 1:
        log.debug("graph has %d components: per-component encodings", len(components))
    for comp in components:
        nodes = sorted(comp)
        if len(nodes) < 2:
            continue
        lap = nx.normalized_laplacian_matrix(g.subgraph(nodes), nodelist=nodes).toarray()
        _, evecs = np.linalg.eigh(lap)
        vecs = evecs[:, 1 : 1 + width]
        for k in range(vecs.shape[1]):
            nonzero = np.flatnonzero(np.abs(vecs[:, k]) > SIGN_TOL)
            if nonzero.size and vecs[nonzero[0], k] < 0:
                vecs[:, k] = -vecs[:, k]
        pe[np.ix_(nodes, range(vecs.shape[1]))] = vecs
    return torch.as_tensor(pe, dtype=DTYPE)


class MoleculeGraph:
    """atoms with categorical types joined by typed bonds"""

    def __init__(
        self,
        atom_types: Sequence[int],
        edges: Sequence[tuple],
        laplacian_pe: Optional[Any] = None,
        pe_width: int = PE_WIDTH,
    ):
        self.log = logging.getLogger(self.__class__.__name__)
        self.atom_types = torch.as_tensor(list(atom_types), dtype=torch.long)
        self.n_atoms = int(self.atom_types.shape[0])
        if self.n_atoms < 1:
            raise DomainError("a molecule needs at least one atom")
        if bool(((self.atom_types < 0) | (self.atom_types >= N_ATOM_TYPES)).any()):
            raise DomainError(f"atom types must lie in [0, {N_ATOM_TYPES})")
        self.edges: list[tuple[int, int, int]] = []
        seen = set()
        for edge in edges:
            i, j = int(edge[0]), int(edge[1])
            bond = _bond_index(edge[2] if len(edge) > 2 else "single")
            if not (0 <= i < self.n_atoms and 0 <= j < self.n_atoms):
                raise DomainError(f"edge ({i}, {j}) out of range for {self.n_atoms} atoms")
            if i == j:
                raise DomainError(f"self-loop on atom {i}")
            key = (min(i, j), max(i, j))
            if key in seen:
                raise DomainError(f"duplicate edge {key}")
            seen.add(key)
            self.edges.append((i, j, bond))
        self.degree = torch.zeros(self.n_atoms, dtype=torch.long)
        for i, j, _ in self.edges:
            self.degree[i] += 1
            self.degree[j] += 1
        if laplacian_pe is None:
            laplacian_pe = laplacian_encoding(self.n_atoms, self.pairs, pe_width)
        self.laplacian_pe = torch.as_tensor(laplacian_pe, dtype=DTYPE)
        if self.laplacian_pe.shape[0] != self.n_atoms:
            raise DomainError("positional encoding rows must match the atom count")
        self._laplacian: Optional[Tensor] = None

    def __repr__(self):
        return f"<{self.__class__.__name__} atoms={self.n_atoms} bonds={len(self.edges)}>"

    @property
    def pairs(self) -> list[tuple[int, int]]:
        return [(i, j) for i, j, _ in self.edges]

    @property
    def pe_width(self) -> int:
        return int(self.laplacian_pe.shape[1])

    def laplacian(self) -> Tensor:
        """dense graph Laplacian D - A"""
        if self._laplacian is None:
            lap = torch.diag(self.degree.to(DTYPE))
            for i, j, _ in self.edges:
                lap[i, j] -= 1.0
                lap[j, i] -= 1.0
            self._laplacian = lap
        return self._laplacian

    def bond_matrix(self) -> Tensor:
        """(N, N) bond type indices, 0 where atoms are not bonded"""
        res = torch.zeros(self.n_atoms, self.n_atoms, dtype=torch.long)
        for i, j, bond in self.edges:
            res[i, j] = bond
            res[j, i] = bond
        return res

    def to_networkx(self) -> nx.Graph:
        g = nx.Graph()
        g.add_nodes_from(range(self.n_atoms))
        g.add_edges_from((i, j, {"bond": BOND_TYPES[b]}) for i, j, b in self.edges)
        return g

    def is_connected(self) -> bool:
        return nx.is_connected(self.to_networkx())

    def permute(self, perm: Sequence[int]) -> "MoleculeGraph":
        """relabel atoms so that new atom k is old atom perm[k]"""
        perm = [int(p) for p in perm]
        if sorted(perm) != list(range(self.n_atoms)):
            raise DomainError("perm must be a permutation of the atom indices")
        inverse = {old: new for new, old in enumerate(perm)}
        return MoleculeGraph(
            atom_types=self.atom_types[perm].tolist(),
            edges=[(inverse[i], inverse[j], b) for i, j, b in self.edges],
            laplacian_pe=self.laplacian_pe[perm],
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "atom_types": self.atom_types.tolist(),
            "edges": [[i, j, BOND_TYPES[b]] for i, j, b in self.edges],
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any], pe_width: int = PE_WIDTH) -> "MoleculeGraph":
        try:
            return cls(data["atom_types"], [tuple(e) for e in data["edges"]], pe_width=pe_width)
        except KeyError as err:
            raise DomainError(f"molecule graph is missing field {err}") from err


def featurize(graph: MoleculeGraph) -> Tensor:
    """one-hot atom type, one-hot degree (clipped at 6) and Laplacian PE per node"""
    types = torch.nn.functional.one_hot(graph.atom_types, N_ATOM_TYPES).to(DTYPE)
    degree = torch.clamp(graph.degree, max=MAX_DEGREE)
    degrees = torch.nn.functional.one_hot(degree, MAX_DEGREE + 1).to(DTYPE)
    return torch.cat([types, degrees, graph.laplacian_pe], dim=-1)
