"""dataset: molecules with conformer ensembles, a synthetic generator and JSON files.

File layout (schema version 1):

    {
      "schema_version": 1,
      "metadata": {...},
      "molecules": [
        {"id": "mol-0000",
         "graph": {"atom_types": [...], "edges": [[i, j, "single"], ...]},
         "conformers": [[[x, y, z], ...], ...],
         "weights": [...]}
      ]
    }
"""
import json
import logging
from pathlib import Path
from typing import Any, Iterator, Optional, Sequence, Union

import networkx as nx
import numpy as np
import torch

from .config import PE_WIDTH, SCHEMA_VERSION, VAL_FRACTION, substream_seed
from .errors import DatasetError, DomainError
from .evaluation import rmsd_kabsch
from .graph import BOND_TYPES, N_ATOM_TYPES, MoleculeGraph
from .target import ConformerEnsemble

BOND_LENGTH = 1.5
BOND_PROBS = [0.0, 0.7, 0.15, 0.05, 0.1]
MAX_VALENCE = 4
MIN_CONFORMER_RMSD = 0.1
MAX_ATOMS = 64
MAX_CONFORMERS = 32
MAX_ATTEMPTS = 20
CANDIDATE_DIRECTIONS = 8
MIN_TORSION_OFFSET = 0.5
TETRAHEDRAL = np.arccos(-1.0 / 3.0)


class Molecule:
    """one graph with its conformer ensemble"""

    def __init__(self, mol_id: str, graph: MoleculeGraph, ensemble: ConformerEnsemble):
        if graph.n_atoms != ensemble.n_atoms:
            raise DatasetError(
                f"{mol_id}: graph has {graph.n_atoms} atoms, conformers have {ensemble.n_atoms}"
            )
        self.id = mol_id
        self.graph = graph
        self.ensemble = ensemble

    def __repr__(self):
        return f"<{self.__class__.__name__} {self.id} atoms={self.graph.n_atoms} conformers={self.ensemble.size}>"

    @property
    def n_atoms(self) -> int:
        return self.graph.n_atoms

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "graph": self.graph.to_dict(),
            "conformers": self.ensemble.conformers.tolist(),
            "weights": self.ensemble.weights.tolist(),
        }

    @classmethod
    def from_dict(
        cls, data: dict[str, Any], pe_width: int = PE_WIDTH, max_conformers: Optional[int] = None
    ) -> "Molecule":
        try:
            graph = MoleculeGraph.from_dict(data["graph"], pe_width=pe_width)
            ensemble = ConformerEnsemble(data["conformers"], data.get("weights"), max_conformers)
            return cls(str(data["id"]), graph, ensemble)
        except KeyError as err:
            raise DatasetError(f"molecule record is missing field {err}") from err
        except DomainError as err:
            raise DatasetError(f"invalid molecule record {data.get('id')}: {err}") from err


class DatasetFile:
    """versioned collection of molecules"""

    def __init__(self, molecules: Sequence[Molecule], metadata: Optional[dict[str, Any]] = None):
        self.log = logging.getLogger(self.__class__.__name__)
        self.molecules = list(molecules)
        self.metadata = dict(metadata or {})
        self.schema_version = SCHEMA_VERSION
        ids = [m.id for m in self.molecules]
        if len(set(ids)) != len(ids):
            raise DatasetError("molecule ids must be unique")

    def __repr__(self):
        return f"<{self.__class__.__name__} molecules={len(self)}>"

    def __len__(self):
        return len(self.molecules)

    def __iter__(self) -> Iterator[Molecule]:
        return iter(self.molecules)

    def __getitem__(self, index: int) -> Molecule:
        return self.molecules[index]

    def get(self, mol_id: str) -> Molecule:
        for mol in self.molecules:
            if mol.id == mol_id:
                return mol
        raise DatasetError(f"no molecule with id {mol_id}")

    def to_dict(self) -> dict[str, Any]:
        return {
            "schema_version": self.schema_version,
            "metadata": self.metadata,
            "molecules": [m.to_dict() for m in self.molecules],
        }

    def save(self, path: Union[str, Path]):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, sort_keys=True)
        self.log.info("wrote %d molecules to %s", len(self), path)

    @classmethod
    def from_dict(
        cls, data: dict[str, Any], pe_width: int = PE_WIDTH, max_conformers: Optional[int] = None
    ) -> "DatasetFile":
        version = data.get("schema_version")
        if version != SCHEMA_VERSION:
            raise DatasetError(f"dataset schema version {version} is not supported (expected {SCHEMA_VERSION})")
        if "molecules" not in data:
            raise DatasetError("dataset has no molecules field")
        molecules = [Molecule.from_dict(m, pe_width, max_conformers) for m in data["molecules"]]
        return cls(molecules, data.get("metadata"))

    @classmethod
    def load(
        cls, path: Union[str, Path], pe_width: int = PE_WIDTH, max_conformers: Optional[int] = None
    ) -> "DatasetFile":
        try:
            with open(path) as f:
                data = json.load(f)
        except (OSError, json.JSONDecodeError) as err:
            raise DatasetError(f"cannot read dataset {path}: {err}") from err
        return cls.from_dict(data, pe_width, max_conformers)

    def split(self, val_fraction: float = VAL_FRACTION, seed: int = 0) -> tuple[list[Molecule], list[Molecule]]:
        """seeded (train, validation) partition; validation keeps at least one molecule"""
        if not 0 <= val_fraction < 1:
            raise DomainError("val_fraction must lie in [0, 1)")
        n = len(self)
        n_val = 0 if n < 2 or val_fraction == 0 else max(1, int(round(val_fraction * n)))
        rng = np.random.default_rng(substream_seed(seed, "split"))
        order = rng.permutation(n)
        val_idx = set(order[:n_val].tolist())
        train = [m for i, m in enumerate(self.molecules) if i not in val_idx]
        val = [m for i, m in enumerate(self.molecules) if i in val_idx]
        return train, val


# ----------------------------------------------------------------------------
# SYNTHETIC GENERATOR


def _check_range(name: str, bounds: Sequence[int], lo: int, hi: int):
    if len(bounds) != 2 or bounds[0] > bounds[1] or bounds[0] < lo or bounds[1] > hi:
        raise DatasetError(f"infeasible {name} range {tuple(bounds)}: must satisfy {lo} <= min <= max <= {hi}")


class SyntheticGenerator:
    """random connected molecules built out with tetrahedral geometry"""

    def __init__(self, seed: int = 0):
        self.log = logging.getLogger(self.__class__.__name__)
        self.seed = seed
        self.rng = np.random.default_rng(substream_seed(seed, "dataset"))

    def __repr__(self):
        return f"<{self.__class__.__name__} seed={self.seed}>"

    def graph(self, n_atoms: int) -> nx.Graph:
        """random tree with valence cap plus occasional ring closures"""
        g = nx.Graph()
        g.add_node(0)
        for k in range(1, n_atoms):
            open_nodes = [v for v in g.nodes if g.degree[v] < MAX_VALENCE]
            g.add_edge(k, int(self.rng.choice(open_nodes)))
        n_rings = int(self.rng.integers(0, n_atoms // 6 + 1))
        for _ in range(n_rings):
            lengths = dict(nx.all_pairs_shortest_path_length(g))
            candidates = [
                (u, v) for u in g.nodes for v in g.nodes
                if u < v and 4 <= lengths[u][v] <= 5
                and g.degree[u] < MAX_VALENCE and g.degree[v] < MAX_VALENCE
            ]
            if not candidates:
                break
            u, v = candidates[int(self.rng.integers(len(candidates)))]
            g.add_edge(u, v)
        for u, v in sorted(g.edges):
            g.edges[u, v]["bond"] = BOND_TYPES[int(self.rng.choice(len(BOND_TYPES), p=BOND_PROBS))]
        return g

    def _bond_direction(self, coords: np.ndarray, placed: list[int], parent: int, back: Optional[int]) -> np.ndarray:
        """unit bond vector from parent at the tetrahedral angle to the parent's own bond"""
        best, best_clearance = None, -1.0
        for _ in range(CANDIDATE_DIRECTIONS):
            w = self.rng.normal(size=3)
            if back is None:
                d = w / np.linalg.norm(w)
            else:
                b = coords[parent] - coords[back]
                b = b / np.linalg.norm(b)
                w = w - (w @ b) * b
                w = w / np.linalg.norm(w)
                d = -np.cos(TETRAHEDRAL) * b + np.sin(TETRAHEDRAL) * w
            others = [v for v in placed if v != parent]
            tip = coords[parent] + BOND_LENGTH * d
            clearance = min((np.linalg.norm(tip - coords[v]) for v in others), default=np.inf)
            if clearance > best_clearance:
                best, best_clearance = d, clearance
        return best

    def embed(self, g: nx.Graph) -> np.ndarray:
        """breadth-first build-out with fixed bond length and tetrahedral bond angles"""
        coords = np.zeros((g.number_of_nodes(), 3))
        parents: dict[int, Optional[int]] = {0: None}
        placed = [0]
        for parent, child in nx.bfs_edges(g, 0):
            d = self._bond_direction(coords, placed, parent, parents[parent])
            coords[child] = coords[parent] + BOND_LENGTH * d
            parents[child] = parent
            placed.append(child)
        return coords - coords.mean(axis=0)

    def _torsion(self, coords: np.ndarray, bond: tuple[int, int], side: list[int]) -> np.ndarray:
        u, v = bond
        axis = coords[v] - coords[u]
        axis = axis / np.linalg.norm(axis)
        angle = self.rng.uniform(np.pi / 3, np.pi) * self.rng.choice([-1.0, 1.0])
        # Rodrigues rotation of one side about the bond axis
        rel = coords[side] - coords[v]
        cos, sin = np.cos(angle), np.sin(angle)
        rotated = (
            rel * cos
            + np.cross(axis, rel) * sin
            + np.outer(rel @ axis, axis) * (1 - cos)
        )
        res = coords.copy()
        res[side] = rotated + coords[v]
        return res

    def rotatable(self, g: nx.Graph, coords: np.ndarray) -> list[tuple[tuple[int, int], list[int]]]:
        """bridges (u, v) with the atoms beyond v that sit off the bond axis"""
        res = []
        for a, b in sorted(nx.bridges(g)):
            h = g.copy()
            h.remove_edge(a, b)
            for u, v in ((a, b), (b, a)):
                side = sorted(nx.node_connected_component(h, v) - {v})
                if not side:
                    continue
                axis = coords[v] - coords[u]
                axis = axis / np.linalg.norm(axis)
                rel = coords[side] - coords[v]
                offset = np.linalg.norm(rel - np.outer(rel @ axis, axis), axis=1).max()
                if offset > MIN_TORSION_OFFSET:
                    res.append(((u, v), side))
        return res

    def conformers(self, g: nx.Graph, base: np.ndarray, count: int) -> list[np.ndarray]:
        """torsion-like perturbations of the base embedding, pairwise distinct"""
        rotatable = self.rotatable(g, base)
        res = [base]
        attempts = 0
        while len(res) < count:
            attempts += 1
            if attempts > MAX_ATTEMPTS * count:
                raise DatasetError("could not generate distinct conformers")
            # widen the perturbation after every round of rejected attempts
            boost = 1.0 + (attempts - 1) // count
            coords = base
            if rotatable:
                for _ in range(int(self.rng.integers(1, 4))):
                    bond, side = rotatable[int(self.rng.integers(len(rotatable)))]
                    coords = self._torsion(coords, bond, side)
            noise = (0.3 if not rotatable else 0.05) * boost
            coords = coords + self.rng.normal(scale=noise, size=coords.shape)
            coords = coords - coords.mean(axis=0)
            if all(rmsd_kabsch(coords, other) > MIN_CONFORMER_RMSD for other in res):
                res.append(coords)
            else:
                self.log.debug("rejected conformer candidate %d (noise %.2f)", attempts, noise)
        return res

    def molecule(self, index: int, atoms_range: Sequence[int], conformers_range: Sequence[int]) -> Molecule:
        n_atoms = int(self.rng.integers(atoms_range[0], atoms_range[1] + 1))
        n_conf = int(self.rng.integers(conformers_range[0], conformers_range[1] + 1))
        g = self.graph(n_atoms)
        atom_types = self.rng.integers(0, N_ATOM_TYPES, size=n_atoms).tolist()
        coords = self.conformers(g, self.embed(g), n_conf)
        graph = MoleculeGraph(
            atom_types, [(u, v, g.edges[u, v]["bond"]) for u, v in sorted(g.edges)]
        )
        ensemble = ConformerEnsemble(torch.as_tensor(np.stack(coords)))
        return Molecule(f"mol-{index:04d}", graph, ensemble)


def gen_synthetic_dataset(
    n_molecules: int,
    atoms_range: Sequence[int] = (5, 16),
    conformers_range: Sequence[int] = (1, 4),
    seed: int = 0,
) -> DatasetFile:
    """deterministic synthetic conformer dataset"""
    if n_molecules < 1:
        raise DatasetError("n_molecules must be at least 1")
    _check_range("atoms", atoms_range, 3, MAX_ATOMS)
    _check_range("conformers", conformers_range, 1, MAX_CONFORMERS)
    gen = SyntheticGenerator(seed)
    molecules = [gen.molecule(i, atoms_range, conformers_range) for i in range(n_molecules)]
    metadata = {
        "generator": "synthetic",
        "seed": seed,
        "n_molecules": n_molecules,
        "atoms_range": list(atoms_range),
        "conformers_range": list(conformers_range),
    }
    gen.log.info("generated %d synthetic molecules (seed %d)", n_molecules, seed)
    return DatasetFile(molecules, metadata)


def bundled_dataset() -> DatasetFile:
    """the 32-molecule desk-scale reference set"""
    return gen_synthetic_dataset(32, seed=0)
