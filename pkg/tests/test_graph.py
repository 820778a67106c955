"""test_graph.py

Molecular graphs, featurization and Laplacian positional encodings.
"""
import pytest
import torch

from avgflow.errors import DomainError
from avgflow.graph import MoleculeGraph, feature_width, featurize, laplacian_encoding


@pytest.fixture
def path_graph():
    return MoleculeGraph([0, 1, 2, 1], [(0, 1), (1, 2, "double"), (2, 3)])


def test_degree_and_laplacian(path_graph):
    assert path_graph.degree.tolist() == [1, 2, 2, 1]
    lap = path_graph.laplacian()
    assert torch.equal(lap, lap.T)
    assert torch.allclose(lap.sum(1), torch.zeros(4, dtype=lap.dtype))


def test_bond_matrix(path_graph):
    bonds = path_graph.bond_matrix()
    assert int(bonds[1, 2]) == int(bonds[2, 1]) == 2
    assert int(bonds[0, 3]) == 0


def test_rejects_invalid_edges():
    with pytest.raises(DomainError):
        MoleculeGraph([0, 0], [(0, 0)])
    with pytest.raises(DomainError):
        MoleculeGraph([0, 0], [(0, 1), (1, 0)])
    with pytest.raises(DomainError):
        MoleculeGraph([0, 0], [(0, 2)])
    with pytest.raises(DomainError):
        MoleculeGraph([0, 0], [(0, 1, "quadruple")])
    with pytest.raises(DomainError):
        MoleculeGraph([9], [])


def test_connected(path_graph):
    assert path_graph.is_connected()
    assert not MoleculeGraph([0, 0, 0], [(0, 1)]).is_connected()


def test_encoding_sign_convention(path_graph):
    pe = path_graph.laplacian_pe
    for k in range(pe.shape[1]):
        column = pe[:, k]
        nonzero = column[column.abs() > 1e-8]
        if nonzero.numel():
            assert float(nonzero[0]) > 0


def test_encoding_zero_padded():
    pe = laplacian_encoding(3, [(0, 1), (1, 2)], width=8)
    assert pe.shape == (3, 8)
    assert torch.equal(pe[:, 2:], torch.zeros(3, 6, dtype=pe.dtype))


def test_encoding_per_component():
    # two disjoint edges: each component contributes one nontrivial eigenvector
    pe = laplacian_encoding(4, [(0, 1), (2, 3)], width=2)
    assert pe[:2].abs().sum() > 0
    assert pe[2:].abs().sum() > 0
    assert torch.isfinite(pe).all()


def test_isolated_atom_encoding():
    pe = laplacian_encoding(1, [], width=4)
    assert torch.equal(pe, torch.zeros(1, 4, dtype=pe.dtype))


def test_featurize_width(path_graph):
    feats = featurize(path_graph)
    assert feats.shape == (4, feature_width(path_graph.pe_width))
    # one-hot atom type then one-hot degree
    assert feats[:, :5].sum(1).tolist() == [1.0] * 4
    assert feats[:, 5:12].sum(1).tolist() == [1.0] * 4


def test_permute_relabels_atoms(path_graph):
    perm = [3, 2, 1, 0]
    g = path_graph.permute(perm)
    assert g.atom_types.tolist() == [1, 2, 1, 0]
    assert torch.equal(g.laplacian_pe, path_graph.laplacian_pe[perm])
    assert torch.equal(g.laplacian(), path_graph.laplacian()[perm][:, perm])


def test_permute_rejects_non_permutation(path_graph):
    with pytest.raises(DomainError):
        path_graph.permute([0, 0, 1, 2])


def test_dict_round_trip(path_graph):
    g = MoleculeGraph.from_dict(path_graph.to_dict())
    assert g.edges == path_graph.edges
    assert torch.equal(g.atom_types, path_graph.atom_types)
