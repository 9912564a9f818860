import json
import os
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, strategies as st

from satgnn.graph import (
    BundleFormatError,
    FeatureReducer,
    Graph,
    GraphValidationError,
    common_neighbor_counts,
    feature_distance_stats,
    load_bundle,
    reduce_features,
    save_bundle,
)

from conftest import random_graph

DATA = Path(os.environ.get("SATGNN_DATA", "data"))


def write_bundle(path, edges="0\t1\n", features="1,0\n0,1\n", labels="0\n1\n", splits=None):
    path.mkdir(parents=True, exist_ok=True)
    (path / "edges.tsv").write_text(edges)
    (path / "features.csv").write_text(features)
    (path / "labels.txt").write_text(labels)
    (path / "splits.json").write_text(json.dumps(splits or {"train": [0], "val": [], "test": [1]}))
    return path


def test_two_node_bundle_symmetrizes_and_adds_self_loops(tmp_path):
    g = load_bundle(write_bundle(tmp_path / "b"))
    assert g.num_edges == 4
    assert set(zip(g.indices.tolist(), g.row.tolist())) == {(0, 1), (1, 0), (0, 0), (1, 1)}
    np.testing.assert_array_equal(g.indptr, [0, 2, 4])


def test_duplicate_and_reverse_edges_are_merged(tmp_path):
    g = load_bundle(write_bundle(tmp_path / "b", edges="0\t1\n1\t0\n0 1\n"))
    assert g.num_edges == 4


def test_sparse_features_are_detected(tmp_path):
    g = load_bundle(write_bundle(tmp_path / "b", features="# dim=4\n0:1.5 3:2\n\n"))
    np.testing.assert_array_equal(g.features, [[1.5, 0, 0, 2], [0, 0, 0, 0]])


@pytest.mark.parametrize(
    "kwargs, error, fragment",
    [
        ({"edges": "0\t1\nzero\tone\n"}, BundleFormatError, "edges.tsv:2"),
        ({"edges": "0\t5\n"}, GraphValidationError, "out of range"),
        ({"labels": "0\nx\n"}, BundleFormatError, "labels.txt:2"),
        ({"features": "1,0\n0,abc\n"}, BundleFormatError, "features.csv:2"),
        ({"features": "1,0\n"}, GraphValidationError, "feature rows"),
        ({"splits": {"train": [0], "val": [0], "test": [1]}}, GraphValidationError, "overlaps"),
        ({"splits": {"train": [9], "val": [], "test": []}}, GraphValidationError, "out of range"),
    ],
)
def test_malformed_bundles_are_rejected(tmp_path, kwargs, error, fragment):
    with pytest.raises(error, match=fragment):
        load_bundle(write_bundle(tmp_path / "b", **kwargs))


def test_missing_file_is_reported(tmp_path):
    path = write_bundle(tmp_path / "b")
    (path / "labels.txt").unlink()
    with pytest.raises(FileNotFoundError, match="labels.txt"):
        load_bundle(path)


def test_graph_invariants(rng):
    g = random_graph(12, 0.3, rng)
    assert np.all(np.diff(g.indptr) >= 1)
    assert g.indptr[-1] == g.num_edges
    assert np.all(g.indices[g.self_loop_index] == np.arange(12))
    assert np.all(g.indices[g.reverse] == g.row)
    a = g.adjacency.toarray()
    assert np.array_equal(a, a.T) and np.all(np.diag(a) == 0)


def test_asymmetric_csr_is_rejected():
    # 0 -> 1 without 1 -> 0
    with pytest.raises(GraphValidationError, match="symmetric"):
        Graph(np.array([0, 2, 3]), np.array([0, 1, 1]), np.ones((2, 1)), np.zeros(2), 1)


def test_graph_arrays_are_read_only(rng):
    g = random_graph(5, 0.5, rng)
    with pytest.raises(ValueError):
        g.features[0, 0] = 1.0


@given(st.integers(1, 12), st.floats(0.0, 1.0), st.integers(0, 2**31 - 1), st.booleans())
def test_bundle_round_trip(tmp_path_factory, n, p, seed, sparse):
    rng = np.random.default_rng(seed)
    base = random_graph(n, p, rng, dim=4)
    feats = np.where(rng.random(base.features.shape) < 0.5, 0.0, base.features)
    labels = rng.permutation(np.arange(n) % 3)  # num_classes is inferred from the largest label
    perm = rng.permutation(n)
    splits = {"train": np.sort(perm[: n // 3]), "val": np.sort(perm[n // 3: n // 2]), "test": np.sort(perm[n // 2:])}
    g = Graph(base.indptr, base.indices, feats, labels, int(labels.max()) + 1, splits, extra_splits=(splits,))
    path = tmp_path_factory.mktemp("rt")
    save_bundle(g, path, sparse=sparse)
    assert load_bundle(path).same_as(g)


def test_reduce_features_examples(rng):
    g = random_graph(4, 0.5, rng, dim=10)
    with pytest.warns(UserWarning):
        assert reduce_features(g, 512, rng) is None
    big = Graph.from_edges(3, [(0, 1)], rng.normal(size=(3, 4973)))
    layer = reduce_features(big, 512, rng)
    assert layer.weight.shape == (4973, 512)
    assert layer(big.features).shape == (3, 512)
    assert np.all(FeatureReducer(6, 2, rng)(np.zeros((5, 6))).data == 0)


def test_common_neighbor_examples():
    tri = Graph.from_edges(3, [(0, 1), (1, 2), (0, 2)], np.ones((3, 1)))
    np.testing.assert_array_equal(common_neighbor_counts(tri), [1, 1, 1])
    path = Graph.from_edges(3, [(0, 1), (1, 2)], np.ones((3, 1)))
    np.testing.assert_array_equal(common_neighbor_counts(path), [0, 0])


def test_common_neighbors_match_set_oracle(rng):
    g = random_graph(15, 0.3, rng)
    nbrs = {i: set(g.indices[g.indptr[i]:g.indptr[i + 1]].tolist()) - {i} for i in range(15)}
    expected = [len((nbrs[i] & nbrs[j]) - {i, j}) for i, j in g.undirected_edges()]
    np.testing.assert_array_equal(common_neighbor_counts(g), expected)


def test_feature_distance_examples():
    feats = np.array([[0.0, 0.0], [3.0, 4.0], [0.0, 1.0]])
    g = Graph.from_edges(3, [(0, 1), (0, 2)], feats)
    np.testing.assert_allclose(feature_distance_stats(g), [1.0, 0.2])
    same = Graph.from_edges(3, [(0, 1), (1, 2)], np.ones((3, 2)))
    with pytest.warns(UserWarning):
        np.testing.assert_array_equal(feature_distance_stats(same), [0.0, 0.0])


@pytest.mark.parametrize("name, n, c, d", [("cora", 2708, 7, 1433), ("citeseer", 3327, 6, 3703)])
def test_planetoid_bundle_shapes(name, n, c, d):
    path = DATA / name
    if not path.is_dir():
        pytest.skip(f"{path} not available")
    g = load_bundle(path)
    assert (g.num_nodes, g.num_classes, g.num_features) == (n, c, d)
