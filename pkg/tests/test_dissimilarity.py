import numpy as np
import pytest
from hypothesis import given, strategies as st

from satgnn import autodiff as ad
from satgnn.autodiff import Tensor
from satgnn.dissimilarity import (
    DissimilarityMix,
    StructuralEmbedding,
    edge_dissimilarity,
    mf_loss,
    relative_dissimilarity,
    sample_non_edges,
)
from satgnn.graph import Graph

from conftest import random_graph
from oracles import mp_softmax


def two_node():
    return Graph.from_edges(2, [(0, 1)], np.ones((2, 1)))


def edge_between(g, dst, src):
    return int(np.flatnonzero((g.row == dst) & (g.indices == src))[0])


def test_self_distance_is_zero(rng, toy_graph):
    S = edge_dissimilarity(rng.normal(size=(6, 2, 3)), rng.normal(size=(6, 4)), DissimilarityMix(2), toy_graph)
    assert np.all(S.data[toy_graph.is_self_loop] == 0.0)


def test_feature_only_squared_distance():
    g = two_node()
    S = edge_dissimilarity(np.array([[1.0, 0.0], [0.0, 1.0]]), None, DissimilarityMix(1, "feature"), g)
    assert S.data[edge_between(g, 0, 1)] == 2.0


def test_half_half_mix_arithmetic():
    g = two_node()
    feats = np.array([[0.0, 0.0], [1.0, 1.0]])  # squared distance 2
    P = np.array([[0.0, 0.0], [2.0, 0.0]])  # squared distance 4
    S = edge_dissimilarity(feats, P, DissimilarityMix(1), g)
    assert S.data[edge_between(g, 0, 1)] == pytest.approx(3.0, abs=1e-15)


def test_mix_weights_sum_to_one(rng):
    mix = DissimilarityMix(4)
    mix.logits.data = rng.normal(size=(4, 2)) * 5
    r_f, r_p = mix.weights()
    assert np.all((r_f.data > 0) & (r_p.data > 0))
    np.testing.assert_allclose(r_f.data + r_p.data, 1.0, atol=1e-15)


def test_unknown_mode_rejected():
    with pytest.raises(ValueError):
        DissimilarityMix(1, "both-ish")


def test_structure_needs_embedding(toy_graph, rng):
    with pytest.raises(ValueError):
        edge_dissimilarity(rng.normal(size=(6, 2)), None, DissimilarityMix(1), toy_graph)
    with pytest.raises(ad.ShapeError):
        edge_dissimilarity(rng.normal(size=(6, 2)), np.zeros((5, 2)), DissimilarityMix(1), toy_graph)


@given(st.integers(2, 10), st.floats(0.1, 0.9), st.integers(0, 2**31 - 1))
def test_dissimilarity_nonnegative_and_symmetric(n, p, seed):
    rng = np.random.default_rng(seed)
    g = random_graph(n, p, rng)
    mix = DissimilarityMix(3)
    mix.logits.data = rng.normal(size=(3, 2))
    S = edge_dissimilarity(rng.normal(size=(n, 3, 2)), rng.normal(size=(n, 2)), mix, g).data
    assert S.shape == (g.num_edges, 3)
    assert np.all(S >= 0)
    np.testing.assert_allclose(S, S[g.reverse], atol=1e-12)


def test_relative_dissimilarity_examples(star_graph):
    np.testing.assert_array_equal(relative_dissimilarity(np.zeros(2), Graph.from_edges(2, np.zeros((0, 2)), np.ones((2, 1)))).data, [1, 1])
    seg = star_graph.row == 0
    S = np.zeros(star_graph.num_edges)
    S[seg] = [0.0, 1.0, 2.0]
    got = relative_dissimilarity(S, star_graph).data[seg]
    np.testing.assert_allclose(got, [float(v) for v in mp_softmax([0, 1, 2])], rtol=1e-14)
    np.testing.assert_allclose(got, [0.09003, 0.24473, 0.66524], atol=5e-6)
    two = Graph.from_edges(2, [(0, 1)], np.ones((2, 1)))
    np.testing.assert_allclose(relative_dissimilarity(np.zeros(4), two).data, 0.5)


@given(st.integers(2, 10), st.floats(0.1, 0.9), st.integers(0, 2**31 - 1))
def test_T_is_a_distribution(n, p, seed):
    rng = np.random.default_rng(seed)
    g = random_graph(n, p, rng)
    T = relative_dissimilarity(rng.exponential(size=g.num_edges) * 3, g).data
    assert np.all((T > 0) & (T <= 1))
    np.testing.assert_allclose(ad.segment_reduce_sum(T, g), 1.0, atol=1e-12)


def test_dissimilarity_gradients(rng, toy_graph):
    feats = Tensor(rng.normal(size=(6, 2, 3)), True)
    emb = StructuralEmbedding(6, 3, rng)
    mix = DissimilarityMix(2)
    mix.logits.data = rng.normal(size=(2, 2))
    w = rng.normal(size=(toy_graph.num_edges, 2))
    loss = lambda: ad.tsum(edge_dissimilarity(feats, emb, mix, toy_graph) * w)
    assert ad.gradcheck(loss, [feats, emb.weight, mix.logits]) < 1e-4


# ------------------------------------------------------------------ MF loss


def brute_force_mf(P, graph):
    a = graph.adjacency.toarray()
    return float(((a - P @ P.T) ** 2).sum())


def test_mf_loss_examples():
    g = Graph.from_edges(4, [(0, 1), (1, 2), (2, 3)], np.ones((4, 1)))
    assert mf_loss(np.zeros((4, 2)), g).item() == 6.0
    assert mf_loss(np.array([[1.0, 0.0], [1.0, 0.0]]), two_node()).item() == pytest.approx(2.0, abs=1e-14)


def test_mf_loss_exact_matches_brute_force(rng):
    g = random_graph(20, 0.2, rng)
    P = rng.normal(size=(20, 4))
    assert mf_loss(P, g).item() == pytest.approx(brute_force_mf(P, g), rel=1e-12)


def test_mf_loss_gradient(rng, toy_graph):
    emb = StructuralEmbedding(6, 3, rng, std=0.5)
    assert ad.gradcheck(lambda: mf_loss(emb, toy_graph), [emb.weight]) < 1e-4


def test_sampled_mf_loss_is_unbiased(rng):
    g = random_graph(50, 0.1, rng)
    P = rng.normal(0, 0.3, size=(50, 3))
    exact = mf_loss(P, g).item()
    samples = [mf_loss(P, g, negative_ratio=5, exact_threshold=10, rng=rng).item() for _ in range(1000)]
    assert abs(np.mean(samples) - exact) / exact < 0.05


def test_sampled_mode_validates_arguments(rng, toy_graph):
    with pytest.raises(ValueError):
        mf_loss(np.zeros((6, 2)), toy_graph, negative_ratio=0, exact_threshold=1, rng=rng)
    with pytest.raises(ValueError):
        mf_loss(np.zeros((6, 2)), toy_graph, exact_threshold=1)


def test_sampled_non_edges_avoid_edges(rng):
    g = random_graph(12, 0.4, rng)
    src, dst = sample_non_edges(g.adjacency, 500, rng)
    assert np.all(g.adjacency.toarray()[src, dst] == 0)
