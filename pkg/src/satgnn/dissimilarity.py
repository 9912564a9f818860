"""Learnable node-node dissimilarity and the structural embedding.

Per directed edge (i <- j) the dissimilarity is

    S_ij = r_f * ||Wh_i - Wh_j||^2 + r_p * ||p_i - p_j||^2,   r_f + r_p = 1

where Wh are the head's projected features and p_i are rows of an N x C
embedding trained so that P P^T reconstructs the adjacency matrix.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

FEATURE_AND_STRUCTURE = "both"
FEATURE_ONLY = "feature"
STRUCTURE_ONLY = "structure"
DISSIM_MODES = (FEATURE_AND_STRUCTURE, FEATURE_ONLY, STRUCTURE_ONLY)


class StructuralEmbedding:
    """The N x C structural embedding matrix, shared by every head and layer."""

    def __init__(self, num_nodes: int, dim: int, rng: np.random.Generator, std: float = 0.1):
        self.weight = Tensor(rng.normal(0.0, std, (num_nodes, dim)), True, name="embedding")

    @property
    def shape(self) -> tuple:
        return self.weight.shape


class DissimilarityMix:
    """Per-head mixing weights (r_f, r_p) from a softmax over two logits.

    In the single-source modes the weights are fixed constants and no
    logits exist, so nothing is learned.
    """

    def __init__(self, heads: int, mode: str = FEATURE_AND_STRUCTURE):
        if mode not in DISSIM_MODES:
            raise ValueError(f"unknown dissimilarity mode {mode!r}")
        self.mode = mode
        self.heads = heads
        self.logits: Optional[Tensor] = None
        if mode == FEATURE_AND_STRUCTURE:
            self.logits = Tensor(np.zeros((heads, 2)), True, name="mix")

    def weights(self):
        """Return (r_f, r_p), each a Tensor of shape (heads,) or None when zero."""
        if self.mode == FEATURE_ONLY:
            return Tensor(np.ones(self.heads)), None
        if self.mode == STRUCTURE_ONLY:
            return None, Tensor(np.ones(self.heads))
        r = ad.softmax(self.logits, axis=-1)
        return ad.take_cols(r, 0), ad.take_cols(r, 1)


def _embedding_tensor(embedding) -> Tensor:
    if isinstance(embedding, StructuralEmbedding):
        return embedding.weight
    return ad.as_tensor(embedding)


def squared_edge_distance(x, graph) -> Tensor:
    """||x_i - x_j||^2 for every directed edge; x is (N, F) or (N, K, F)."""
    diff = ad.gather_dst(x, graph) - ad.gather_src(x, graph)
    return ad.tsum(ad.square(diff), axis=-1)


def edge_dissimilarity(projected, embedding, mix: DissimilarityMix, graph) -> Tensor:
    """S per directed edge, shape (E, K) for (N, K, F) features or (E,) for (N, F).

    ``embedding`` may be a `StructuralEmbedding`, a Tensor, or None when the mix
    does not use structure.
    """
    projected = ad.as_tensor(projected)
    r_f, r_p = mix.weights()
    multi_head = projected.ndim == 3
    terms = []
    if r_f is not None:
        terms.append(squared_edge_distance(projected, graph) * r_f)
    if r_p is not None:
        if embedding is None:
            raise ValueError("structure-aware dissimilarity needs the structural embedding")
        emb = _embedding_tensor(embedding)
        if emb.shape[0] != graph.num_nodes:
            raise ad.ShapeError(f"embedding has {emb.shape[0]} rows, graph has {graph.num_nodes} nodes")
        dp = squared_edge_distance(emb, graph)
        if multi_head:
            dp = ad.reshape(dp, (-1, 1))
        terms.append(dp * r_p)
    if not multi_head:
        terms = [ad.reshape(t, (-1,)) if t.ndim == 2 else t for t in terms]
    return terms[0] if len(terms) == 1 else terms[0] + terms[1]


def relative_dissimilarity(dissimilarity, graph) -> Tensor:
    """exp(S_ij) / sum_k exp(S_ik) over each neighborhood."""
    return ad.edge_segment_softmax(dissimilarity, graph)


def mf_loss(
    embedding,
    graph,
    negative_ratio: int = 5,
    exact_threshold: int = 5000,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """sum_{i,j} (A_ij - [P P^T]_ij)^2 with A the self-loop-free adjacency.

    Up to ``exact_threshold`` nodes the full double sum is evaluated via
    ||A||^2 - 2<A, P P^T> + ||P^T P||^2, which costs O(|E| C + N C^2)
    rather than O(N^2). Above it, every edge term is kept and the non-edge
    terms are estimated from ``negative_ratio * nnz(A)`` uniformly sampled
    non-edge pairs, rescaled so the expectation matches the exact sum.
    """
    emb = _embedding_tensor(embedding)
    n = graph.num_nodes
    a = graph.adjacency
    if n <= exact_threshold:
        ap = ad.spmm(a, emb)
        cross = ad.tsum(emb * ap)
        gram = ad.matmul(ad.transpose(emb), emb)
        return ad.tsum(ad.square(gram)) - 2.0 * cross + float(a.nnz)

    if negative_ratio < 1:
        raise ValueError("negative_ratio must be >= 1 in sampled mode")
    if rng is None:
        raise ValueError("sampled mf_loss needs an rng")
    coo = a.tocoo()
    pi = ad.take_rows(emb, coo.row)
    pj = ad.take_rows(emb, coo.col)
    edge_term = ad.tsum(ad.square(1.0 - ad.tsum(pi * pj, axis=1)))

    non_edges = n * n - a.nnz
    m = negative_ratio * a.nnz
    src, dst = sample_non_edges(a, m, rng)
    qi = ad.take_rows(emb, src)
    qj = ad.take_rows(emb, dst)
    neg_term = ad.tsum(ad.square(ad.tsum(qi * qj, axis=1)))
    return edge_term + neg_term * (non_edges / m)


def sample_non_edges(a, m: int, rng: np.random.Generator):
    """``m`` (i, j) pairs drawn uniformly with replacement from the zeros of ``a``.

    The diagonal counts as a non-edge since ``a`` has no self-loops.
    """
    n = a.shape[0]
    a = a.tocsr()
    src = np.empty(0, dtype=np.int64)
    dst = np.empty(0, dtype=np.int64)
    while len(src) < m:
        need = m - len(src)
        i = rng.integers(0, n, size=2 * need + 16)
        j = rng.integers(0, n, size=2 * need + 16)
        hit = np.asarray(a[i, j]).ravel() != 0
        src = np.concatenate([src, i[~hit]])
        dst = np.concatenate([dst, j[~hit]])
    return src[:m], dst[:m]
