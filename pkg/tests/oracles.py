"""Independent reference computations used by the tests.

Everything here is written densely (N x N matrices, explicit loops or
mpmath) so it shares no code path with the sparse edge kernels.
"""

import mpmath as mp
import numpy as np

mp.mp.dps = 40


def mp_softmax(xs):
    xs = [mp.mpf(x) for x in xs]
    z = [mp.e ** x for x in xs]
    s = sum(z)
    return [v / s for v in z]


def mp_contractive(f, S, beta):
    w = [mp.mpf(fi) * mp.e ** (-mp.mpf(beta) * mp.mpf(s)) for fi, s in zip(f, S)]
    tot = sum(w)
    return [float(x / tot) for x in w]


def mp_subtractive(f, S, beta):
    T = mp_softmax(S)
    w = [mp.mpf(fi) * (1 - mp.mpf(beta) * t) for fi, t in zip(f, T)]
    tot = sum(w)
    return [float(x / tot) for x in w]


def dense_mask(graph):
    m = np.zeros((graph.num_nodes, graph.num_nodes), dtype=bool)
    m[graph.row, graph.indices] = True
    return m


def dense_edge_softmax(logits_dense, mask):
    """Row softmax of an N x N score matrix restricted to ``mask``."""
    z = np.where(mask, logits_dense, -np.inf)
    z = z - z.max(axis=1, keepdims=True)
    e = np.where(mask, np.exp(z), 0.0)
    return e / e.sum(axis=1, keepdims=True)


def to_dense(graph, edge_values):
    out = np.zeros((graph.num_nodes, graph.num_nodes))
    out[graph.row, graph.indices] = edge_values
    return out


def dense_gat_head(x, W, a_dst, a_src, mask, slope=0.2):
    """Attention-only head: softmax_j LeakyReLU(a^T [Wx_i || Wx_j]), then sum alpha_ij Wx_j."""
    h = x @ W
    raw = (h @ a_dst)[:, None] + (h @ a_src)[None, :]
    e = np.where(raw > 0, raw, slope * raw)
    alpha = dense_edge_softmax(e, mask)
    return alpha @ h, alpha
