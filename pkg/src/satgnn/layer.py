"""Selective Attention layer.

One layer maps node features h (N x D_in) through K heads. Each head
projects Wh, scores neighbors with a GAT-style attention vector to get
feature correlations f, reshapes them with the dissimilarity S into
attention coefficients alpha, and aggregates

    h'_i = (alpha_ii + eps / |N_i|) Wh_i + sum_{j != i} alpha_ij Wh_j.

Heads are stored stacked: ``W`` is (D_in, K * D_out) so that head k is the
column block k, and all per-edge quantities have shape (E, K).
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .autodiff import Tensor
from .dissimilarity import (
    FEATURE_AND_STRUCTURE,
    FEATURE_ONLY,
    DissimilarityMix,
    edge_dissimilarity,
    relative_dissimilarity,
)

log = logging.getLogger(__name__)

CONTRACTIVE = "contractive"
SUBTRACTIVE = "subtractive"
NO_SELECTION = "none"
STRATEGIES = (CONTRACTIVE, SUBTRACTIVE, NO_SELECTION)

_fallbacks = 0


class SuppressedNeighborhoodWarning(RuntimeWarning):
    pass


def fallback_count() -> int:
    """Neighborhoods so far where subtractive attention removed all mass."""
    return _fallbacks


def reset_fallback_count() -> None:
    global _fallbacks
    _fallbacks = 0


@dataclass
class EdgeAttention:
    """Per-edge attention quantities of one layer, each of shape (E, K)."""

    correlation: np.ndarray
    alpha: np.ndarray
    dissimilarity: Optional[np.ndarray] = None
    relative_dissimilarity: Optional[np.ndarray] = None


def check_beta(beta: float) -> float:
    beta = float(beta)
    if not 0.0 < beta <= 1.0:
        raise ValueError(f"beta must lie in (0, 1], got {beta}")
    return beta


# ------------------------------------------------------------- functional


def attention_logits(projected, a, graph, slope: float = 0.2) -> Tensor:
    """LeakyReLU(a^T [Wh_i || Wh_j]) per edge; projected is (N, K, F), a is (K, 2F)."""
    f_dim = projected.shape[-1]
    s_dst = ad.tsum(projected * ad.take_cols(a, slice(0, f_dim)), axis=-1)
    s_src = ad.tsum(projected * ad.take_cols(a, slice(f_dim, 2 * f_dim)), axis=-1)
    return ad.leaky_relu(ad.gather_dst(s_dst, graph) + ad.gather_src(s_src, graph), slope)


def feature_correlation(projected, a, graph, slope: float = 0.2) -> Tensor:
    return ad.edge_segment_softmax(attention_logits(projected, a, graph, slope), graph)


def contractive_scores(correlation, dissimilarity, beta: float, graph) -> Tensor:
    """alpha ∝ f * exp(-beta S) within each neighborhood, evaluated as softmax(log f - beta S)."""
    check_beta(beta)
    return ad.edge_segment_softmax(ad.log(correlation) - ad.as_tensor(dissimilarity) * beta, graph)


def subtractive_scores(correlation, relative, beta: float, graph) -> Tensor:
    """alpha ∝ f * (1 - beta T) within each neighborhood.

    A neighborhood whose weights all vanish keeps alpha = f.
    """
    global _fallbacks
    check_beta(beta)
    f = ad.as_tensor(correlation)
    w = f * (1.0 - ad.as_tensor(relative) * beta)
    denom = ad.segment_sum(w, graph)
    dead = denom.data <= 0.0
    if not dead.any():
        return w / ad.gather_dst(denom, graph)
    n_dead = int(dead.sum())
    _fallbacks += n_dead
    warnings.warn(
        "subtractive attention removed every neighbor of a node; using feature correlations there",
        SuppressedNeighborhoodWarning,
        stacklevel=2,
    )
    log.debug("subtractive fallback on %d neighborhoods", n_dead)
    dead_edge = dead[graph.row].astype(np.float64)
    safe = denom + dead.astype(np.float64)
    return w / ad.gather_dst(safe, graph) + f * dead_edge


def aggregate(projected, alpha, eps, graph) -> Tensor:
    """Attention-weighted sum plus the eps / |N_i| self term.

    ``projected`` is (N, K, F), ``alpha`` is (E, K), ``eps`` is (K,) or None.
    """
    out = ad.edge_weighted_aggregate(alpha, projected, graph)
    if eps is None:
        return out
    inv_deg = (1.0 / graph.degree).reshape(-1, 1, 1)
    return out + projected * (ad.reshape(eps, (1, -1, 1)) * inv_deg)


def combine_heads(out, concat: bool) -> Tensor:
    """(N, K, F) -> (N, K*F) when concatenating, else the head mean (N, F)."""
    if concat:
        return ad.reshape(out, (out.shape[0], -1))
    return ad.mean(out, axis=1)


# ------------------------------------------------------------------ layer


def glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, shape)


class SALayer:
    """A multi-head Selective Attention layer."""

    def __init__(
        self,
        in_dim: int,
        out_dim: int,
        heads: int = 1,
        *,
        concat: bool = True,
        strategy: str = CONTRACTIVE,
        beta: float = 1.0,
        dissim: str = FEATURE_AND_STRUCTURE,
        use_epsilon: bool = True,
        dropout: float = 0.0,
        slope: float = 0.2,
        rng: Optional[np.random.Generator] = None,
        name: str = "layer",
    ):
        if strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {strategy!r}")
        if in_dim < 1 or out_dim < 1 or heads < 1:
            raise ValueError("layer dimensions and head count must be positive")
        if not 0.0 <= dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_dim, self.out_dim, self.heads = in_dim, out_dim, heads
        self.concat = concat
        self.strategy = strategy
        self.beta = check_beta(beta) if strategy != NO_SELECTION else float(beta)
        self.dropout = float(dropout)
        self.slope = slope
        self.name = name

        self.weight = Tensor(
            glorot(rng, (in_dim, heads * out_dim), in_dim, heads * out_dim), True, name=f"{name}.weight"
        )
        self.attention = Tensor(glorot(rng, (heads, 2 * out_dim), heads, out_dim), True, name=f"{name}.attention")
        self.eps_raw = Tensor(np.zeros(heads), True, name=f"{name}.eps") if use_epsilon else None
        self.mix = DissimilarityMix(heads, dissim) if strategy != NO_SELECTION else None
        if self.mix is not None and self.mix.logits is not None:
            self.mix.logits.name = f"{name}.mix"
        self.last_attention: Optional[EdgeAttention] = None

    @property
    def out_width(self) -> int:
        return self.heads * self.out_dim if self.concat else self.out_dim

    @property
    def uses_structure(self) -> bool:
        return self.mix is not None and self.mix.mode != FEATURE_ONLY

    @property
    def uses_features(self) -> bool:
        return self.mix is not None and self.mix.mode in (FEATURE_AND_STRUCTURE, FEATURE_ONLY)

    def parameters(self) -> dict:
        params = {f"{self.name}.weight": self.weight, f"{self.name}.attention": self.attention}
        if self.eps_raw is not None:
            params[f"{self.name}.eps"] = self.eps_raw
        if self.mix is not None and self.mix.logits is not None:
            params[f"{self.name}.mix"] = self.mix.logits
        return params

    def decayed_parameters(self) -> set:
        return {f"{self.name}.weight", f"{self.name}.attention"}

    def epsilon(self) -> Optional[Tensor]:
        return None if self.eps_raw is None else ad.sigmoid(self.eps_raw)

    def project(self, h) -> Tensor:
        return ad.reshape(ad.linear(h, self.weight), (h.shape[0], self.heads, self.out_dim))

    def __call__(self, h, graph, embedding=None, *, training: bool = False, rng=None, record: bool = False):
        return self.forward(h, graph, embedding, training=training, rng=rng, record=record)

    def forward(self, h, graph, embedding=None, *, training: bool = False, rng=None, record: bool = False):
        if not sp.issparse(h):
            h = ad.as_tensor(h)
        if h.shape[0] != graph.num_nodes or h.shape[1] != self.in_dim:
            raise ad.ShapeError(f"{self.name}: expected ({graph.num_nodes}, {self.in_dim}), got {h.shape}")
        dropping = training and self.dropout > 0.0
        projected = self.project(ad.dropout(h, self.dropout, rng, training))
        logits = attention_logits(projected, self.attention, graph, self.slope)

        dissim = relative = corr = None
        if self.strategy == NO_SELECTION:
            alpha = corr = ad.edge_segment_softmax(logits, graph)
        else:
            # dissimilarity always sees the un-dropped projection
            clean = self.project(h) if (dropping and self.uses_features) else projected
            dissim = edge_dissimilarity(clean, embedding, self.mix, graph)
            if self.strategy == CONTRACTIVE:
                alpha = ad.edge_segment_softmax(logits - dissim * self.beta, graph)
                if record:
                    corr = ad.edge_segment_softmax(logits.data, graph)
            else:
                corr = ad.edge_segment_softmax(logits, graph)
                relative = relative_dissimilarity(dissim, graph)
                alpha = subtractive_scores(corr, relative, self.beta, graph)

        if record:
            self.last_attention = EdgeAttention(
                correlation=corr.data.copy(),
                alpha=alpha.data.copy(),
                dissimilarity=None if dissim is None else dissim.data.copy(),
                relative_dissimilarity=None if relative is None else relative.data.copy(),
            )
        out = aggregate(projected, ad.dropout(alpha, self.dropout, rng, training), self.epsilon(), graph)
        return combine_heads(out, self.concat)


def multi_head_forward(
    h,
    layer: SALayer,
    graph,
    embedding=None,
    activation: Optional[Callable[[Tensor], Tensor]] = None,
    **kwargs,
) -> Tensor:
    """Run ``layer`` (concat or mean over its heads) and apply ``activation``."""
    out = layer(h, graph, embedding, **kwargs)
    return activation(out) if activation is not None else out


def op_counts(num_nodes: int, num_edges: int, d_in: int, d_out: int, heads: int, c: int) -> dict:
    """Multiply-add counts of one layer's forward pass, split by stage.

    Projection K*N*D_in*D_out and aggregation K*E*D_out match a plain
    attention layer; the dissimilarity adds K*E*(D_out + 2C).
    """
    return {
        "projection": heads * num_nodes * d_in * d_out,
        "aggregation": heads * num_edges * d_out,
        "dissimilarity": heads * num_edges * (d_out + 2 * c),
    }
