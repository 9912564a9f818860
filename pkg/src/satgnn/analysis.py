"""Attention-score statistics, beta sweeps and neighborhood irrelevance measures."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .graph import Graph, common_neighbor_counts, feature_distance_stats
from .model import SATModel, TrainConfig, run_seeds, build_model, train

HIST_BINS = 50


def output_attention(model: SATModel, graph: Graph) -> np.ndarray:
    """Output-layer alpha per directed edge, averaged over output heads (one head by default)."""
    model.logits(graph, record=True)
    return model.output.last_attention.alpha.mean(axis=1)


def attention_histogram(alpha: np.ndarray, bins: int = HIST_BINS) -> tuple:
    counts, edges = np.histogram(alpha, bins=bins, range=(0.0, 1.0))
    return counts, edges


@dataclass
class LowAttention:
    threshold: float
    count: int
    edges: int

    @property
    def fraction(self) -> float:
        return self.count / self.edges if self.edges else 0.0


def low_attention(alpha: np.ndarray, graph: Graph, threshold: float = 0.05) -> LowAttention:
    """Directed neighbor edges (self-loops excluded) with alpha <= threshold."""
    mask = ~graph.is_self_loop
    return LowAttention(threshold, int(np.count_nonzero(alpha[mask] <= threshold)), int(mask.sum()))


def _sweep_one(args):
    config, graph, threshold = args
    model = build_model(config, graph)
    metrics = train(model, graph)
    low = low_attention(output_attention(model, graph), graph, threshold)
    return {
        "beta": config.beta,
        "seed": config.seed,
        "test_acc": metrics.test_acc,
        "val_acc": metrics.val_acc,
        "low_count": low.count,
        "low_fraction": low.fraction,
        "edges": low.edges,
    }


def beta_sweep(
    config: TrainConfig,
    graph: Graph,
    betas: Sequence[float] = (0.1, 0.5, 0.75, 1.0),
    threshold: float = 0.05,
    workers: int = 1,
) -> list:
    """One trained model per beta; rows of accuracy and low-attention counts."""
    jobs = [(config.replace(beta=float(b)), graph, threshold) for b in betas]
    if workers <= 1 or len(jobs) == 1:
        return [_sweep_one(j) for j in jobs]
    from concurrent.futures import ProcessPoolExecutor

    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_sweep_one, jobs))


def cumulative_histogram(values: np.ndarray, thresholds: np.ndarray) -> np.ndarray:
    """Fraction of ``values`` at or below each threshold."""
    if len(values) == 0:
        return np.zeros(len(thresholds))
    v = np.sort(values)
    return np.searchsorted(v, thresholds, side="right") / len(v)


@dataclass
class IrrelevanceSummary:
    pairs: int
    distance_above_07: float
    zero_common: float
    at_most_two_common: float
    distance_cdf: np.ndarray  # rows of (threshold, fraction <= threshold)
    common_cdf: np.ndarray  # rows of (k, count, fraction <= k)

    def to_dict(self) -> dict:
        return {
            "pairs": self.pairs,
            "fraction_distance_above_0.7": self.distance_above_07,
            "fraction_zero_common_neighbors": self.zero_common,
            "fraction_at_most_two_common_neighbors": self.at_most_two_common,
        }


def irrelevance_stats(graph: Graph, steps: int = 20) -> IrrelevanceSummary:
    """Normalized feature distance and common-neighbor counts over connected pairs."""
    dist = feature_distance_stats(graph)
    common = common_neighbor_counts(graph)
    grid = np.linspace(0.0, 1.0, steps + 1)
    dist_cdf = np.stack([grid, cumulative_histogram(dist, grid)], axis=1)
    kmax = int(common.max()) if len(common) else 0
    ks = np.arange(kmax + 1)
    counts = np.bincount(common, minlength=kmax + 1) if len(common) else np.zeros(1, dtype=np.int64)
    frac = np.cumsum(counts) / max(len(common), 1)
    n = max(len(dist), 1)
    return IrrelevanceSummary(
        pairs=len(dist),
        distance_above_07=float(np.count_nonzero(dist > 0.7) / n),
        zero_common=float(np.count_nonzero(common == 0) / n),
        at_most_two_common=float(np.count_nonzero(common <= 2) / n),
        distance_cdf=dist_cdf,
        common_cdf=np.stack([ks, counts, frac], axis=1),
    )


def seed_summary(config: TrainConfig, graph: Graph, seeds: Sequence[int], workers: int = 1) -> dict:
    runs = run_seeds(config, graph, seeds, workers)
    test = np.array([m.test_acc for m in runs])
    cluster = np.array([m.cluster_acc for m in runs])
    return {
        "seeds": list(seeds),
        "test_acc": test.tolist(),
        "cluster_acc": cluster.tolist(),
        "test_mean": float(test.mean()),
        "test_std": float(test.std()),
        "cluster_mean": float(cluster.mean()),
        "cluster_std": float(cluster.std()),
    }
