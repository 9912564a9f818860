"""Synthetic citation-like graphs for smoke tests and offline demos."""

from __future__ import annotations

import numpy as np

from .graph import Graph


def planetoid_style_splits(labels: np.ndarray, num_classes: int, rng, per_class: int = 20,
                           num_val: int = 500, num_test: int = 1000) -> dict:
    """``per_class`` train nodes per label, then disjoint val and test draws from the rest."""
    train = []
    for c in range(num_classes):
        members = np.flatnonzero(labels == c)
        train.extend(rng.permutation(members)[:per_class].tolist())
    train = np.sort(np.array(train, dtype=np.int64))
    rest = rng.permutation(np.setdiff1d(np.arange(len(labels)), train))
    num_val = min(num_val, len(rest) // 2)
    val = np.sort(rest[:num_val])
    test = np.sort(rest[num_val:num_val + num_test])
    return {"train": train, "val": val, "test": test}


def planted_partition(
    num_nodes: int = 300,
    num_classes: int = 3,
    num_features: int = 50,
    avg_degree: float = 4.0,
    homophily: float = 0.8,
    feature_signal: float = 0.15,
    density: float = 0.05,
    seed: int = 0,
    **split_kw,
) -> Graph:
    """Stochastic block model with sparse binary bag-of-words style features.

    A fraction ``homophily`` of edges join same-class nodes. Each class owns
    a block of feature columns that its nodes switch on with extra
    probability ``feature_signal`` on top of background ``density``.
    """
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, num_classes, num_nodes)
    num_edges = int(round(avg_degree * num_nodes / 2))
    src = rng.integers(0, num_nodes, num_edges)
    dst = np.empty_like(src)
    by_class = [np.flatnonzero(labels == c) for c in range(num_classes)]
    same = rng.random(num_edges) < homophily
    for e in range(num_edges):
        pool = by_class[labels[src[e]]] if same[e] else np.arange(num_nodes)
        dst[e] = pool[rng.integers(0, len(pool))]
    keep = src != dst
    edges = np.stack([src[keep], dst[keep]], axis=1)

    block = max(1, num_features // num_classes)
    prob = np.full((num_nodes, num_features), density)
    for c in range(num_classes):
        prob[np.ix_(labels == c, np.arange(c * block, min((c + 1) * block, num_features)))] += feature_signal
    features = (rng.random((num_nodes, num_features)) < prob).astype(np.float64)

    split_kw.setdefault("num_val", num_nodes // 4)
    split_kw.setdefault("num_test", num_nodes // 2)
    splits = planetoid_style_splits(labels, num_classes, rng, **split_kw)
    return Graph.from_edges(num_nodes, edges, features, labels, num_classes, splits)
