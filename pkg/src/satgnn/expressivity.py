"""Executable checks of what selective attention can and cannot tell apart.

A neighborhood is modelled as a multiset X = (M, mu) of feature vectors
around a central feature c, each distinct element x carrying a
dissimilarity S_cx and a correlation logit m_cx. Plain selective
attention aggregates

    h(c, X) = sum_x mu(x) alpha_x g(x)

with alpha normalized over the flattened multiset. If mu_2 = t * mu_1
and every S is equal, the attention weights rescale by exactly 1/t and
the two sums coincide, so the plain aggregator collides. Adding
eps / |X| * alpha_cc * g(c) breaks the tie whenever g(c) != 0, because
|X_1| != |X_2|.

`wl_refinement` provides the 1-WL color refinement used to cross-check
that the layer never separates nodes that 1-WL cannot.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .graph import Graph
from .layer import CONTRACTIVE, SUBTRACTIVE, SALayer, check_beta

PLAIN_TOL = 1e-12
DISTINCT_TOL = 1e-9


class HarnessError(AssertionError):
    pass


@dataclass
class Multiset:
    center: np.ndarray
    elements: list  # distinct feature vectors
    multiplicity: list
    dissim: list  # S between the center and each distinct element

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        self.elements = [np.asarray(x, dtype=np.float64) for x in self.elements]
        if not (len(self.elements) == len(self.multiplicity) == len(self.dissim)):
            raise ValueError("elements, multiplicity and dissim must align")
        if any(int(m) < 1 for m in self.multiplicity):
            raise ValueError("multiplicities must be >= 1")
        if any(s < 0 for s in self.dissim):
            raise ValueError("dissimilarities must be >= 0")
        keys = {x.tobytes() for x in self.elements}
        if len(keys) != len(self.elements):
            raise ValueError("underlying set must have distinct feature vectors")

    @property
    def size(self) -> int:
        return int(sum(self.multiplicity))

    def index_of_center(self) -> Optional[int]:
        for k, x in enumerate(self.elements):
            if np.array_equal(x, self.center):
                return k
        return None


@dataclass
class AggregatorSpec:
    strategy: str = CONTRACTIVE
    beta: float = 1.0
    epsilon: float = 0.0
    g: Optional[np.ndarray] = None  # None is the identity map
    correlations: Optional[Sequence[float]] = None  # m_cx per distinct element; None means all 0

    def __post_init__(self):
        if self.strategy not in (CONTRACTIVE, SUBTRACTIVE):
            raise ValueError(f"unknown strategy {self.strategy!r}")
        check_beta(self.beta)

    def apply_g(self, x: np.ndarray) -> np.ndarray:
        return x if self.g is None else self.g @ x


def attention_weights(spec: AggregatorSpec, m: Multiset) -> np.ndarray:
    """Per-copy attention alpha for each distinct element (sum over copies is 1)."""
    mu = np.asarray(m.multiplicity, dtype=np.float64)
    logits = np.zeros(len(mu)) if spec.correlations is None else np.asarray(spec.correlations, float)
    if logits.shape != mu.shape:
        raise ValueError("one correlation per distinct element is required")
    s = np.asarray(m.dissim, dtype=np.float64)
    z = np.exp(logits - logits.max())
    f = z / np.dot(mu, z)
    if spec.strategy == CONTRACTIVE:
        w = f * np.exp(-spec.beta * s)
    else:
        e = np.exp(s - s.max())
        t = e / np.dot(mu, e)
        w = f * (1.0 - spec.beta * t)
    total = np.dot(mu, w)
    if total <= 0:
        return f
    return w / total


def aggregate_multiset(spec: AggregatorSpec, m: Multiset) -> np.ndarray:
    alpha = attention_weights(spec, m)
    out = sum(mu * a * spec.apply_g(x) for x, mu, a in zip(m.elements, m.multiplicity, alpha))
    out = np.asarray(out, dtype=np.float64)
    k = m.index_of_center()
    if spec.epsilon > 0 and k is not None:
        alpha_cc = m.multiplicity[k] * alpha[k]
        out = out + spec.epsilon / m.size * alpha_cc * spec.apply_g(m.center)
    return out


def center_mass(spec: AggregatorSpec, m: Multiset) -> float:
    """alpha_cc: total attention on the copies of the center element."""
    k = m.index_of_center()
    if k is None:
        return 0.0
    return float(m.multiplicity[k] * attention_weights(spec, m)[k])


def build_collision_pair(strategy: str, seed: int, dim: int = 3, max_elements: int = 4) -> tuple:
    """Two multisets with the same center and support, mu_2 = t * mu_1 (t >= 2), equal S.

    The center is one of the elements so the eps term is active.
    """
    if strategy not in (CONTRACTIVE, SUBTRACTIVE):
        raise ValueError(f"unknown strategy {strategy!r}")
    rng = np.random.default_rng(seed)
    k = int(rng.integers(1, max_elements + 1))
    elements = [rng.normal(size=dim) for _ in range(k)]
    mu1 = rng.integers(1, 4, size=k)
    t = int(rng.integers(2, 4))
    s = float(rng.uniform(0.0, 2.0))
    center = elements[0]
    first = Multiset(center, elements, mu1.tolist(), [s] * k)
    second = Multiset(center, elements, (t * mu1).tolist(), [s] * k)
    return first, second


@dataclass
class CorollaryReport:
    strategy: str
    epsilon: float
    plain_difference: float
    augmented_difference: float
    expected_separation: float
    alpha_cc: float
    degenerate: bool = False

    @property
    def separated(self) -> bool:
        return not self.degenerate and self.augmented_difference > 1e-6

    @property
    def matches_expression(self) -> bool:
        return abs(self.augmented_difference - self.expected_separation) <= 1e-10


def verify_corollary(
    pair: tuple,
    strategy: str,
    epsilon: float,
    beta: float = 1.0,
    g: Optional[np.ndarray] = None,
    correlations=None,
) -> CorollaryReport:
    """Confirm the plain aggregator collides on ``pair`` and measure the eps separation.

    Raises `HarnessError` if the pair does not collide, or if the separation
    falls short of eps * |1/|X1| - 1/|X2|| * alpha_cc * ||g(c)||.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    first, second = pair
    plain = AggregatorSpec(strategy, beta, 0.0, g, correlations)
    aug = AggregatorSpec(strategy, beta, epsilon, g, correlations)
    plain_diff = float(np.linalg.norm(aggregate_multiset(plain, first) - aggregate_multiset(plain, second)))
    if plain_diff >= PLAIN_TOL:
        raise HarnessError(f"pair is not a collision: plain difference {plain_diff:.3e}")
    aug_diff = float(np.linalg.norm(aggregate_multiset(aug, first) - aggregate_multiset(aug, second)))
    alpha_cc = center_mass(plain, first)
    g_c = float(np.linalg.norm(plain.apply_g(first.center)))
    expected = epsilon * abs(1.0 / first.size - 1.0 / second.size) * alpha_cc * g_c
    report = CorollaryReport(strategy, epsilon, plain_diff, aug_diff, expected, alpha_cc, degenerate=g_c == 0.0)
    if aug_diff < expected - 1e-12:
        raise HarnessError(f"separation {aug_diff:.3e} below the expected {expected:.3e}")
    return report


def collision_sweep(
    strategy: str,
    seeds: Sequence[int] = range(100),
    epsilon: float = 0.5,
    beta: Optional[float] = None,
    random_g: bool = False,
) -> dict:
    """Summary over many constructed pairs, as emitted by the CLI report."""
    beta = beta if beta is not None else (1.0 if strategy == CONTRACTIVE else 0.5)
    reports = []
    for seed in seeds:
        pair = build_collision_pair(strategy, seed)
        rng = np.random.default_rng(10_000 + seed)
        dim = pair[0].center.shape[0]
        g = rng.normal(size=(dim, dim)) if random_g else None
        corr = rng.normal(size=len(pair[0].elements))
        reports.append(verify_corollary(pair, strategy, epsilon, beta, g, corr))
    return {
        "strategy": strategy,
        "pairs_tested": len(reports),
        "collisions_confirmed": sum(r.plain_difference < PLAIN_TOL for r in reports),
        "separations_confirmed": sum(r.separated for r in reports),
        "expression_matches": sum(r.matches_expression for r in reports),
        "min_separation": min((r.augmented_difference for r in reports), default=0.0),
        "max_plain_difference": max((r.plain_difference for r in reports), default=0.0),
    }


def converse_probe(strategy: str, trials: int = 1000, seed: int = 0, dim: int = 3) -> float:
    """Fraction of random pairs outside the collision family that aggregate differently.

    Each trial either changes the support M or draws multiplicities and
    dissimilarities that are not proportional.
    """
    rng = np.random.default_rng(seed)
    beta = 1.0 if strategy == CONTRACTIVE else 0.5
    spec = AggregatorSpec(strategy, beta)
    distinct = 0
    for trial in range(trials):
        k = int(rng.integers(1, 5))
        elements = [rng.normal(size=dim) for _ in range(k)]
        mu = rng.integers(1, 4, size=k).tolist()
        first = Multiset(elements[0], elements, mu, rng.uniform(0, 2, k).tolist())
        if trial % 2 == 0:
            other = [rng.normal(size=dim) for _ in range(k)]
            support = [elements[0]] + other[1:] if k > 1 else other
            second = Multiset(elements[0], support, mu, first.dissim)
        else:
            mu2 = rng.integers(1, 4, size=k).tolist()
            second = Multiset(elements[0], elements, mu2, rng.uniform(0, 2, k).tolist())
            if k == 1:
                second.elements = [rng.normal(size=dim)]
        diff = np.linalg.norm(aggregate_multiset(spec, first) - aggregate_multiset(spec, second))
        distinct += diff > DISTINCT_TOL
    return distinct / trials


# -------------------------------------------------------------------- 1-WL


def _feature_colors(features: np.ndarray, palette: dict) -> list:
    return [palette.setdefault(("init", row.tobytes()), len(palette)) for row in features]


def wl_colors(graphs: Sequence[Graph], rounds: int, features: Optional[Sequence[np.ndarray]] = None) -> list:
    """1-WL refinement run jointly so colors are comparable across ``graphs``.

    A node's new color is a function of its color and the multiset of its
    neighbors' colors (self-loops excluded).
    """
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    palette: dict = {}
    feats = features if features is not None else [g.features for g in graphs]
    colors = [np.array(_feature_colors(np.ascontiguousarray(f, dtype=np.float64), palette)) for f in feats]
    for _ in range(rounds):
        refined = []
        for g, col in zip(graphs, colors):
            new = np.empty(g.num_nodes, dtype=np.int64)
            for i in range(g.num_nodes):
                nbrs = g.indices[g.indptr[i]:g.indptr[i + 1]]
                nbrs = nbrs[nbrs != i]
                key = (int(col[i]), tuple(sorted(col[nbrs].tolist())))
                new[i] = palette.setdefault(key, len(palette))
            refined.append(new)
        colors = refined
    return colors


def wl_refinement(graph: Graph, rounds: int) -> np.ndarray:
    """Node color classes of ``graph`` after ``rounds`` of 1-WL refinement."""
    return wl_colors([graph], rounds)[0]


def color_histogram(colors: np.ndarray) -> dict:
    vals, counts = np.unique(colors, return_counts=True)
    return dict(zip(vals.tolist(), counts.tolist()))


@dataclass
class WLProbeResult:
    trials: int
    consistent: int
    layer_distinct_pairs: int = 0
    violations: list = field(default_factory=list)


def disjoint_union(first: Graph, second: Graph) -> Graph:
    n1 = first.num_nodes
    e1 = np.stack([first.row, first.indices], axis=1)
    e2 = np.stack([second.row, second.indices], axis=1) + n1
    edges = np.concatenate([e1, e2])
    edges = edges[edges[:, 0] != edges[:, 1]]
    feats = np.concatenate([first.features, second.features])
    return Graph.from_edges(n1 + second.num_nodes, edges, feats)


def layer_vs_wl_probe(trials: int = 500, num_nodes: int = 8, seed: int = 0, epsilon: float = 0.5) -> WLProbeResult:
    """Random graph pairs: nodes the eps-augmented layer separates must differ after one 1-WL round.

    The layer runs with feature-only dissimilarity so its output depends
    only on a node's feature and its neighbors' features, the information
    1-WL sees in one round.
    """
    rng = np.random.default_rng(seed)
    palette = np.eye(2)
    result = WLProbeResult(trials=trials, consistent=0)
    for trial in range(trials):
        graphs = []
        for _ in range(2):
            p = rng.uniform(0.2, 0.5)
            iu = np.triu_indices(num_nodes, 1)
            keep = rng.random(len(iu[0])) < p
            edges = np.stack([iu[0][keep], iu[1][keep]], axis=1)
            feats = palette[rng.integers(0, 2, num_nodes)]
            graphs.append(Graph.from_edges(num_nodes, edges, feats))
        union = disjoint_union(*graphs)
        strategy = CONTRACTIVE if trial % 2 == 0 else SUBTRACTIVE
        layer = SALayer(2, 4, 1, strategy=strategy, beta=1.0 if trial % 2 == 0 else 0.5,
                        dissim="feature", rng=np.random.default_rng(trial))
        layer.eps_raw.data[:] = np.log(epsilon / (1 - epsilon))
        out = layer(union.features, union).data
        colors = wl_refinement(union, 1)
        diff = np.linalg.norm(out[:, None, :] - out[None, :, :], axis=-1)
        layer_distinct = diff > DISTINCT_TOL
        bad = np.argwhere(layer_distinct & (colors[:, None] == colors[None, :]))
        result.layer_distinct_pairs += int(layer_distinct.sum()) // 2
        if len(bad):
            result.violations.append((trial, bad[0].tolist()))
        else:
            result.consistent += 1
    return result
