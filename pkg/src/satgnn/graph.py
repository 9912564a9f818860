"""Immutable CSR graphs, the text bundle format, and irrelevance statistics."""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .autodiff import Tensor, linear

log = logging.getLogger(__name__)

EDGES_FILE = "edges.tsv"
FEATURES_FILE = "features.csv"
LABELS_FILE = "labels.txt"
SPLITS_FILE = "splits.json"


class BundleFormatError(ValueError):
    """A bundle file could not be parsed; the message names file and line."""


class GraphValidationError(ValueError):
    pass


def _frozen(a, dtype) -> np.ndarray:
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Graph:
    """Undirected graph stored as CSR over directed edges, self-loops included.

    Row ``i`` of the CSR lists the neighborhood N_i of node ``i`` (``i``
    itself included); edge ``e`` points from ``indices[e]`` into ``row[e]``.
    """

    indptr: np.ndarray
    indices: np.ndarray
    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    splits: dict = field(default_factory=dict)
    extra_splits: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "indptr", _frozen(self.indptr, np.int64))
        object.__setattr__(self, "indices", _frozen(self.indices, np.int64))
        object.__setattr__(self, "features", _frozen(self.features, np.float64))
        object.__setattr__(self, "labels", _frozen(self.labels, np.int64))
        object.__setattr__(
            self, "splits", {k: _frozen(v, np.int64) for k, v in self.splits.items()}
        )
        object.__setattr__(
            self,
            "extra_splits",
            tuple({k: _frozen(v, np.int64) for k, v in s.items()} for s in self.extra_splits),
        )
        self.validate()

    # ------------------------------------------------------------ building

    @classmethod
    def from_edges(
        cls,
        num_nodes: int,
        edges,
        features=None,
        labels=None,
        num_classes: Optional[int] = None,
        splits: Optional[dict] = None,
        extra_splits=(),
    ) -> "Graph":
        """Symmetrize, deduplicate and add exactly one self-loop per node."""
        edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        if edges.size and (edges.min() < 0 or edges.max() >= num_nodes):
            raise GraphValidationError("edge endpoint out of range")
        src = np.concatenate([edges[:, 0], edges[:, 1], np.arange(num_nodes)])
        dst = np.concatenate([edges[:, 1], edges[:, 0], np.arange(num_nodes)])
        adj = sp.coo_matrix((np.ones(len(src)), (dst, src)), shape=(num_nodes, num_nodes)).tocsr()
        adj.sum_duplicates()
        adj.sort_indices()
        if features is None:
            features = np.ones((num_nodes, 1))
        if labels is None:
            labels = np.zeros(num_nodes, dtype=np.int64)
        labels = np.asarray(labels, dtype=np.int64)
        if num_classes is None:
            num_classes = int(labels.max()) + 1 if labels.size else 1
        return cls(
            indptr=adj.indptr,
            indices=adj.indices,
            features=np.asarray(features, dtype=np.float64),
            labels=labels,
            num_classes=int(num_classes),
            splits=dict(splits or {}),
            extra_splits=tuple(extra_splits),
        )

    def validate(self) -> None:
        n = self.num_nodes
        if self.indptr[0] != 0 or self.indptr[-1] != len(self.indices):
            raise GraphValidationError("row offsets do not cover the index array")
        if np.any(np.diff(self.indptr) < 0):
            raise GraphValidationError("row offsets must be non-decreasing")
        if len(self.indices) and (self.indices.min() < 0 or self.indices.max() >= n):
            raise GraphValidationError("column index out of range")
        if np.any(np.diff(self.row * n + self.indices) <= 0):
            raise GraphValidationError("neighbor lists must be sorted and free of duplicates")
        if self.features.ndim != 2 or self.features.shape[0] != n:
            raise GraphValidationError(f"features must be {n} x D, got {self.features.shape}")
        if self.labels.shape != (n,):
            raise GraphValidationError(f"expected {n} labels, got {self.labels.shape}")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise GraphValidationError("label outside [0, num_classes)")
        if np.count_nonzero(self.indices == self.row) != n or np.any(
            self.indices[self.self_loop_index] != np.arange(n)
        ):
            raise GraphValidationError("every node needs exactly one self-loop")
        if np.any(self.reverse < 0):
            raise GraphValidationError("adjacency is not symmetric")
        for splits in (self.splits, *self.extra_splits):
            seen: set[int] = set()
            for name, idx in splits.items():
                if len(idx) and (idx.min() < 0 or idx.max() >= n):
                    raise GraphValidationError(f"split {name!r} has an index out of range")
                s = set(idx.tolist())
                if len(s) != len(idx) or seen & s:
                    raise GraphValidationError(f"split {name!r} overlaps or repeats indices")
                seen |= s

    # ------------------------------------------------------------- derived

    @property
    def num_nodes(self) -> int:
        return len(self.indptr) - 1

    @property
    def num_edges(self) -> int:
        """Directed edges, self-loops included."""
        return len(self.indices)

    @property
    def num_features(self) -> int:
        return self.features.shape[1]

    @cached_property
    def row(self) -> np.ndarray:
        return _frozen(np.repeat(np.arange(self.num_nodes), np.diff(self.indptr)), np.int64)

    @cached_property
    def degree(self) -> np.ndarray:
        """|N_i|, counting the node itself."""
        return _frozen(np.diff(self.indptr), np.int64)

    @cached_property
    def self_loop_index(self) -> np.ndarray:
        loops = np.flatnonzero(self.indices == self.row)
        return _frozen(loops[np.argsort(self.row[loops], kind="stable")], np.int64)

    @cached_property
    def is_self_loop(self) -> np.ndarray:
        return _frozen(self.indices == self.row, bool)

    @cached_property
    def reverse(self) -> np.ndarray:
        """Edge id of (j, i) for each edge (i, j); -1 where it is missing."""
        key = self.row * self.num_nodes + self.indices
        rkey = self.indices * self.num_nodes + self.row
        # key is sorted because rows are sorted and columns sorted within rows
        pos = np.searchsorted(key, rkey)
        pos = np.minimum(pos, len(key) - 1)
        out = np.where(key[pos] == rkey, pos, -1) if len(key) else pos
        return _frozen(out, np.int64)

    @cached_property
    def dst_incidence(self) -> sp.csr_matrix:
        """N x E matrix with a one at (row[e], e); left-multiplying sums edges into destinations."""
        e = self.num_edges
        return sp.csr_matrix((np.ones(e), (self.row, np.arange(e))), shape=(self.num_nodes, e))

    @cached_property
    def src_incidence(self) -> sp.csr_matrix:
        """N x E matrix with a one at (indices[e], e)."""
        e = self.num_edges
        return sp.csr_matrix((np.ones(e), (self.indices, np.arange(e))), shape=(self.num_nodes, e))

    @cached_property
    def adjacency(self) -> sp.csr_matrix:
        """0/1 adjacency without self-loops (the matrix A)."""
        keep = ~self.is_self_loop
        return sp.csr_matrix(
            (np.ones(int(keep.sum())), (self.row[keep], self.indices[keep])),
            shape=(self.num_nodes, self.num_nodes),
        )

    def undirected_edges(self) -> np.ndarray:
        """(i, j) pairs with i < j, each undirected edge once."""
        mask = self.row < self.indices
        return np.stack([self.row[mask], self.indices[mask]], axis=1)

    def split(self, name: str) -> np.ndarray:
        if name not in self.splits:
            raise KeyError(f"graph has no {name!r} split")
        return self.splits[name]

    def with_splits(self, splits: dict) -> "Graph":
        return Graph(
            self.indptr, self.indices, self.features, self.labels, self.num_classes,
            splits=splits, extra_splits=self.extra_splits,
        )

    def same_as(self, other: "Graph") -> bool:
        if self.num_classes != other.num_classes or self.splits.keys() != other.splits.keys():
            return False
        arrays = ("indptr", "indices", "features", "labels")
        if not all(np.array_equal(getattr(self, a), getattr(other, a)) for a in arrays):
            return False
        if not all(np.array_equal(self.splits[k], other.splits[k]) for k in self.splits):
            return False
        if len(self.extra_splits) != len(other.extra_splits):
            return False
        return all(
            a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)
            for a, b in zip(self.extra_splits, other.extra_splits)
        )


# ------------------------------------------------------------------ bundles


def _parse_features(path: Path):
    lines = path.read_text(encoding="utf-8").splitlines()
    dim = None
    body = []
    for lineno, line in enumerate(lines, 1):
        s = line.strip()
        if s.startswith("#"):
            if s.replace(" ", "").startswith("#dim="):
                dim = int(s.split("=", 1)[1])
            continue
        body.append((lineno, s))
    sparse_fmt = dim is not None or any(":" in s for _, s in body)
    if not sparse_fmt:
        rows = []
        for lineno, s in body:
            try:
                rows.append([float(v) for v in s.split(",")])
            except ValueError as exc:
                raise BundleFormatError(f"{path.name}:{lineno}: {exc}") from None
        widths = {len(r) for r in rows}
        if len(widths) > 1:
            raise BundleFormatError(f"{path.name}: rows have differing widths {sorted(widths)}")
        return np.array(rows, dtype=np.float64).reshape(len(rows), -1)

    entries = []
    for r, (lineno, s) in enumerate(body):
        for tok in s.split():
            try:
                k, v = tok.split(":")
                entries.append((r, int(k), float(v)))
            except ValueError:
                raise BundleFormatError(f"{path.name}:{lineno}: bad token {tok!r}") from None
    max_idx = max((e[1] for e in entries), default=-1)
    if dim is None:
        dim = max_idx + 1
    if max_idx >= dim or any(e[1] < 0 for e in entries):
        raise GraphValidationError(f"{path.name}: feature index outside [0, {dim})")
    x = np.zeros((len(body), dim))
    for r, k, v in entries:
        x[r, k] = v
    return x


def load_bundle(path) -> Graph:
    """Read a dataset directory (edges.tsv, features.csv, labels.txt, splits.json)."""
    path = Path(path)
    if not path.is_dir():
        raise FileNotFoundError(f"dataset bundle {path} does not exist")
    for fname in (EDGES_FILE, FEATURES_FILE, LABELS_FILE, SPLITS_FILE):
        if not (path / fname).is_file():
            raise FileNotFoundError(f"bundle {path} is missing {fname}")

    labels = []
    for lineno, line in enumerate((path / LABELS_FILE).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            labels.append(int(line.strip()))
        except ValueError:
            raise BundleFormatError(f"{LABELS_FILE}:{lineno}: not an integer: {line!r}") from None
    n = len(labels)

    features = _parse_features(path / FEATURES_FILE)
    if features.shape[0] != n:
        raise GraphValidationError(f"{n} labels but {features.shape[0]} feature rows")

    edges = []
    for lineno, line in enumerate((path / EDGES_FILE).read_text(encoding="utf-8").splitlines(), 1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        parts = s.split("\t") if "\t" in s else s.split()
        if len(parts) != 2:
            raise BundleFormatError(f"{EDGES_FILE}:{lineno}: expected 'src<TAB>dst', got {line!r}")
        try:
            a, b = int(parts[0]), int(parts[1])
        except ValueError:
            raise BundleFormatError(f"{EDGES_FILE}:{lineno}: non-integer node id") from None
        if not (0 <= a < n and 0 <= b < n):
            raise GraphValidationError(f"{EDGES_FILE}:{lineno}: node id out of range [0, {n})")
        edges.append((a, b))

    try:
        raw = json.loads((path / SPLITS_FILE).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise BundleFormatError(f"{SPLITS_FILE}:{exc.lineno}: {exc.msg}") from None
    splits = {k: raw[k] for k in ("train", "val", "test") if k in raw}
    extra = tuple({k: s[k] for k in ("train", "val", "test") if k in s} for s in raw.get("splits", []))
    if not splits and extra:
        splits = extra[0]

    return Graph.from_edges(
        n, np.array(edges, dtype=np.int64).reshape(-1, 2), features, labels,
        splits=splits, extra_splits=extra,
    )


def save_bundle(graph: Graph, path, sparse: bool = False) -> None:
    """Write ``graph`` in the bundle format; `load_bundle` reads it back unchanged."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    with open(path / EDGES_FILE, "w", encoding="utf-8") as fh:
        for i, j in graph.undirected_edges():
            fh.write(f"{i}\t{j}\n")
    with open(path / FEATURES_FILE, "w", encoding="utf-8") as fh:
        if sparse:
            fh.write(f"# dim={graph.num_features}\n")
            for row in graph.features:
                nz = np.flatnonzero(row)
                fh.write(" ".join(f"{k}:{float(row[k])!r}" for k in nz) + "\n")
        else:
            for row in graph.features:
                fh.write(",".join(repr(float(v)) for v in row) + "\n")
    (path / LABELS_FILE).write_text("".join(f"{int(y)}\n" for y in graph.labels), encoding="utf-8")
    payload = {k: v.tolist() for k, v in graph.splits.items()}
    if graph.extra_splits:
        payload["splits"] = [{k: v.tolist() for k, v in s.items()} for s in graph.extra_splits]
    (path / SPLITS_FILE).write_text(json.dumps(payload), encoding="utf-8")


# -------------------------------------------------------- feature reduction


class FeatureReducer:
    """Trainable linear map D -> target_dim, no bias, no nonlinearity."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator):
        bound = np.sqrt(6.0 / (in_dim + out_dim))
        self.weight = Tensor(rng.uniform(-bound, bound, (in_dim, out_dim)), True, name="reduce.weight")
        self.in_dim, self.out_dim = in_dim, out_dim

    def __call__(self, x) -> Tensor:
        return linear(x, self.weight)

    def parameters(self) -> dict:
        return {"reduce.weight": self.weight}


def reduce_features(
    graph: Graph, target_dim: int, rng: np.random.Generator, threshold: int = 0
) -> Optional[FeatureReducer]:
    """Build the dimension-reduction pre-layer, or return None when it does not apply.

    The layer is created only when ``D > max(target_dim, threshold)``.
    """
    if target_dim <= 0:
        raise ValueError("target_dim must be positive")
    d = graph.num_features
    if target_dim >= d:
        warnings.warn(f"feature dim {d} <= target {target_dim}; reduction skipped", stacklevel=2)
        return None
    if d <= threshold:
        return None
    return FeatureReducer(d, target_dim, rng)


# ------------------------------------------------------- irrelevance stats


def common_neighbor_counts(graph: Graph) -> np.ndarray:
    """|N_i ∩ N_j| for each undirected edge of `Graph.undirected_edges`, excluding i and j."""
    a = graph.adjacency
    pairs = graph.undirected_edges()
    if not len(pairs):
        return np.zeros(0, dtype=np.int64)
    a2 = (a @ a).tocsr()
    return np.asarray(a2[pairs[:, 0], pairs[:, 1]]).ravel().astype(np.int64)


def feature_distance_stats(graph: Graph) -> np.ndarray:
    """Euclidean distance of raw feature rows per undirected edge, divided by the max."""
    pairs = graph.undirected_edges()
    x = graph.features
    d = np.linalg.norm(x[pairs[:, 0]] - x[pairs[:, 1]], axis=1)
    top = d.max() if len(d) else 0.0
    if top == 0.0:
        warnings.warn("all connected feature rows are identical; distances are 0", stacklevel=2)
        return np.zeros_like(d)
    return d / top
