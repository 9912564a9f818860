"""Two-layer SAT network, its training loop and evaluation.

The network is an optional linear dimension-reduction layer, a hidden
multi-head SA layer (heads concatenated, ELU), and an output SA layer
whose head outputs are averaged into class logits. Training minimizes
cross-entropy on the train split plus the matrix-factorization loss of
the structural embedding P, with Adam and L2 weight decay.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .autodiff import Tensor
from .dissimilarity import (
    DISSIM_MODES,
    FEATURE_AND_STRUCTURE,
    FEATURE_ONLY,
    STRUCTURE_ONLY,
    StructuralEmbedding,
    mf_loss,
)
from .graph import FeatureReducer, Graph
from .layer import CONTRACTIVE, NO_SELECTION, STRATEGIES, SUBTRACTIVE, SALayer

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
DEFAULT_BETA = {CONTRACTIVE: 1.0, SUBTRACTIVE: 0.5, NO_SELECTION: 1.0}


class ConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    """Raised when the loss becomes non-finite; ``diagnostics`` describes the epoch."""

    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass
class TrainConfig:
    strategy: str = CONTRACTIVE
    beta: Optional[float] = None  # None picks 1.0 for contractive, 0.5 for subtractive
    dissim: str = FEATURE_AND_STRUCTURE
    hidden_heads: int = 8
    output_heads: int = 1
    hidden_dim: int = 8
    lr: float = 0.005
    weight_decay: float = 5e-4
    dropout: float = 0.6
    epochs: int = 1000
    seed: int = 0
    mf_weight: float = 1.0
    mf_exact_threshold: int = 5000
    mf_negative_ratio: int = 5
    reduce_dim: int = 512
    reduce_threshold: int = 2048  # the pre-layer is used only when D exceeds this
    normalize_features: bool = True
    use_epsilon: Optional[bool] = None  # None: on for SA strategies, off for "none"
    checkpoint: str = "best_val"  # or "last"

    def __post_init__(self):
        if self.beta is None:
            self.beta = DEFAULT_BETA.get(self.strategy, 1.0)
        if self.use_epsilon is None:
            self.use_epsilon = self.strategy != NO_SELECTION
        self.validate()

    def validate(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.dissim not in DISSIM_MODES:
            raise ConfigError(f"dissim must be one of {DISSIM_MODES}, got {self.dissim!r}")
        if not 0.0 < self.beta <= 1.0:
            raise ConfigError(f"beta must lie in (0, 1], got {self.beta}")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.weight_decay < 0 or self.mf_weight < 0:
            raise ConfigError("weight_decay and mf_weight must be >= 0")
        if min(self.hidden_heads, self.output_heads, self.hidden_dim) < 1:
            raise ConfigError("head counts and hidden_dim must be >= 1")
        if self.mf_negative_ratio < 1:
            raise ConfigError("mf_negative_ratio must be >= 1")
        if self.reduce_dim < 1 or self.reduce_threshold < 0:
            raise ConfigError("reduce_dim must be positive and reduce_threshold >= 0")
        if self.checkpoint not in ("best_val", "last"):
            raise ConfigError("checkpoint must be 'best_val' or 'last'")

    def replace(self, **changes) -> "TrainConfig":
        if "strategy" in changes and "beta" not in changes:
            changes["beta"] = None
        if "strategy" in changes and "use_epsilon" not in changes:
            changes["use_epsilon"] = None
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class Metrics:
    per_epoch: list = field(default_factory=list)
    best_epoch: int = -1
    train_acc: float = 0.0
    val_acc: float = 0.0
    test_acc: float = 0.0
    cluster_acc: float = 0.0
    seconds: float = 0.0
    seed: int = 0
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# ------------------------------------------------------------------ model


SPARSE_DENSITY = 0.1


def prepare_features(graph: Graph, normalize: bool = True):
    """Row-normalize features to unit L1 norm (all-zero rows stay zero).

    Mostly-zero feature matrices come back as scipy CSR so the first
    projection and input dropout touch only the stored entries.
    """
    x = np.asarray(graph.features, dtype=np.float64)
    if normalize:
        s = np.abs(x).sum(axis=1, keepdims=True)
        s[s == 0] = 1.0
        x = x / s
    if x.size and np.count_nonzero(x) < SPARSE_DENSITY * x.size:
        return sp.csr_matrix(x)
    return x


class SATModel:
    def __init__(self, config: TrainConfig, num_nodes: int, in_dim: int, num_classes: int):
        config.validate()
        if num_nodes < 1 or in_dim < 1 or num_classes < 1:
            raise ConfigError("graph must have nodes, features and classes")
        self.config = config
        self.num_nodes, self.in_dim, self.num_classes = num_nodes, in_dim, num_classes
        rng = np.random.default_rng(np.random.SeedSequence(config.seed).spawn(2)[0])

        self.reducer: Optional[FeatureReducer] = None
        width = in_dim
        if in_dim > config.reduce_threshold and config.reduce_dim < in_dim:
            self.reducer = FeatureReducer(in_dim, config.reduce_dim, rng)
            width = config.reduce_dim

        common = dict(
            strategy=config.strategy,
            beta=config.beta,
            dissim=config.dissim,
            use_epsilon=config.use_epsilon,
            dropout=config.dropout,
            rng=rng,
        )
        self.hidden = SALayer(width, config.hidden_dim, config.hidden_heads, concat=True, name="hidden", **common)
        self.output = SALayer(
            self.hidden.out_width, num_classes, config.output_heads, concat=False, name="output", **common
        )
        self.embedding: Optional[StructuralEmbedding] = None
        if config.strategy != NO_SELECTION and config.dissim != FEATURE_ONLY:
            self.embedding = StructuralEmbedding(num_nodes, num_classes, rng)

    @property
    def layers(self) -> tuple:
        return (self.hidden, self.output)

    def parameters(self) -> dict:
        params = {}
        if self.reducer is not None:
            params.update(self.reducer.parameters())
        for layer in self.layers:
            params.update(layer.parameters())
        if self.embedding is not None:
            params["embedding"] = self.embedding.weight
        return params

    def decayed_parameters(self) -> set:
        names = {"embedding", "reduce.weight"}
        for layer in self.layers:
            names |= layer.decayed_parameters()
        return names & set(self.parameters())

    def parameter_count(self) -> int:
        return int(sum(p.data.size for p in self.parameters().values()))

    def forward(self, x, graph: Graph, *, training: bool = False, rng=None, record: bool = False) -> Tensor:
        h = x if sp.issparse(x) else ad.as_tensor(x)
        if self.reducer is not None:
            h = self.reducer(h)
        emb = self.embedding
        h = ad.elu(self.hidden(h, graph, emb, training=training, rng=rng, record=record))
        return self.output(h, graph, emb, training=training, rng=rng, record=record)

    def logits(self, graph: Graph, record: bool = False) -> np.ndarray:
        """Evaluation-mode class logits for every node."""
        x = prepare_features(graph, self.config.normalize_features)
        with ad.no_grad():
            return self.forward(x, graph, record=record).data

    def state(self) -> dict:
        return {name: p.data.copy() for name, p in self.parameters().items()}

    def load_state(self, state: dict) -> None:
        params = self.parameters()
        if set(state) != set(params):
            raise CheckpointError(f"parameter names differ: {sorted(set(state) ^ set(params))}")
        for name, p in params.items():
            if state[name].shape != p.shape:
                raise CheckpointError(f"{name}: shape {state[name].shape} != {p.shape}")
            p.data = np.array(state[name], dtype=np.float64)


def build_model(config: TrainConfig, graph: Graph) -> SATModel:
    return SATModel(config, graph.num_nodes, graph.num_features, graph.num_classes)


# ---------------------------------------------------------------- optimizer


class Adam:
    """Adam with L2 weight decay added to the gradient of selected parameters."""

    def __init__(
        self,
        params: dict,
        lr: float = 0.005,
        betas: tuple = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
        decay: Optional[set] = None,
    ):
        self.params = params
        self.lr, self.eps, self.weight_decay = lr, eps, weight_decay
        self.b1, self.b2 = betas
        self.decay = set(params) if decay is None else set(decay)
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def zero_grad(self) -> None:
        ad.zero_grad(self.params.values())

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if self.weight_decay and name in self.decay:
                g = g + self.weight_decay * p.data
            m = self.m[name] = self.b1 * self.m[name] + (1.0 - self.b1) * g
            v = self.v[name] = self.b2 * self.v[name] + (1.0 - self.b2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ----------------------------------------------------------------- training


def accuracy(logits: np.ndarray, labels: np.ndarray, index=None) -> float:
    """Fraction of argmax hits; ties go to the lowest class index."""
    if index is not None:
        logits, labels = logits[index], labels[index]
    if len(labels) == 0:
        return 0.0
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def _mf_term(model: SATModel, graph: Graph, rng) -> Optional[Tensor]:
    cfg = model.config
    if model.embedding is None or cfg.mf_weight == 0:
        return None
    return mf_loss(model.embedding, graph, cfg.mf_negative_ratio, cfg.mf_exact_threshold, rng)


def _required_splits(graph: Graph) -> tuple:
    try:
        return graph.split("train"), graph.split("val"), graph.split("test")
    except KeyError as exc:
        raise ConfigError(f"graph is missing a split: {exc}") from None


def train(model: SATModel, graph: Graph, config: Optional[TrainConfig] = None) -> Metrics:
    cfg = config or model.config
    if cfg is not model.config:
        model.config = cfg
    train_idx, val_idx, _ = _required_splits(graph)
    if len(train_idx) == 0:
        raise ConfigError("train split is empty")
    start = time.perf_counter()
    x = prepare_features(graph, cfg.normalize_features)
    labels = graph.labels
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(2)[1])
    params = model.parameters()
    opt = Adam(params, cfg.lr, weight_decay=cfg.weight_decay, decay=model.decayed_parameters())

    metrics = Metrics(seed=cfg.seed, config=cfg.to_dict())
    best_state, best_key = model.state(), None
    if cfg.epochs == 0:
        best_key = (0.0, 0.0)

    for epoch in range(cfg.epochs):
        opt.zero_grad()
        logits = model.forward(x, graph, training=True, rng=rng)
        task = ad.cross_entropy(logits, labels, train_idx)
        mf = _mf_term(model, graph, rng)
        loss = task if mf is None else task + mf * cfg.mf_weight
        loss_task = task.item()
        loss_mf = 0.0 if mf is None else mf.item()
        if not np.isfinite(loss.item()):
            diag = {
                "epoch": epoch,
                "loss_task": loss_task,
                "loss_mf": loss_mf,
                "param_norms": {k: float(np.linalg.norm(p.data)) for k, p in params.items()},
                "nonfinite_params": [k for k, p in params.items() if not np.all(np.isfinite(p.data))],
                "nonfinite_logits": int((~np.isfinite(logits.data)).sum()),
            }
            log.error("training diverged: %s", json.dumps(diag))
            raise TrainingDivergedError(f"non-finite loss at epoch {epoch}", diag)
        loss.backward()
        opt.step()

        with ad.no_grad():
            eval_logits = model.forward(x, graph).data
            val_loss = ad.cross_entropy(eval_logits, labels, val_idx).item() if len(val_idx) else 0.0
        val_acc = accuracy(eval_logits, labels, val_idx)
        metrics.per_epoch.append(
            {
                "loss_task": loss_task,
                "loss_mf": loss_mf,
                "loss_total": loss.item(),
                "val_acc": val_acc,
                "val_loss": val_loss,
            }
        )
        key = (val_acc, -val_loss)
        if cfg.checkpoint == "last" or best_key is None or key > best_key:
            best_key, best_state, metrics.best_epoch = key, model.state(), epoch

    model.load_state(best_state)
    final = model.logits(graph)
    metrics.train_acc = accuracy(final, labels, train_idx)
    metrics.val_acc = accuracy(final, labels, val_idx)
    metrics.test_acc = evaluate_classification(model, graph, logits=final)
    metrics.cluster_acc = evaluate_clustering(model, graph, logits=final)
    metrics.seconds = time.perf_counter() - start
    return metrics


def evaluate_classification(model: SATModel, graph: Graph, split: str = "test", logits=None) -> float:
    logits = model.logits(graph) if logits is None else logits
    return accuracy(logits, graph.labels, graph.split(split))


def evaluate_clustering(model: SATModel, graph: Graph, logits=None) -> float:
    """Accuracy of argmax assignments against labels over all N nodes."""
    logits = model.logits(graph) if logits is None else logits
    return accuracy(logits, graph.labels)


def fit(config: TrainConfig, graph: Graph) -> tuple:
    model = build_model(config, graph)
    return model, train(model, graph)


def _fit_metrics(args) -> Metrics:
    config, graph = args
    return fit(config, graph)[1]


def run_seeds(config: TrainConfig, graph: Graph, seeds: Sequence[int], workers: int = 1) -> list:
    """Train once per seed, in worker processes when ``workers > 1``."""
    jobs = [(config.replace(seed=int(s)), graph) for s in seeds]
    if workers <= 1 or len(jobs) == 1:
        return [_fit_metrics(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_fit_metrics, jobs))


# ----------------------------------------------------------------- ablation

ABLATION_VARIANTS = {
    "GAT": (NO_SELECTION, FEATURE_AND_STRUCTURE),
    "C-F": (CONTRACTIVE, FEATURE_ONLY),
    "C-P": (CONTRACTIVE, STRUCTURE_ONLY),
    "SAT-C": (CONTRACTIVE, FEATURE_AND_STRUCTURE),
    "S-F": (SUBTRACTIVE, FEATURE_ONLY),
    "S-P": (SUBTRACTIVE, STRUCTURE_ONLY),
    "SAT-S": (SUBTRACTIVE, FEATURE_AND_STRUCTURE),
}


@dataclass
class AblationRow:
    name: str
    strategy: str
    dissim: str
    test_acc: list
    cluster_acc: list

    @property
    def mean(self) -> float:
        return float(np.mean(self.test_acc))

    @property
    def std(self) -> float:
        return float(np.std(self.test_acc))


def run_ablation(
    config: TrainConfig,
    graph: Graph,
    seeds: Sequence[int] = (0,),
    variants: Optional[Sequence[str]] = None,
    workers: int = 1,
) -> list:
    """Train each ablation variant over ``seeds``; each uses its strategy's default beta."""
    rows = []
    for name in variants or ABLATION_VARIANTS:
        strategy, dissim = ABLATION_VARIANTS[name]
        runs = run_seeds(config.replace(strategy=strategy, dissim=dissim), graph, seeds, workers)
        rows.append(
            AblationRow(name, strategy, dissim, [m.test_acc for m in runs], [m.cluster_acc for m in runs])
        )
    return rows


def format_ablation(rows: list) -> str:
    lines = ["variant,strategy,dissim,mean_acc,std_acc,runs"]
    for r in rows:
        dissim = "-" if r.strategy == NO_SELECTION else r.dissim
        lines.append(f"{r.name},{r.strategy},{dissim},{r.mean:.4f},{r.std:.4f},{len(r.test_acc)}")
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------- checkpoints


def save_checkpoint(model: SATModel, path, graph: Optional[Graph] = None) -> None:
    meta = {
        "version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "num_nodes": model.num_nodes,
        "in_dim": model.in_dim,
        "num_classes": model.num_classes,
        "num_edges": None if graph is None else graph.num_edges,
        "shapes": {k: list(v.shape) for k, v in model.state().items()},
    }
    arrays = {f"param/{k}": v for k, v in model.state().items()}
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta)), **arrays)


def load_checkpoint(path, graph: Optional[Graph] = None) -> SATModel:
    path = Path(path)
    try:
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(str(z["__meta__"]))
            state = {k[len("param/"):]: z[k] for k in z.files if k.startswith("param/")}
    except (OSError, KeyError, ValueError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    if meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {meta.get('version')} != {CHECKPOINT_VERSION}")
    if graph is not None:
        expect = (meta["num_nodes"], meta["in_dim"], meta["num_classes"])
        got = (graph.num_nodes, graph.num_features, graph.num_classes)
        if expect != got or meta["num_edges"] not in (None, graph.num_edges):
            raise CheckpointError(f"checkpoint built for (N, D, C)={expect}, graph has {got}")
    try:
        config = TrainConfig(**meta["config"])
    except (TypeError, ConfigError) as exc:
        raise CheckpointError(f"checkpoint config is incompatible: {exc}") from None
    model = SATModel(config, meta["num_nodes"], meta["in_dim"], meta["num_classes"])
    model.load_state(state)
    return model
