import json

import numpy as np
import pytest

from satgnn.graph import Graph
from satgnn.model import (
    CheckpointError,
    ConfigError,
    SATModel,
    TrainConfig,
    TrainingDivergedError,
    accuracy,
    build_model,
    evaluate_clustering,
    fit,
    format_ablation,
    load_checkpoint,
    run_ablation,
    save_checkpoint,
    train,
)
from satgnn.synthetic import planted_partition

FAST = dict(epochs=15, hidden_heads=2, hidden_dim=4)


@pytest.fixture(scope="module")
def small_graph():
    return planted_partition(num_nodes=90, num_classes=3, num_features=24, seed=3)


def two_cliques():
    features = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]])
    splits = {"train": np.array([0, 2]), "val": np.array([1]), "test": np.array([3])}
    return Graph.from_edges(4, [(0, 1), (2, 3)], features, np.array([0, 0, 1, 1]), 2, splits)


def expected_parameter_count(n, d, c, heads=8, hidden=8):
    # W, a, eps and mix logits per layer, then P
    hidden_layer = d * heads * hidden + heads * 2 * hidden + heads + heads * 2
    output_layer = heads * hidden * c + 2 * c + 1 + 2
    return hidden_layer + output_layer + n * c


# ------------------------------------------------------------------- build


def test_cora_shaped_parameter_count_is_golden():
    model = SATModel(TrainConfig(), num_nodes=2708, in_dim=1433, num_classes=7)
    assert model.reducer is None
    assert model.hidden.out_width == 64 and model.output.out_width == 7
    assert model.parameter_count() == expected_parameter_count(2708, 1433, 7) == 111285


def test_single_hidden_head_stack():
    model = SATModel(TrainConfig(hidden_heads=1, strategy="none"), 10, 5, 3)
    assert model.hidden.heads == 1 and model.hidden.out_width == 8
    assert model.embedding is None
    assert set(model.parameters()) == {"hidden.weight", "hidden.attention", "output.weight", "output.attention"}


def test_feature_reduction_only_above_threshold():
    assert SATModel(TrainConfig(), 5, 2048, 2).reducer is None
    model = SATModel(TrainConfig(), 5, 2049, 2)
    assert model.reducer is not None and model.hidden.in_dim == 512
    assert "reduce.weight" in model.decayed_parameters()


def test_wide_features_train_one_epoch():
    rng = np.random.default_rng(0)
    n = 30
    features = (rng.random((n, 3000)) < 0.01).astype(float)
    labels = rng.integers(0, 2, n)
    splits = {"train": np.arange(10), "val": np.arange(10, 20), "test": np.arange(20, 30)}
    edges = np.stack([np.arange(n - 1), np.arange(1, n)], axis=1)
    g = Graph.from_edges(n, edges, features, labels, 2, splits)
    model, metrics = fit(TrainConfig(epochs=1, **{k: v for k, v in FAST.items() if k != "epochs"}), g)
    assert model.reducer is not None and len(metrics.per_epoch) == 1


@pytest.mark.parametrize(
    "changes",
    [dict(lr=0.0), dict(epochs=-1), dict(beta=0.0), dict(beta=1.2), dict(dropout=1.0),
     dict(strategy="sideways"), dict(dissim="colour"), dict(hidden_heads=0), dict(checkpoint="worst")],
)
def test_invalid_config_rejected(changes):
    with pytest.raises(ConfigError):
        TrainConfig(**changes)


def test_strategy_default_beta():
    assert TrainConfig(strategy="subtractive").beta == 0.5
    assert TrainConfig(strategy="contractive").beta == 1.0
    assert TrainConfig().replace(strategy="subtractive").beta == 0.5
    assert TrainConfig(strategy="none").use_epsilon is False


# ------------------------------------------------------------------- train


def test_zero_epochs_reports_initialization(small_graph):
    config = TrainConfig(epochs=0, **{k: v for k, v in FAST.items() if k != "epochs"})
    model = build_model(config, small_graph)
    before = model.state()
    metrics = train(model, small_graph)
    assert metrics.per_epoch == []
    for name, value in model.state().items():
        np.testing.assert_array_equal(value, before[name])
    assert metrics.test_acc == accuracy(model.logits(small_graph), small_graph.labels, small_graph.split("test"))


def test_two_cliques_reach_full_accuracy():
    g = two_cliques()
    model, metrics = fit(TrainConfig(epochs=200), g)
    assert metrics.train_acc == 1.0
    assert metrics.cluster_acc == 1.0
    assert evaluate_clustering(model, g) == 1.0


def test_training_is_deterministic(small_graph):
    config = TrainConfig(seed=5, **FAST)
    (m1, a), (m2, b) = fit(config, small_graph), fit(config, small_graph)
    da, db = a.to_dict(), b.to_dict()
    da.pop("seconds"), db.pop("seconds")
    assert json.dumps(da, sort_keys=True) == json.dumps(db, sort_keys=True)
    for name, value in m1.state().items():
        np.testing.assert_array_equal(value, m2.state()[name])


def test_seed_changes_the_run(small_graph):
    a = fit(TrainConfig(seed=1, **FAST), small_graph)[0].state()
    b = fit(TrainConfig(seed=2, **FAST), small_graph)[0].state()
    assert not np.array_equal(a["hidden.weight"], b["hidden.weight"])


def test_reported_loss_decomposes(small_graph):
    metrics = fit(TrainConfig(mf_weight=0.7, **FAST), small_graph)[1]
    for row in metrics.per_epoch:
        assert abs(row["loss_total"] - (row["loss_task"] + 0.7 * row["loss_mf"])) <= 1e-10
        assert row["loss_mf"] > 0


def test_accuracies_in_unit_interval(small_graph):
    m = fit(TrainConfig(strategy="subtractive", **FAST), small_graph)[1]
    for value in (m.train_acc, m.val_acc, m.test_acc, m.cluster_acc):
        assert 0.0 <= value <= 1.0
    assert 0 <= m.best_epoch < FAST["epochs"]


def test_best_validation_checkpoint_is_restored(small_graph):
    model, metrics = fit(TrainConfig(**FAST), small_graph)
    best = max(metrics.per_epoch, key=lambda r: (r["val_acc"], -r["val_loss"]))
    assert metrics.per_epoch[metrics.best_epoch] is best
    assert metrics.val_acc == best["val_acc"]


def test_weight_decay_shrinks_parameter_norms(small_graph):
    norms = []
    for decay in (0.0, 5e-3, 5e-2, 5e-1):
        model, _ = fit(TrainConfig(weight_decay=decay, dropout=0.0, checkpoint="last", **FAST), small_graph)
        decayed = model.decayed_parameters()
        norms.append(sum(float(np.sum(p.data**2)) for k, p in model.parameters().items() if k in decayed))
    assert norms == sorted(norms, reverse=True)
    assert model.decayed_parameters().isdisjoint({"hidden.eps", "hidden.mix", "output.eps", "output.mix"})


def test_feature_only_variant_has_no_structural_embedding(small_graph):
    model, metrics = fit(TrainConfig(dissim="feature", **FAST), small_graph)
    assert model.embedding is None and "embedding" not in model.parameters()
    assert all(row["loss_mf"] == 0.0 for row in metrics.per_epoch)


def test_missing_split_is_config_error(small_graph):
    g = Graph.from_edges(3, [(0, 1)], np.eye(3), np.array([0, 1, 0]), 2)
    with pytest.raises(ConfigError):
        train(build_model(TrainConfig(**FAST), g), g)


def test_nan_loss_aborts_with_diagnostics(small_graph):
    model = build_model(TrainConfig(**FAST), small_graph)
    model.hidden.weight.data[0, 0] = np.nan
    with pytest.raises(TrainingDivergedError) as info:
        train(model, small_graph)
    diag = info.value.diagnostics
    assert diag["epoch"] == 0 and "hidden.weight" in diag["nonfinite_params"]


# -------------------------------------------------------------- evaluation


def test_accuracy_examples():
    labels = np.array([0, 1, 2, 0])
    assert accuracy(np.eye(3)[labels] * 5, labels) == 1.0
    # uniform logits predict class 0 everywhere: two hits out of four
    assert accuracy(np.zeros((4, 3)), labels) == 0.5
    assert accuracy(np.zeros((4, 3)), labels, np.array([1, 2])) == 0.0


def test_random_labels_give_chance_accuracy():
    rng = np.random.default_rng(11)
    classes = 5
    scores = [accuracy(rng.normal(size=(2000, classes)), rng.integers(0, classes, 2000)) for _ in range(50)]
    assert abs(np.mean(scores) - 1 / classes) < 0.01


# -------------------------------------------------------------- ablation


def test_ablation_rows_and_table(small_graph):
    rows = run_ablation(TrainConfig(**FAST), small_graph, seeds=(0,), variants=["GAT", "C-F", "SAT-S"])
    assert [r.name for r in rows] == ["GAT", "C-F", "SAT-S"]
    table = format_ablation(rows).splitlines()
    assert table[0].startswith("variant,") and table[1].startswith("GAT,none,-,")
    assert rows[2].strategy == "subtractive"


# ------------------------------------------------------------- checkpoints


def test_checkpoint_round_trip(tmp_path, small_graph):
    model, _ = fit(TrainConfig(**FAST), small_graph)
    path = tmp_path / "model.npz"
    save_checkpoint(model, path, small_graph)
    restored = load_checkpoint(path, small_graph)
    np.testing.assert_array_equal(restored.logits(small_graph), model.logits(small_graph))
    assert restored.config == model.config


def test_checkpoint_rejects_other_graph(tmp_path, small_graph):
    model = build_model(TrainConfig(**FAST), small_graph)
    path = tmp_path / "model.npz"
    save_checkpoint(model, path, small_graph)
    other = planted_partition(num_nodes=50, num_classes=3, num_features=24, seed=4)
    with pytest.raises(CheckpointError):
        load_checkpoint(path, other)


def test_checkpoint_version_mismatch(tmp_path, small_graph):
    model = build_model(TrainConfig(**FAST), small_graph)
    path = tmp_path / "model.npz"
    save_checkpoint(model, path)
    with np.load(path) as z:
        arrays = {k: z[k] for k in z.files}
    meta = json.loads(str(arrays["__meta__"]))
    meta["version"] = 99
    arrays["__meta__"] = np.array(json.dumps(meta))
    np.savez(path, **arrays)
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(path)


def test_garbage_checkpoint(tmp_path):
    path = tmp_path / "junk.npz"
    path.write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
