"""Optimizer arithmetic, the training loop's contracts (determinism, early
stopping, split isolation), stochastic inference, and the evaluation metrics.
"""

import json
import math
import warnings

import numpy as np
import pytest

import popgraph.numerics as nm
from oracles import rank_auc
from popgraph.attention import AttentionMlp, aggregate_attention, attention_forward, weight_phenotypes
from popgraph.dataio import SyntheticConfig, generate_synthetic, make_class_labels, normalize_minmax, split
from popgraph.gcn import GcnModel, gcn_forward, graph_loss, huber_loss, null_epsilon, reward, total_loss
from popgraph.graphgen import edge_probabilities, gumbel_topk_sample, pairwise_distance
from popgraph.numerics import Tensor
from popgraph.trainer import (
    AdamW,
    MetricsRecord,
    TrainConfig,
    TrainingError,
    adamw_step,
    evaluate_classification,
    evaluate_regression,
    infer,
    load_run,
    run_experiment,
    sample_trained_edges,
    save_history_csv,
    save_metrics_json,
    save_run,
    train,
)


def tiny_dataset(seed=0, n=48, task="regression"):
    cfg = SyntheticConfig(n_subjects=n, n_nonimaging=4, n_imaging=4,
                          n_node_features=6, n_relevant_nonimaging=2,
                          n_relevant_imaging=2, noise_std=0.3)
    ds = generate_synthetic(cfg, seed=seed)
    split(ds, seed=seed)
    normalize_minmax(ds)
    if task == "classification":
        classes, _ = make_class_labels(ds.y, ds.masks.train, n_classes=3)
        ds.class_labels = classes
    return ds


def tiny_config(**overrides):
    base = dict(epochs=5, patience=0, k=3, gcn_hidden1=8, gcn_hidden2=4,
                inference_samples=2, seed=3)
    base.update(overrides)
    return TrainConfig(**base)


# ---------------------------------------------------------------------------
# AdamW
# ---------------------------------------------------------------------------


def test_adamw_two_steps_match_hand_computation():
    lr, b1, b2, eps, wd = 0.1, 0.9, 0.999, 1e-8, 0.01
    p = np.array(1.0)

    # step 1, g = 0.5
    m1 = 0.1 * 0.5
    v1 = 0.001 * 0.25
    p1 = 1.0 * (1 - lr * wd) - lr * (m1 / 0.1) / (math.sqrt(v1 / 0.001) + eps)
    # step 2, g = -0.25
    m2 = b1 * m1 + 0.1 * (-0.25)
    v2 = b2 * v1 + 0.001 * 0.0625
    p2 = p1 * (1 - lr * wd) - lr * (m2 / (1 - b1 ** 2)) / (
        math.sqrt(v2 / (1 - b2 ** 2)) + eps)

    got, m, v = adamw_step(p, np.array(0.5), np.zeros(()), np.zeros(()), 1,
                           lr, b1, b2, eps, wd)
    assert abs(float(got) - p1) < 1e-12
    got, m, v = adamw_step(got, np.array(-0.25), m, v, 2, lr, b1, b2, eps, wd)
    assert abs(float(got) - p2) < 1e-12


def test_adamw_zero_grad_without_decay_is_fixed_point():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = AdamW([p], lr=0.05, weight_decay=0.0)
    before = p.values.copy()
    for _ in range(3):
        opt.step()  # grad is None, treated as zeros
    assert np.array_equal(p.values, before)


def test_adamw_decay_only_shrinks_parameters():
    p = Tensor(np.array([4.0]), requires_grad=True)
    opt = AdamW([p], lr=0.1, weight_decay=0.5)
    opt.step()
    assert np.allclose(p.values, 4.0 * (1 - 0.1 * 0.5))
    opt.step()
    assert np.allclose(p.values, 4.0 * (1 - 0.1 * 0.5) ** 2)


def test_adamw_class_matches_functional_on_matrix():
    rng = np.random.default_rng(0)
    values = rng.normal(size=(3, 2))
    grad = rng.normal(size=(3, 2))
    p = Tensor(values.copy(), requires_grad=True)
    p.grad = grad.copy()
    opt = AdamW([p], lr=0.01)
    opt.step()
    expect, _, _ = adamw_step(values, grad, np.zeros((3, 2)), np.zeros((3, 2)), 1, 0.01)
    assert np.array_equal(p.values, expect)


# ---------------------------------------------------------------------------
# training loop contracts
# ---------------------------------------------------------------------------


def test_train_smoke_history_and_result():
    ds = tiny_dataset()
    result = train(ds, tiny_config())
    assert len(result.history) == 5
    for row in result.history:
        assert set(row) == {"epoch", "L_total", "L_gcn", "L_graph", "val_metric"}
        assert math.isfinite(row["L_total"])
        assert abs(row["L_total"] - (row["L_gcn"] + row["L_graph"])) < 1e-9
    assert result.attention_vector.shape == (8,)
    assert np.all(result.attention_vector >= 0) and np.all(result.attention_vector <= 1)
    assert result.temperature > 0
    assert result.epsilon > 0


def test_train_is_bit_identical_across_runs():
    ds1 = tiny_dataset(seed=1)
    ds2 = tiny_dataset(seed=1)
    r1 = train(ds1, tiny_config(seed=7))
    r2 = train(ds2, tiny_config(seed=7))
    assert r1.history == r2.history
    for a, b in zip(r1.model.params(), r2.model.params()):
        assert np.array_equal(a.values, b.values)
    assert np.array_equal(r1.attention_vector, r2.attention_vector)
    assert r1.tau.values == r2.tau.values


def test_train_patience_zero_keeps_final_parameters():
    ds = tiny_dataset()
    result = train(ds, tiny_config(epochs=4, patience=0))
    assert len(result.history) == 4
    assert result.best_epoch == 3
    assert result.best_val == result.history[-1]["val_metric"]


def test_train_with_patience_reports_best_validation():
    ds = tiny_dataset()
    result = train(ds, tiny_config(epochs=8, patience=2))
    vals = [row["val_metric"] for row in result.history]
    assert result.best_val == min(vals)
    assert result.history[result.best_epoch]["val_metric"] == result.best_val
    # runs at most patience+1 epochs past the best before stopping
    assert len(result.history) <= min(8, result.best_epoch + 1 + 2 + 1)


def test_train_ignores_val_and_test_labels_for_updates():
    ds1 = tiny_dataset(seed=2)
    ds2 = tiny_dataset(seed=2)
    outside = ~ds2.masks.train
    ds2.y = ds2.y.copy()
    ds2.y[outside] += 37.0  # wreck the labels the optimizer must never see
    cfg = tiny_config(epochs=4, patience=0)
    r1 = train(ds1, cfg)
    r2 = train(ds2, cfg)
    for key in ("L_total", "L_gcn", "L_graph"):
        assert [row[key] for row in r1.history] == [row[key] for row in r2.history]
    for a, b in zip(r1.model.params(), r2.model.params()):
        assert np.array_equal(a.values, b.values)


def test_train_random_metric_skips_attention_and_edge_loss():
    ds = tiny_dataset()
    result = train(ds, tiny_config(distance_metric="random"))
    assert result.attention is None
    assert result.tau is None
    assert all(row["L_graph"] == 0.0 for row in result.history)


def test_train_fixed_edges_skips_sampling():
    ds = tiny_dataset()
    rng = np.random.default_rng(0)
    from popgraph.graphgen import random_graph
    edges = random_graph(ds.n_subjects, 3, rng)
    result = train(ds, tiny_config(), fixed_edges=edges)
    assert result.attention is None and result.tau is None
    assert all(row["L_graph"] == 0.0 for row in result.history)
    assert np.array_equal(result.fixed_edges, edges)


def test_train_ones_attention_trains_temperature_only():
    ds = tiny_dataset()
    result = train(ds, tiny_config(attention_mode="ones", epochs=3))
    assert result.attention is None
    assert result.attention_vector is None
    assert result.tau is not None


def test_train_lam_zero_ones_attention_descends():
    ds = tiny_dataset(n=60)
    cfg = tiny_config(attention_mode="ones", lam=0.0, epochs=10, patience=0)
    result = train(ds, cfg)
    assert result.history[-1]["L_total"] < result.history[0]["L_total"]


def test_train_aborts_with_epoch_on_divergence():
    ds = tiny_dataset()
    with pytest.raises(TrainingError) as err:
        train(ds, tiny_config(learning_rate=1e150, epochs=3))
    assert err.value.epoch == 0
    assert "epoch 0" in str(err.value)


def test_train_classification_smoke():
    ds = tiny_dataset(task="classification")
    result = train(ds, tiny_config(task="classification", n_classes=3))
    assert all(0.0 <= row["val_metric"] <= 1.0 for row in result.history)
    assert result.model.n_out == 3
    # uniform-over-classes null reward offset
    assert abs(result.epsilon - (1 - 1 / 3)) < 1e-12


def test_train_classification_requires_class_labels():
    ds = tiny_dataset()  # regression dataset, no bins
    with pytest.raises(ValueError, match="class labels"):
        train(ds, tiny_config(task="classification"))


def test_train_config_validation():
    with pytest.raises(ValueError, match="task"):
        TrainConfig(task="ranking").validate()
    with pytest.raises(ValueError, match="distance_metric"):
        TrainConfig(distance_metric="manhattan").validate()
    with pytest.raises(ValueError, match="attention_mode"):
        TrainConfig(attention_mode="softmax").validate()
    with pytest.raises(ValueError, match="epochs"):
        TrainConfig(epochs=0).validate()


# ---------------------------------------------------------------------------
# gradient wiring: one hand-built epoch with frozen selection noise
# ---------------------------------------------------------------------------


def build_frozen_loss(ds, mlp, tau, model, noise, k=3):
    phen = ds.phenotype_matrix()
    a = aggregate_attention(attention_forward(phen, mlp))
    f = weight_phenotypes(a, Tensor(phen))
    d = pairwise_distance(f, "euclidean")
    log_p = edge_probabilities(d, nm.exp(tau))
    graph = gumbel_topk_sample(log_p, k, noise=noise)
    preds = gcn_forward(graph.a_hat, ds.X, model)
    l_gcn = huber_loss(preds, ds.y, ds.masks.train)
    eps = null_epsilon(ds.y[ds.masks.train])
    rho = reward(ds.y, preds.values, eps)
    l_graph = graph_loss(graph, rho, ds.masks.train)
    return total_loss(l_gcn, l_graph, rewards=rho), rho


def test_edge_loss_reaches_scorer_and_temperature():
    ds = tiny_dataset(n=24)
    rng = np.random.default_rng(5)
    phen = ds.phenotype_matrix()
    mlp = AttentionMlp.init(phen.shape[1], rng)
    model = GcnModel.init(ds.X.shape[1], rng, hidden1=8, hidden2=4)
    tau = Tensor(0.0, requires_grad=True)
    noise = rng.gumbel(0.0, 1.0, (24, 24))

    breakdown, _ = build_frozen_loss(ds, mlp, tau, model, noise)
    nm.backward(breakdown.total)
    assert tau.grad is not None and float(np.abs(tau.grad)) > 0
    assert any(np.abs(p.grad).max() > 0 for p in mlp.params())
    assert all(np.abs(p.grad).max() > 0 for p in (model.w1, model.w3))


def test_one_small_step_descends_frozen_objective():
    ds = tiny_dataset(n=24)
    rng = np.random.default_rng(11)
    phen = ds.phenotype_matrix()
    mlp = AttentionMlp.init(phen.shape[1], rng)
    model = GcnModel.init(ds.X.shape[1], rng, hidden1=8, hidden2=4,
                          head_bias=float(ds.y[ds.masks.train].mean()))
    tau = Tensor(0.0, requires_grad=True)
    noise = rng.gumbel(0.0, 1.0, (24, 24))
    params = mlp.params() + model.params() + [tau]

    breakdown, rho0 = build_frozen_loss(ds, mlp, tau, model, noise)
    before = breakdown.total_value
    nm.backward(breakdown.total)
    for p in params:
        if p.grad is not None:
            p.values = p.values - 1e-4 * p.grad

    # rebuild with the same selection noise and the old rewards: the pure
    # first-order objective the gradient step was taken against
    phen_t = Tensor(ds.phenotype_matrix())
    a = aggregate_attention(attention_forward(ds.phenotype_matrix(), mlp))
    f = weight_phenotypes(a, phen_t)
    d = pairwise_distance(f, "euclidean")
    log_p = edge_probabilities(d, nm.exp(tau))
    graph = gumbel_topk_sample(log_p, 3, noise=noise)
    preds = gcn_forward(graph.a_hat, ds.X, model)
    l_gcn = huber_loss(preds, ds.y, ds.masks.train)
    l_graph = graph_loss(graph, rho0, ds.masks.train)
    after = total_loss(l_gcn, l_graph).total_value
    nm.reset_tape()
    assert after < before


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------


def test_infer_deterministic_given_rng_seed():
    ds = tiny_dataset()
    result = train(ds, tiny_config())
    a = infer(result, ds, 4, np.random.default_rng(42))
    b = infer(result, ds, 4, np.random.default_rng(42))
    assert np.array_equal(a.predictions, b.predictions)
    c = infer(result, ds, 4, np.random.default_rng(43))
    assert not np.array_equal(a.predictions, c.predictions)


def test_infer_fixed_graph_ignores_sample_count():
    ds = tiny_dataset()
    from popgraph.graphgen import knn_static_graph
    edges = knn_static_graph(ds.phenotype_matrix(), 3)
    result = train(ds, tiny_config(), fixed_edges=edges)
    one = infer(result, ds, 1, np.random.default_rng(0))
    many = infer(result, ds, 5, np.random.default_rng(1))
    assert np.allclose(one.predictions, many.predictions)


def test_infer_classification_outputs_probabilities():
    ds = tiny_dataset(task="classification")
    result = train(ds, tiny_config(task="classification", n_classes=3))
    out = infer(result, ds, 3, np.random.default_rng(0))
    assert out.probabilities.shape == (ds.n_subjects, 3)
    assert np.allclose(out.probabilities.sum(axis=1), 1.0)
    assert np.array_equal(out.predictions, out.probabilities.argmax(axis=1))


def test_infer_rejects_nonpositive_sample_count():
    ds = tiny_dataset()
    result = train(ds, tiny_config())
    with pytest.raises(ValueError):
        infer(result, ds, 0, np.random.default_rng(0))


def test_sample_trained_edges_shapes_and_paths():
    ds = tiny_dataset()
    result = train(ds, tiny_config())
    edges = sample_trained_edges(result, ds, np.random.default_rng(0))
    assert edges.shape == (ds.n_subjects * 3, 2)
    again = sample_trained_edges(result, ds, np.random.default_rng(0))
    assert np.array_equal(edges, again)

    fixed = train(ds, tiny_config(), fixed_edges=edges)
    assert np.array_equal(sample_trained_edges(fixed, ds, np.random.default_rng(1)), edges)


# ---------------------------------------------------------------------------
# evaluation metrics
# ---------------------------------------------------------------------------


def test_evaluate_regression_hand_example():
    pred = np.array([1.0, 2.0, 3.0, 9.0])
    y = np.array([1.0, 1.0, 5.0, 9.0])
    mask = np.array([True, True, True, False])
    out = evaluate_regression(pred, y, mask)
    assert abs(out["mae"] - 1.0) < 1e-12
    expected_r = np.corrcoef(pred[:3], y[:3])[0, 1]
    assert abs(out["pearson_r"] - expected_r) < 1e-12


def test_evaluate_regression_constant_prediction_has_no_r():
    out = evaluate_regression(np.full(5, 2.0), np.arange(5.0), np.ones(5, bool))
    assert out["pearson_r"] is None
    assert out["mae"] == np.mean(np.abs(2.0 - np.arange(5.0)))


def test_evaluate_regression_null_model_ties_reward_threshold():
    rng = np.random.default_rng(9)
    y = rng.uniform(40.0, 90.0, 200)
    mask = np.zeros(200, bool)
    mask[:150] = True
    pred = np.full(200, y[mask].mean())
    mae = evaluate_regression(pred, y, mask)["mae"]
    eps = null_epsilon(y[mask])
    assert abs(mae - eps) < 1e-9


def test_evaluate_regression_empty_mask():
    with pytest.raises(ValueError):
        evaluate_regression(np.ones(3), np.ones(3), np.zeros(3, bool))


def test_evaluate_classification_hand_example():
    probs = np.array([
        [0.7, 0.2, 0.1],
        [0.1, 0.8, 0.1],
        [0.2, 0.3, 0.5],
        [0.5, 0.4, 0.1],
    ])
    truth = np.array([0, 1, 2, 1])
    out = evaluate_classification(probs, truth, np.ones(4, bool))
    assert abs(out["accuracy"] - 0.75) < 1e-12
    # predictions are [0, 1, 2, 0], so class 0 has one false positive and
    # class 1 one false negative: F1 = 2/3, 2/3, 1
    assert abs(out["macro_f1"] - (2.0 / 3.0 + 2.0 / 3.0 + 1.0) / 3.0) < 1e-12
    expected_auc = np.mean([rank_auc(probs[:, c], truth == c) for c in range(3)])
    assert abs(out["macro_auc"] - expected_auc) < 1e-12


def test_evaluate_classification_auc_matches_bruteforce_with_ties():
    rng = np.random.default_rng(3)
    n, c = 40, 4
    raw = rng.integers(0, 5, (n, c)).astype(float) + 0.25  # coarse grid forces ties
    probs = raw / raw.sum(axis=1, keepdims=True)
    truth = rng.integers(0, c, n)
    while len(np.unique(truth)) < c:
        truth = rng.integers(0, c, n)
    out = evaluate_classification(probs, truth, np.ones(n, bool))
    expected = np.mean([rank_auc(probs[:, j], truth == j) for j in range(c)])
    assert abs(out["macro_auc"] - expected) < 1e-12


def test_evaluate_classification_absent_class():
    probs = np.array([
        [0.6, 0.3, 0.1],
        [0.2, 0.7, 0.1],
        [0.3, 0.6, 0.1],
    ])
    truth = np.array([0, 1, 1])  # class 2 never appears
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        out = evaluate_classification(probs, truth, np.ones(3, bool))
    assert any("absent" in str(w.message) for w in caught)
    # AUC averages the two present classes only
    expected = np.mean([rank_auc(probs[:, 0], truth == 0),
                        rank_auc(probs[:, 1], truth == 1)])
    assert abs(out["macro_auc"] - expected) < 1e-12
    # F1 still divides by all three classes
    assert abs(out["macro_f1"] - (1.0 + 1.0 + 0.0) / 3.0) < 1e-12


def test_evaluate_classification_rejects_unnormalized_rows():
    probs = np.array([[0.5, 0.6], [0.5, 0.5]])
    with pytest.raises(ValueError, match="sum to 1"):
        evaluate_classification(probs, np.array([0, 1]), np.ones(2, bool))


# ---------------------------------------------------------------------------
# records and exports
# ---------------------------------------------------------------------------


def test_history_csv_round_trip(tmp_path):
    history = [
        {"epoch": 0, "L_total": 1.5, "L_gcn": 1.0, "L_graph": 0.5, "val_metric": 3.25},
        {"epoch": 1, "L_total": 1.25, "L_gcn": 0.75, "L_graph": 0.5, "val_metric": 3.0},
    ]
    path = tmp_path / "history.csv"
    save_history_csv(history, path)
    lines = path.read_text(encoding="utf-8").strip().splitlines()
    assert lines[0] == "epoch,L_total,L_gcn,L_graph,val_metric"
    assert lines[1].split(",") == ["0", "1.5", "1.0", "0.5", "3.25"]
    assert len(lines) == 3


def test_metrics_json_is_byte_identical_and_excludes_timing(tmp_path):
    a = MetricsRecord(task="regression", seed=1, config_hash="ff00", mae=2.5,
                      pearson_r=0.9, best_epoch=12, epsilon=8.4,
                      wall_clock_seconds=120.0)
    b = MetricsRecord(task="regression", seed=1, config_hash="ff00", mae=2.5,
                      pearson_r=0.9, best_epoch=12, epsilon=8.4,
                      wall_clock_seconds=999.9)
    pa, pb = tmp_path / "a.json", tmp_path / "b.json"
    save_metrics_json(a, pa)
    save_metrics_json(b, pb)
    assert pa.read_bytes() == pb.read_bytes()
    payload = json.loads(pa.read_text(encoding="utf-8"))
    assert "wall_clock_seconds" not in payload
    assert payload["config_hash"] == "ff00"


def test_metrics_record_validation():
    with pytest.raises(ValueError, match="MAE"):
        MetricsRecord(task="regression", seed=0, config_hash="", mae=-1.0).validate()
    with pytest.raises(ValueError, match="Pearson"):
        MetricsRecord(task="regression", seed=0, config_hash="", pearson_r=1.5).validate()
    with pytest.raises(ValueError, match="accuracy"):
        MetricsRecord(task="classification", seed=0, config_hash="", accuracy=1.2).validate()


def test_run_checkpoint_round_trip(tmp_path):
    ds = tiny_dataset()
    result = train(ds, tiny_config())
    path = tmp_path / "run.json"
    save_run(result, path)
    loaded = load_run(path)
    assert loaded.config == result.config
    assert loaded.epsilon == result.epsilon
    assert loaded.best_epoch == result.best_epoch
    for a, b in zip(loaded.model.params(), result.model.params()):
        assert np.array_equal(a.values, b.values)
    for a, b in zip(loaded.attention.params(), result.attention.params()):
        assert np.array_equal(a.values, b.values)
    assert loaded.tau.values == result.tau.values
    # identical stochastic predictions through the restored parameters
    a = infer(result, ds, 3, np.random.default_rng(5)).predictions
    b = infer(loaded, ds, 3, np.random.default_rng(5)).predictions
    assert np.array_equal(a, b)


def test_run_checkpoint_keeps_fixed_edges(tmp_path):
    ds = tiny_dataset()
    from popgraph.graphgen import knn_static_graph
    edges = knn_static_graph(ds.phenotype_matrix(), 3)
    result = train(ds, tiny_config(), fixed_edges=edges)
    path = tmp_path / "run.json"
    save_run(result, path)
    loaded = load_run(path)
    assert np.array_equal(loaded.fixed_edges, edges)
    assert loaded.attention is None and loaded.tau is None


def test_run_checkpoint_rejects_unknown_version(tmp_path):
    ds = tiny_dataset()
    result = train(ds, tiny_config(epochs=2))
    path = tmp_path / "run.json"
    save_run(result, path)
    payload = json.loads(path.read_text(encoding="utf-8"))
    payload["format_version"] = 99
    path.write_text(json.dumps(payload), encoding="utf-8")
    with pytest.raises(ValueError, match="version"):
        load_run(path)


def test_run_experiment_fills_record():
    ds = tiny_dataset()
    result, record = run_experiment(ds, tiny_config())
    assert record.task == "regression"
    assert record.mae is not None and record.mae >= 0
    assert record.homophily is not None and record.homophily > 0
    assert record.extra["n_epochs_run"] == len(result.history)
    assert record.wall_clock_seconds > 0
    assert len(record.config_hash) == 64

    # pure function of (dataset, config): records agree exactly
    _, again = run_experiment(ds, tiny_config())
    assert record.to_json_dict() == again.to_json_dict()
