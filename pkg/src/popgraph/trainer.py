"""End-to-end training: joint optimization of the phenotype scorer, the GCN,
and the kernel temperature, with per-epoch graph resampling, early stopping
on validation, stochastic-inference averaging, and evaluation metrics.

One call to train() owns one RNG stream (seeded from the config), so two runs
with the same config produce bit-identical histories.
"""

from __future__ import annotations

import csv
import json
import time
import warnings
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy.stats import rankdata

from . import numerics as nm
from .attention import AttentionMlp, aggregate_attention, attention_forward, weight_phenotypes
from .dataio import PopulationDataset, config_hash
from .gcn import (
    GcnModel,
    cross_entropy_loss,
    gcn_forward,
    graph_loss,
    huber_loss,
    null_epsilon,
    reward,
    total_loss,
)
from .graphgen import (
    derive_run_seed,
    edge_probabilities,
    gumbel_topk_sample,
    homophily_score,
    pairwise_distance,
    random_graph,
    symmetrize,
)
from .numerics import Tensor

__all__ = [
    "TrainConfig",
    "TrainResult",
    "TrainingError",
    "MetricsRecord",
    "AdamW",
    "adamw_step",
    "train",
    "infer",
    "InferenceResult",
    "sample_trained_edges",
    "evaluate_regression",
    "evaluate_classification",
    "run_experiment",
    "save_history_csv",
    "save_metrics_json",
    "save_run",
    "load_run",
]

RUN_FORMAT_VERSION = 1

# substream tags for seeds derived from a run's master seed; large constants
# so a derived seed never lands on another run's master seed
INFERENCE_STREAM = 0x5EED0001
HOMOPHILY_STREAM = 0x5EED0002


class TrainingError(RuntimeError):
    """Training aborted; carries the failing epoch and last loss breakdown."""

    def __init__(self, message, epoch=None, breakdown=None):
        super().__init__(message)
        self.epoch = epoch
        self.breakdown = breakdown


@dataclass
class TrainConfig:
    task: str = "regression"
    learning_rate: float = 0.005
    epochs: int = 300
    patience: int = 30            # 0 disables early stopping
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    eps_opt: float = 1e-8
    k: int = 5
    distance_metric: str = "euclidean"   # euclidean | cosine | hyperbolic | random
    inference_samples: int = 8
    lam: float = 1.0
    seed: int = 0
    n_classes: int = 4
    gcn_hidden1: int = 512
    gcn_hidden2: int = 128
    attention_mode: str = "learned"      # learned | ones
    huber_delta: float = 1.0

    def validate(self) -> None:
        if self.task not in ("regression", "classification"):
            raise ValueError(f"unknown task {self.task!r}")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.k < 1:
            raise ValueError("k must be at least 1")
        if self.inference_samples < 1:
            raise ValueError("inference_samples must be at least 1")
        if self.distance_metric not in ("euclidean", "cosine", "hyperbolic", "random"):
            raise ValueError(f"unknown distance_metric {self.distance_metric!r}")
        if self.attention_mode not in ("learned", "ones"):
            raise ValueError(f"unknown attention_mode {self.attention_mode!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    model: GcnModel
    attention: AttentionMlp | None
    tau: Tensor | None
    attention_vector: np.ndarray | None
    history: list
    best_epoch: int
    best_val: float
    epsilon: float
    config: TrainConfig
    fixed_edges: np.ndarray | None = None

    @property
    def temperature(self) -> float | None:
        return None if self.tau is None else float(np.exp(self.tau.values))


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


def adamw_step(values, grad, m, v, t, lr, beta1=0.9, beta2=0.999,
               eps=1e-8, weight_decay=0.01):
    """One decoupled-weight-decay Adam update. ``t`` is the 1-based step
    count. Returns (new_values, new_m, new_v)."""
    m = beta1 * m + (1.0 - beta1) * grad
    v = beta2 * v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    new_values = values * (1.0 - lr * weight_decay) - lr * m_hat / (np.sqrt(v_hat) + eps)
    return new_values, m, v


class AdamW:
    """Holds first/second moments for a fixed parameter list. Decay applies
    uniformly to every parameter it manages."""

    def __init__(self, params, lr=0.005, beta1=0.9, beta2=0.999,
                 eps=1e-8, weight_decay=0.01):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m = [np.zeros_like(p.values) for p in self.params]
        self._v = [np.zeros_like(p.values) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        self.t += 1
        for i, p in enumerate(self.params):
            grad = p.grad if p.grad is not None else np.zeros_like(p.values)
            p.values, self._m[i], self._v[i] = adamw_step(
                p.values, grad, self._m[i], self._v[i], self.t,
                self.lr, self.beta1, self.beta2, self.eps, self.weight_decay)


# ---------------------------------------------------------------------------
# graph construction shared by training and inference
# ---------------------------------------------------------------------------


def _attention_vector(mlp, phenotypes, mode: str):
    if mode == "ones":
        return Tensor(np.ones(phenotypes.shape[1]))
    return aggregate_attention(attention_forward(phenotypes, mlp))


def _sample_epoch_graph(mlp, tau, phenotypes, config, rng, noise=None):
    """Weighted phenotypes -> distances -> kernel -> one Gumbel-Top-k draw."""
    a = _attention_vector(mlp, phenotypes, config.attention_mode)
    f = weight_phenotypes(a, Tensor(phenotypes))
    d = pairwise_distance(f, config.distance_metric)
    log_p = edge_probabilities(d, nm.exp(tau))
    return gumbel_topk_sample(log_p, config.k, rng=rng, noise=noise)


def _epoch_adjacency(mlp, tau, phenotypes, config, rng, fixed_a_hat=None):
    """Returns (a_hat, sampled_graph_or_None) for one forward pass."""
    if fixed_a_hat is not None:
        return fixed_a_hat, None
    if config.distance_metric == "random":
        n = phenotypes.shape[0]
        edges = random_graph(n, config.k, rng)
        return symmetrize(edges, n), None
    graph = _sample_epoch_graph(mlp, tau, phenotypes, config, rng)
    return graph.a_hat, graph


def _targets(dataset: PopulationDataset, task: str):
    if task == "classification":
        if dataset.class_labels is None:
            raise ValueError("classification training needs class labels; "
                             "bin the dataset first")
        return dataset.class_labels
    return dataset.y


def _predicted(preds_values, task: str):
    if task == "classification":
        return preds_values.argmax(axis=1)
    return preds_values


def _val_metric(preds_values, targets, mask, task: str) -> float:
    if task == "classification":
        return float(np.mean(preds_values.argmax(axis=1)[mask] == targets[mask]))
    return float(np.mean(np.abs(preds_values[mask] - targets[mask])))


def _improved(candidate: float, best: float, task: str) -> bool:
    return candidate > best if task == "classification" else candidate < best


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


def train(dataset: PopulationDataset, config: TrainConfig,
          fixed_edges: np.ndarray | None = None) -> TrainResult:
    """Optimize scorer, predictor, and temperature jointly.

    Per epoch: resample the graph, run the predictor, combine the supervised
    loss (train nodes) with the reward-weighted edge loss (train-sourced
    edges), and take one AdamW step. Validation runs on a fresh sample; the
    best-validation parameters are restored at the end unless patience is 0,
    in which case the final parameters stand.

    ``fixed_edges`` freezes the graph to a precomputed edge set: no sampling,
    no edge loss, identical wiring otherwise (the static-graph baseline).
    """
    config.validate()
    masks = dataset.require_masks()
    targets = _targets(dataset, config.task)
    train_mask, val_mask = masks.train, masks.val
    rng = np.random.default_rng(config.seed)
    phenotypes = dataset.phenotype_matrix()
    n_out = config.n_classes if config.task == "classification" else 1

    adaptive = fixed_edges is None and config.distance_metric != "random"
    mlp = None
    tau = None
    extra_params = []
    if adaptive:
        if config.attention_mode == "learned":
            mlp = AttentionMlp.init(phenotypes.shape[1], rng)
            extra_params.extend(mlp.params())
        tau = Tensor(0.0, requires_grad=True)
        extra_params.append(tau)

    head_bias = float(targets[train_mask].mean()) if config.task == "regression" else 0.0
    model = GcnModel.init(
        dataset.X.shape[1], rng,
        hidden1=config.gcn_hidden1, hidden2=config.gcn_hidden2,
        n_out=n_out, task=config.task, head_bias=head_bias)

    epsilon = null_epsilon(targets[train_mask], task=config.task,
                           n_classes=config.n_classes)
    optimizer = AdamW(model.params() + extra_params,
                      lr=config.learning_rate, beta1=config.beta1,
                      beta2=config.beta2, eps=config.eps_opt,
                      weight_decay=config.weight_decay)

    fixed_a_hat = None
    if fixed_edges is not None:
        fixed_a_hat = symmetrize(fixed_edges, dataset.n_subjects)

    history = []
    best_val = np.inf if config.task == "regression" else -np.inf
    best_epoch = -1
    best_snapshot = None
    stale = 0
    breakdown = None

    for epoch in range(config.epochs):
        try:
            nm.reset_tape()
            optimizer.zero_grad()
            a_hat, graph = _epoch_adjacency(mlp, tau, phenotypes, config, rng,
                                            fixed_a_hat)
            preds = gcn_forward(a_hat, dataset.X, model)
            if config.task == "regression":
                l_gcn = huber_loss(preds, targets, train_mask, config.huber_delta)
            else:
                l_gcn = cross_entropy_loss(preds, targets, train_mask)

            if graph is not None:
                rho = reward(targets, _predicted(preds.values, config.task),
                             epsilon, config.task)
                l_graph = graph_loss(graph, rho, train_mask)
                breakdown = total_loss(l_gcn, l_graph, config.lam,
                                       rewards=rho[train_mask])
            else:
                breakdown = total_loss(l_gcn, Tensor(0.0), config.lam)

            nm.backward(breakdown.total)
            optimizer.step()

            with nm.no_grad():
                val_a_hat, _ = _epoch_adjacency(mlp, tau, phenotypes, config, rng,
                                                fixed_a_hat)
                val_preds = gcn_forward(val_a_hat, dataset.X, model).values
            val_metric = _val_metric(val_preds, targets, val_mask, config.task)
        except nm.NonFiniteError as exc:
            raise TrainingError(f"training aborted at epoch {epoch}: {exc}",
                                epoch=epoch, breakdown=breakdown) from exc

        history.append({
            "epoch": epoch,
            "L_total": breakdown.total_value,
            "L_gcn": breakdown.l_gcn,
            "L_graph": breakdown.l_graph,
            "val_metric": val_metric,
        })

        if _improved(val_metric, best_val, config.task):
            best_val = val_metric
            best_epoch = epoch
            best_snapshot = [p.values.copy() for p in optimizer.params]
            stale = 0
        else:
            stale += 1
            if config.patience > 0 and stale > config.patience:
                break

    if config.patience > 0 and best_snapshot is not None:
        for p, saved in zip(optimizer.params, best_snapshot):
            p.values = saved
    else:
        best_epoch = history[-1]["epoch"]
        best_val = history[-1]["val_metric"]

    attention_vector = None
    if mlp is not None:
        with nm.no_grad():
            attention_vector = aggregate_attention(
                attention_forward(phenotypes, mlp)).values.copy()

    return TrainResult(
        model=model, attention=mlp, tau=tau,
        attention_vector=attention_vector, history=history,
        best_epoch=best_epoch, best_val=best_val, epsilon=epsilon,
        config=config, fixed_edges=fixed_edges)


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------


@dataclass
class InferenceResult:
    predictions: np.ndarray               # (N,) ages or class indices
    probabilities: np.ndarray | None = None  # (N, C) for classification


def _softmax_rows(values: np.ndarray) -> np.ndarray:
    shifted = values - values.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def infer(result: TrainResult, dataset: PopulationDataset, n_samples: int,
          rng: np.random.Generator) -> InferenceResult:
    """Average predictions over independently sampled graphs.

    Regression averages raw outputs; classification averages per-class
    probabilities and then takes the argmax.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    config = result.config
    phenotypes = dataset.phenotype_matrix()
    fixed_a_hat = None
    if result.fixed_edges is not None:
        fixed_a_hat = symmetrize(result.fixed_edges, dataset.n_subjects)

    acc = None
    with nm.no_grad():
        for _ in range(n_samples):
            a_hat, _ = _epoch_adjacency(result.attention, result.tau, phenotypes,
                                        config, rng, fixed_a_hat)
            out = gcn_forward(a_hat, dataset.X, result.model).values
            if config.task == "classification":
                out = _softmax_rows(out)
            acc = out if acc is None else acc + out
    mean = acc / n_samples
    if config.task == "classification":
        return InferenceResult(predictions=mean.argmax(axis=1), probabilities=mean)
    return InferenceResult(predictions=mean)


def sample_trained_edges(result: TrainResult, dataset: PopulationDataset,
                         rng: np.random.Generator):
    """One graph draw at the trained parameters (for homophily measurement
    and export)."""
    config = result.config
    if result.fixed_edges is not None:
        return result.fixed_edges
    phenotypes = dataset.phenotype_matrix()
    if config.distance_metric == "random":
        return random_graph(dataset.n_subjects, config.k, rng)
    with nm.no_grad():
        graph = _sample_epoch_graph(result.attention, result.tau, phenotypes,
                                    config, rng)
    return graph.edges


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def evaluate_regression(pred, y, mask) -> dict:
    """MAE and Pearson r over the masked nodes. r is None (undefined), not 0,
    when either side has zero variance or the mask holds a single node."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("evaluate_regression: empty mask")
    p = np.asarray(pred, dtype=float)[mask]
    t = np.asarray(y, dtype=float)[mask]
    mae = float(np.mean(np.abs(p - t)))
    r = None
    if p.size >= 2:
        sp = p - p.mean()
        st = t - t.mean()
        denom = np.sqrt(np.sum(sp * sp) * np.sum(st * st))
        if denom > 0.0:
            r = float(np.sum(sp * st) / denom)
    return {"mae": mae, "pearson_r": r}


def _auc_one_vs_rest(scores: np.ndarray, positive: np.ndarray) -> float:
    ranks = rankdata(scores)  # average ranks give ties half credit
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    pos_rank_sum = float(ranks[positive].sum())
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def evaluate_classification(probabilities, classes, mask) -> dict:
    """Accuracy, macro one-vs-rest AUC, and macro F1 over masked nodes.

    A class absent from the mask is skipped in the AUC average (with a
    warning) but still drags the F1 average down as a zero, so both follow
    their usual conventions.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("evaluate_classification: empty mask")
    probs = np.asarray(probabilities, dtype=float)[mask]
    truth = np.asarray(classes, dtype=np.intp)[mask]
    row_sums = probs.sum(axis=1)
    if np.any(np.abs(row_sums - 1.0) > 1e-6):
        raise ValueError("probability rows must sum to 1")
    n_classes = probs.shape[1]
    predicted = probs.argmax(axis=1)

    accuracy = float(np.mean(predicted == truth))

    aucs = []
    for c in range(n_classes):
        positive = truth == c
        if positive.all() or not positive.any():
            warnings.warn(f"class {c} absent from mask; skipped in macro-AUC",
                          stacklevel=2)
            continue
        aucs.append(_auc_one_vs_rest(probs[:, c], positive))
    macro_auc = float(np.mean(aucs)) if aucs else float("nan")

    f1_total = 0.0
    for c in range(n_classes):
        tp = float(np.sum((predicted == c) & (truth == c)))
        fp = float(np.sum((predicted == c) & (truth != c)))
        fn = float(np.sum((predicted != c) & (truth == c)))
        if 2 * tp + fp + fn > 0:
            f1_total += 2 * tp / (2 * tp + fp + fn)
    macro_f1 = f1_total / n_classes

    return {"accuracy": accuracy, "macro_auc": macro_auc, "macro_f1": macro_f1}


# ---------------------------------------------------------------------------
# records and exports
# ---------------------------------------------------------------------------


@dataclass
class MetricsRecord:
    """Everything one run reports. Wall-clock time is kept out of the JSON
    export so identical configs yield byte-identical files."""

    task: str
    seed: int
    config_hash: str
    mae: float | None = None
    pearson_r: float | None = None
    accuracy: float | None = None
    macro_auc: float | None = None
    macro_f1: float | None = None
    homophily: float | None = None
    best_epoch: int | None = None
    epsilon: float | None = None
    extra: dict = field(default_factory=dict)
    wall_clock_seconds: float | None = None

    def validate(self) -> None:
        if self.mae is not None and self.mae < 0:
            raise ValueError("MAE must be nonnegative")
        if self.pearson_r is not None and not -1.0 <= self.pearson_r <= 1.0 + 1e-12:
            raise ValueError("Pearson r out of range")
        for name in ("accuracy", "macro_auc", "macro_f1"):
            v = getattr(self, name)
            if v is not None and not (np.isnan(v) or 0.0 <= v <= 1.0):
                raise ValueError(f"{name} out of [0, 1]")

    def to_json_dict(self) -> dict:
        d = asdict(self)
        d.pop("wall_clock_seconds")
        return d


def run_experiment(dataset: PopulationDataset, config: TrainConfig,
                   fixed_edges: np.ndarray | None = None,
                   extra: dict | None = None):
    """Train, run averaged inference, and score the test split.

    This is the one evaluation path every experiment goes through, adaptive
    or static, so results stay comparable. Sub-streams for inference and the
    homophily sample are derived from the config seed, making the whole
    record a pure function of (dataset, config). Returns
    (TrainResult, MetricsRecord).
    """
    started = time.perf_counter()
    result = train(dataset, config, fixed_edges=fixed_edges)
    masks = dataset.require_masks()
    out = infer(result, dataset, config.inference_samples,
                np.random.default_rng(derive_run_seed(config.seed, INFERENCE_STREAM)))

    record = MetricsRecord(task=config.task, seed=config.seed,
                           config_hash=config_hash(config.to_dict()),
                           best_epoch=result.best_epoch, epsilon=result.epsilon,
                           extra=dict(extra or {}))
    if config.task == "regression":
        scores = evaluate_regression(out.predictions, dataset.y, masks.test)
        record.mae = scores["mae"]
        record.pearson_r = scores["pearson_r"]
        labels_for_homophily = dataset.y
    else:
        scores = evaluate_classification(out.probabilities,
                                         dataset.class_labels, masks.test)
        record.accuracy = scores["accuracy"]
        record.macro_auc = scores["macro_auc"]
        record.macro_f1 = scores["macro_f1"]
        labels_for_homophily = dataset.class_labels

    edges = sample_trained_edges(result, dataset,
                                 np.random.default_rng(derive_run_seed(config.seed, HOMOPHILY_STREAM)))
    record.homophily = homophily_score(edges, labels_for_homophily, mode=config.task)
    record.extra["n_epochs_run"] = len(result.history)
    record.wall_clock_seconds = time.perf_counter() - started
    record.validate()
    return result, record


def save_history_csv(history: list, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "L_total", "L_gcn", "L_graph", "val_metric"])
        for row in history:
            writer.writerow([row["epoch"], repr(row["L_total"]), repr(row["L_gcn"]),
                             repr(row["L_graph"]), repr(row["val_metric"])])


def save_metrics_json(record: MetricsRecord, path) -> None:
    record.validate()
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(record.to_json_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _pack(tensor: Tensor) -> dict:
    return {"shape": list(tensor.shape), "values": tensor.values.reshape(-1).tolist()}


def _unpack(entry: dict) -> Tensor:
    values = np.array(entry["values"], dtype=np.float64).reshape(entry["shape"])
    return Tensor(values, requires_grad=True)


def save_run(result: TrainResult, path) -> None:
    """Checkpoint a whole trained run: predictor, scorer, temperature, config,
    and the frozen edge list if there was one."""
    model = result.model
    payload = {
        "format_version": RUN_FORMAT_VERSION,
        "config": result.config.to_dict(),
        "config_hash": config_hash(result.config.to_dict()),
        "epsilon": result.epsilon,
        "best_epoch": result.best_epoch,
        "best_val": result.best_val,
        "gcn": {name: _pack(p)
                for name, p in zip(model.param_names(), model.params())},
        "attention": None if result.attention is None else {
            name: _pack(p)
            for name, p in zip(("w1", "b1", "w2", "b2"), result.attention.params())},
        "log_temperature": None if result.tau is None else float(result.tau.values),
        "fixed_edges": None if result.fixed_edges is None
        else result.fixed_edges.tolist(),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True)
        fh.write("\n")


def load_run(path) -> TrainResult:
    """Rebuild a TrainResult from a checkpoint. The training history is not
    stored (it lives in the history CSV); the loaded result carries an empty
    one. The aggregated attention vector is dataset-dependent, so it comes
    back None and callers recompute it when needed."""
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    version = payload.get("format_version")
    if version != RUN_FORMAT_VERSION:
        raise ValueError(f"run checkpoint {path}: unsupported format version "
                         f"{version!r}")
    config = TrainConfig(**payload["config"])
    g = payload["gcn"]
    model = GcnModel(w1=_unpack(g["w1"]), w2=_unpack(g["w2"]), b2=_unpack(g["b2"]),
                     w3=_unpack(g["w3"]), b3=_unpack(g["b3"]), task=config.task)
    attention = None
    if payload["attention"] is not None:
        a = payload["attention"]
        attention = AttentionMlp(w1=_unpack(a["w1"]), b1=_unpack(a["b1"]),
                                 w2=_unpack(a["w2"]), b2=_unpack(a["b2"]))
    tau = None
    if payload["log_temperature"] is not None:
        tau = Tensor(float(payload["log_temperature"]), requires_grad=True)
    fixed_edges = None
    if payload["fixed_edges"] is not None:
        fixed_edges = np.array(payload["fixed_edges"], dtype=np.intp)
    return TrainResult(
        model=model, attention=attention, tau=tau, attention_vector=None,
        history=[], best_epoch=payload["best_epoch"], best_val=payload["best_val"],
        epsilon=payload["epsilon"], config=config, fixed_edges=fixed_edges)
