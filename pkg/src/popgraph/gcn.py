"""Node-level predictor and the two-part training objective.

The predictor is one spectral graph convolution (no bias) feeding a fully
connected ReLU layer and a linear task head. The objective couples the
supervised loss on training nodes with a graph term that scores every sampled
edge by its source node's reward: edges leaving nodes the predictor got
wrong are pushed toward lower probability, edges leaving well-predicted
nodes toward higher. Rewards enter as constants, so the graph term trains
only the edge distribution (feature weighting and temperature), never the
predictor weights.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .graphgen import SampledGraph
from .numerics import Tensor

__all__ = [
    "GcnModel",
    "LossBreakdown",
    "gcn_forward",
    "huber_loss",
    "cross_entropy_loss",
    "null_epsilon",
    "reward",
    "graph_loss",
    "total_loss",
    "save_checkpoint",
    "load_checkpoint",
]

CHECKPOINT_VERSION = 1


@dataclass
class GcnModel:
    """Conv weights (no bias), one hidden FC layer, and a linear head."""

    w1: Tensor  # (M, hidden1)
    w2: Tensor  # (hidden1, hidden2)
    b2: Tensor  # (hidden2,)
    w3: Tensor  # (hidden2, n_out)
    b3: Tensor  # (n_out,)
    task: str = "regression"

    @classmethod
    def init(cls, n_features: int, rng: np.random.Generator,
             hidden1: int = 512, hidden2: int = 128, n_out: int = 1,
             task: str = "regression", head_bias: float = 0.0) -> "GcnModel":
        if task not in ("regression", "classification"):
            raise ValueError(f"unknown task {task!r}")
        w1 = rng.uniform(-1.0, 1.0, (n_features, hidden1)) / np.sqrt(n_features)
        w2 = rng.uniform(-1.0, 1.0, (hidden1, hidden2)) / np.sqrt(hidden1)
        w3 = rng.uniform(-1.0, 1.0, (hidden2, n_out)) / np.sqrt(hidden2)
        return cls(
            w1=Tensor(w1, requires_grad=True),
            w2=Tensor(w2, requires_grad=True),
            b2=Tensor(np.zeros(hidden2), requires_grad=True),
            w3=Tensor(w3, requires_grad=True),
            b3=Tensor(np.full(n_out, head_bias, dtype=np.float64), requires_grad=True),
            task=task,
        )

    @property
    def n_features(self) -> int:
        return self.w1.shape[0]

    @property
    def n_out(self) -> int:
        return self.w3.shape[1]

    def params(self) -> list:
        return [self.w1, self.w2, self.b2, self.w3, self.b3]

    def param_names(self) -> list:
        return ["w1", "w2", "b2", "w3", "b3"]


def gcn_forward(a_hat, x, model: GcnModel) -> Tensor:
    """ReLU(Â X W1) -> ReLU(· W2 + b2) -> · W3 + b3.

    Â and X are plain arrays (neither is trained); the product Â X is folded
    before touching the tape. Regression output is squeezed to shape (N,).
    """
    a_hat = a_hat.values if isinstance(a_hat, Tensor) else np.asarray(a_hat, dtype=float)
    x = x.values if isinstance(x, Tensor) else np.asarray(x, dtype=float)
    n = x.shape[0]
    if a_hat.shape != (n, n):
        raise nm.ShapeError(f"gcn_forward: adjacency {a_hat.shape} does not match "
                            f"{n} node rows")
    if x.shape[1] != model.n_features:
        raise nm.ShapeError(f"gcn_forward: features {x.shape} do not match model "
                            f"input width {model.n_features}")
    propagated = Tensor(a_hat @ x)
    h1 = nm.relu(propagated @ model.w1)
    h2 = nm.relu(nm.add_rowvec(h1 @ model.w2, model.b2))
    out = nm.add_rowvec(h2 @ model.w3, model.b3)
    if model.task == "regression":
        return nm.reshape(out, (n,))
    return out


def huber_loss(pred: Tensor, y, mask, delta: float = 1.0) -> Tensor:
    """Mean Huber loss over masked nodes: quadratic inside |e| <= delta,
    linear outside. The branch indicator is fixed from the current values;
    both branches meet with equal value and slope at the boundary."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("huber_loss: empty mask")
    y = np.asarray(y, dtype=float)
    err = nm.masked_select(pred, mask) - Tensor(y[mask])
    small = np.abs(err.values) <= delta
    quad = nm.square(err) * 0.5
    lin = (nm.absolute(err) - 0.5 * delta) * delta
    return (quad * small.astype(float) + lin * (~small).astype(float)).mean()


def cross_entropy_loss(logits: Tensor, classes, mask) -> Tensor:
    """Mean negative log-probability of the true class over masked nodes."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("cross_entropy_loss: empty mask")
    classes = np.asarray(classes, dtype=np.intp)
    log_probs = nm.log_softmax_rows(nm.masked_select(logits, mask))
    picked = nm.take_per_row(log_probs, classes[mask])
    return -picked.mean()


def null_epsilon(train_labels, task: str = "regression", n_classes: int = 4) -> float:
    """Reward threshold of the label-blind null model.

    Regression: the mean absolute error of always predicting the training
    mean. Classification: the chance error rate 1 - 1/n_classes. A
    prediction exactly as wrong as the null model earns reward 0.
    """
    train_labels = np.asarray(train_labels)
    if train_labels.size == 0:
        raise ValueError("null_epsilon: no training labels")
    if task == "regression":
        return float(np.mean(np.abs(train_labels - train_labels.mean())))
    if task == "classification":
        return 1.0 - 1.0 / n_classes
    raise ValueError(f"unknown task {task!r}")


def reward(y, pred, epsilon: float, task: str = "regression") -> np.ndarray:
    """Per-node reward ρ: positive where the predictor does worse than the
    null model, negative where it does better. Plain arrays in and out; no
    gradient flows through predictions here by design."""
    y = np.asarray(y)
    pred = np.asarray(pred)
    if task == "regression":
        return np.abs(y - pred) - epsilon
    if task == "classification":
        return (y != pred).astype(np.float64) - epsilon
    raise ValueError(f"unknown task {task!r}")


def graph_loss(graph: SampledGraph, rewards, train_mask) -> Tensor:
    """Sum of ρ_source * log p over sampled edges whose source node is in the
    training split. A summed (not averaged) objective: its gradient w.r.t.
    each retained log p_ij is exactly ρ_i."""
    rewards = np.asarray(rewards, dtype=float)
    train_mask = np.asarray(train_mask, dtype=bool)
    src = graph.edges[:, 0]
    keep = train_mask[src]
    coeff = Tensor(rewards[src] * keep)
    return (graph.log_probs * coeff).sum()


@dataclass
class LossBreakdown:
    """One optimization step's objective, split into its parts."""

    total: Tensor
    l_gcn: float
    l_graph: float
    lam: float = 1.0
    reward_mean: float | None = None
    reward_min: float | None = None
    reward_max: float | None = None

    @property
    def total_value(self) -> float:
        return float(self.total.values)


def total_loss(l_gcn, l_graph, lam: float = 1.0, rewards=None) -> LossBreakdown:
    """Combine the supervised and graph terms: total = L_GCN + lam * L_graph.

    lam defaults to 1 (plain sum); 0 trains the predictor alone, leaving the
    edge-distribution parameters without gradient.
    """
    gv = float(l_gcn.values) if isinstance(l_gcn, Tensor) else float(l_gcn)
    rv = float(l_graph.values) if isinstance(l_graph, Tensor) else float(l_graph)
    if not (np.isfinite(gv) and np.isfinite(rv)):
        raise ValueError(f"non-finite loss component: L_GCN={gv}, L_graph={rv}")
    l_gcn = l_gcn if isinstance(l_gcn, Tensor) else Tensor(gv)
    l_graph = l_graph if isinstance(l_graph, Tensor) else Tensor(rv)
    total = l_gcn + l_graph if lam == 1.0 else l_gcn + l_graph * lam
    stats = {}
    if rewards is not None:
        rewards = np.asarray(rewards, dtype=float)
        stats = {"reward_mean": float(rewards.mean()),
                 "reward_min": float(rewards.min()),
                 "reward_max": float(rewards.max())}
    return LossBreakdown(total=total, l_gcn=gv, l_graph=rv, lam=lam, **stats)


def save_checkpoint(model: GcnModel, path, config_hash: str = "") -> None:
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "task": model.task,
        "config_hash": config_hash,
        "params": {
            name: {"shape": list(p.shape), "values": p.values.reshape(-1).tolist()}
            for name, p in zip(model.param_names(), model.params())
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path) -> tuple:
    """Returns (model, config_hash). Rejects unknown format versions."""
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"checkpoint {path}: unsupported format version {version!r}")
    tensors = {}
    for name, entry in payload["params"].items():
        values = np.asarray(entry["values"], dtype=np.float64).reshape(entry["shape"])
        tensors[name] = Tensor(values, requires_grad=True)
    model = GcnModel(w1=tensors["w1"], w2=tensors["w2"], b2=tensors["b2"],
                     w3=tensors["w3"], b3=tensors["b3"], task=payload["task"])
    return model, payload.get("config_hash", "")
