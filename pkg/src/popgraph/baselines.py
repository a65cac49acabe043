"""Reference models to beat: ridge / multinomial-logistic fits on raw
features, and the GCN on a fixed cosine kNN graph (no graph learning).
"""

from __future__ import annotations

import dataclasses
import warnings
from dataclasses import dataclass

import numpy as np

from .graphgen import knn_static_graph
from .trainer import TrainConfig, run_experiment

__all__ = [
    "LinearModel",
    "linear_fit",
    "static_gcn_experiment",
    "FEATURE_SOURCES",
]

FEATURE_SOURCES = ("node_features", "phenotypes")


@dataclass
class LinearModel:
    weights: np.ndarray  # (M,) for regression, (M, C) for logistic
    bias: np.ndarray     # () or (C,)
    task: str = "regression"

    @property
    def n_features(self) -> int:
        return self.weights.shape[0]

    def _check(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim != 2 or x.shape[1] != self.n_features:
            raise ValueError(f"expected (n, {self.n_features}) features, got {x.shape}")
        return x

    def predict(self, x) -> np.ndarray:
        """Ages for regression, class indices for logistic."""
        x = self._check(x)
        if self.task == "regression":
            return x @ self.weights + self.bias
        return self.predict_proba(x).argmax(axis=1)

    def predict_proba(self, x) -> np.ndarray:
        if self.task != "logistic":
            raise ValueError("probabilities only exist for the logistic task")
        scores = self._check(x) @ self.weights + self.bias
        shifted = scores - scores.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=1, keepdims=True)


def _ridge_fit(x: np.ndarray, y: np.ndarray, ridge: float) -> LinearModel:
    # center so the intercept stays unpenalized; lam -> inf then collapses
    # predictions onto the train mean
    x_mean = x.mean(axis=0)
    y_mean = y.mean()
    xc = x - x_mean
    yc = y - y_mean
    gram = xc.T @ xc + ridge * np.eye(x.shape[1])
    try:
        w = np.linalg.solve(gram, xc.T @ yc)
    except np.linalg.LinAlgError as exc:
        raise ValueError("singular normal equations; use ridge > 0") from exc
    if ridge == 0.0:
        # solve() tolerates some numerically singular systems; catch those too
        residual = gram @ w - xc.T @ yc
        scale = max(float(np.linalg.norm(xc.T @ yc)), 1.0)
        if float(np.linalg.norm(residual)) > 1e-6 * scale:
            raise ValueError("singular normal equations; use ridge > 0")
    bias = np.asarray(y_mean - x_mean @ w)
    return LinearModel(weights=w, bias=bias, task="regression")


def _log_softmax(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _logistic_fit(x: np.ndarray, classes: np.ndarray, n_classes: int,
                  tol: float, max_iter: int) -> LinearModel:
    n, m = x.shape
    onehot = np.zeros((n, n_classes))
    onehot[np.arange(n), classes] = 1.0

    design = np.column_stack([x, np.ones(n)])
    # step size from the softmax Hessian bound 0.5 * sigma_max^2 / n
    sigma_max = np.linalg.svd(design, compute_uv=False)[0]
    lr = n / (0.5 * sigma_max ** 2)

    wb = np.zeros((m + 1, n_classes))
    for _ in range(max_iter):
        probs = np.exp(_log_softmax(design @ wb))
        grad = design.T @ (probs - onehot) / n
        if float(np.linalg.norm(grad)) <= tol:
            break
        wb -= lr * grad
    else:
        warnings.warn(f"logistic fit stopped at {max_iter} iterations above "
                      f"tolerance {tol}", stacklevel=2)
    return LinearModel(weights=wb[:-1], bias=wb[-1], task="logistic")


def linear_fit(x_train, y_train, ridge: float = 1e-3, task: str = "regression",
               n_classes: int | None = None, tol: float = 1e-6,
               max_iter: int = 200_000) -> LinearModel:
    """Closed-form ridge regression, or multinomial logistic regression by
    plain gradient descent run to a small-gradient stopping rule.

    The intercept is never penalized. ``ridge`` only applies to regression.
    """
    x = np.asarray(x_train, dtype=float)
    y = np.asarray(y_train)
    if x.ndim != 2:
        raise ValueError(f"expected 2-d features, got shape {x.shape}")
    if x.shape[0] < 2:
        raise ValueError("need at least 2 training rows")
    if x.shape[0] != len(y):
        raise ValueError("features and labels disagree on row count")
    if ridge < 0:
        raise ValueError("ridge must be nonnegative")
    if task == "regression":
        return _ridge_fit(x, y.astype(float), ridge)
    if task == "logistic":
        classes = y.astype(np.intp)
        if n_classes is None:
            n_classes = int(classes.max()) + 1
        if classes.min() < 0 or classes.max() >= n_classes:
            raise ValueError("class labels out of range")
        return _logistic_fit(x, classes, n_classes, tol, max_iter)
    raise ValueError(f"unknown task {task!r}")


def static_gcn_experiment(dataset, feature_source: str, config: TrainConfig,
                          k: int = 5, metric: str = "cosine"):
    """GCN on a kNN graph built once from raw features or phenotypes.

    Same training loop and evaluation as the adaptive pipeline, with the
    sampler replaced by the fixed graph and the edge loss switched off.
    Returns (TrainResult, MetricsRecord).
    """
    if feature_source == "node_features":
        source = dataset.X
    elif feature_source == "phenotypes":
        source = dataset.phenotype_matrix()
    else:
        raise ValueError(f"unknown feature_source {feature_source!r}; "
                         f"expected one of {FEATURE_SOURCES}")
    edges = knn_static_graph(source, k, metric=metric)
    static_config = dataclasses.replace(config, lam=0.0)
    return run_experiment(dataset, static_config, fixed_edges=edges,
                          extra={"experiment": "static",
                                 "feature_source": feature_source,
                                 "graph_metric": metric, "graph_k": k})
