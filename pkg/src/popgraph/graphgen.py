"""Graph construction over weighted phenotypes.

Edge scores follow the exponential kernel log p_ij = -t * d(f_i, f_j)^2.
Sparse graphs are drawn with the Gumbel-Top-k trick: each row's log scores
get i.i.d. Gumbel(0,1) noise and the k largest perturbed entries win. The
retained per-edge scores stay noise-free, so gradients reach the feature
weighting and the temperature while the noise acts as a constant.

Static kNN and uniform-random graphs cover the non-adaptive baselines.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .numerics import Tensor

__all__ = [
    "METRICS",
    "SampledGraph",
    "pairwise_distance",
    "edge_probabilities",
    "topk_desc",
    "gumbel_topk_sample",
    "knn_static_graph",
    "random_graph",
    "symmetrize",
    "homophily_score",
    "export_graph",
    "GRAPH_FORMATS",
    "derive_run_seed",
]

METRICS = ("euclidean", "cosine", "hyperbolic")

_BALL_MARGIN = 1e-3


def pairwise_distance(features, metric: str) -> Tensor:
    """All-pairs distance matrix of the rows of ``features``.

    euclidean and cosine apply directly; hyperbolic first rescales all rows
    radially so the largest norm reaches 1 - 1e-3, then measures Poincare
    distance inside the unit ball. Differentiable w.r.t. the features.
    """
    f = features if isinstance(features, Tensor) else Tensor(features)
    if f.ndim != 2 or f.shape[0] < 2:
        raise nm.ShapeError(f"pairwise_distance: need at least 2 rows, got {f.shape}")
    if metric == "euclidean":
        return nm.sqrt(nm.pairwise_sqdist(f))
    if metric == "cosine":
        return nm.pairwise_cosine_distance(f)
    if metric == "hyperbolic":
        norms = nm.sqrt(nm.tsum(nm.square(f), axis=1))
        top = float(norms.values.max())
        if top == 0.0:
            return Tensor(np.zeros((f.shape[0], f.shape[0])))
        top_t = nm.reshape(nm.gather_rows(norms, np.array([int(norms.values.argmax())])), ())
        scaled = f * ((1.0 - _BALL_MARGIN) / top_t)
        return nm.pairwise_poincare_distance(scaled)
    raise ValueError(f"unknown distance metric {metric!r}; expected one of {METRICS}")


def edge_probabilities(distances, t) -> Tensor:
    """log p_ij = -t * d_ij^2. Callers keep t positive by passing t = exp(tau).

    The zero diagonal of the distance matrix makes log p_ii = 0 (p_ii = 1)
    until the sampler masks it out.
    """
    d = distances if isinstance(distances, Tensor) else Tensor(distances)
    t = t if isinstance(t, Tensor) else Tensor(float(t))
    if t.shape != ():
        raise nm.ShapeError(f"edge_probabilities: t must be scalar, got {t.shape}")
    return -(nm.square(d) * t)


def topk_desc(values: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest entries along the last axis, descending,
    ties broken toward the lower index."""
    order = np.argsort(-values, axis=-1, kind="stable")
    return order[..., :k]


@dataclass
class SampledGraph:
    """One draw of a sparse directed graph plus everything needed to train
    on it and to replay it."""

    edges: np.ndarray        # (N*k, 2) directed (src, dst)
    log_probs: Tensor        # (N*k,) noise-free log p per edge, on the tape
    n_nodes: int
    k: int
    noise: np.ndarray        # (N, N) frozen Gumbel noise that chose the edges
    a_hat: np.ndarray        # (N, N) symmetrized normalized adjacency

    def edge_set(self) -> set:
        return {(int(i), int(j)) for i, j in self.edges}


def gumbel_topk_sample(log_p, k: int, rng: np.random.Generator | None = None,
                       noise: np.ndarray | None = None) -> SampledGraph:
    """Draw k out-edges per node from the score matrix.

    Pass ``noise`` to replay a previous draw (or zeros to degenerate to
    deterministic top-k). The diagonal is masked, so self-edges never occur
    and every node ends with exactly k out-edges.
    """
    lp = log_p if isinstance(log_p, Tensor) else Tensor(log_p)
    n = lp.shape[0]
    if lp.ndim != 2 or lp.shape[1] != n:
        raise nm.ShapeError(f"gumbel_topk_sample: score matrix must be square, got {lp.shape}")
    if not 1 <= k < n:
        raise ValueError(f"k={k} out-edges per node impossible with {n} nodes")
    if noise is None:
        if rng is None:
            raise ValueError("provide an rng (or explicit noise) to sample")
        noise = rng.gumbel(0.0, 1.0, (n, n))
    else:
        noise = np.asarray(noise, dtype=np.float64)
        if noise.shape != (n, n):
            raise nm.ShapeError(f"noise shape {noise.shape} does not match ({n}, {n})")

    perturbed = lp.values + noise
    np.fill_diagonal(perturbed, -np.inf)
    targets = topk_desc(perturbed, k)                      # (N, k)
    sources = np.repeat(np.arange(n), k)
    edges = np.column_stack([sources, targets.reshape(-1)])

    flat_idx = edges[:, 0] * n + edges[:, 1]
    log_probs = nm.gather_rows(nm.reshape(lp, (n * n,)), flat_idx)

    return SampledGraph(
        edges=edges,
        log_probs=log_probs,
        n_nodes=n,
        k=k,
        noise=noise,
        a_hat=symmetrize(edges, n),
    )


def knn_static_graph(features, k: int, metric: str = "cosine") -> np.ndarray:
    """Deterministic k-nearest-neighbor edges (ascending distance, ties to
    the lower index). Returns an (N*k, 2) directed edge array."""
    f = features if isinstance(features, Tensor) else Tensor(features)
    n = f.shape[0]
    if not 1 <= k < n:
        raise ValueError(f"k={k} neighbors impossible with {n} nodes")
    with nm.no_grad():
        d = pairwise_distance(f, metric).values.copy()
    np.fill_diagonal(d, np.inf)
    targets = topk_desc(-d, k)
    sources = np.repeat(np.arange(n), k)
    return np.column_stack([sources, targets.reshape(-1)])


def random_graph(n: int, k: int, rng: np.random.Generator) -> np.ndarray:
    """k distinct uniform out-edges per node, never to itself."""
    if not 1 <= k < n:
        raise ValueError(f"k={k} out-edges per node impossible with {n} nodes")
    rows = []
    for i in range(n):
        picks = rng.choice(n - 1, size=k, replace=False)
        picks = picks + (picks >= i)
        for j in picks:
            rows.append((i, int(j)))
    return np.asarray(rows, dtype=np.intp)


def symmetrize(edges: np.ndarray, n: int) -> np.ndarray:
    """Union the edges with their reverses, add self-loops, and normalize:
    A_hat = D^(-1/2) (A + I) D^(-1/2)."""
    edges = np.asarray(edges, dtype=np.intp).reshape(-1, 2)
    if edges.size and np.any(edges[:, 0] == edges[:, 1]):
        raise ValueError("symmetrize: input contains self-edges")
    a = np.zeros((n, n))
    if edges.size:
        a[edges[:, 0], edges[:, 1]] = 1.0
        a[edges[:, 1], edges[:, 0]] = 1.0
    np.fill_diagonal(a, 1.0)
    inv_sqrt_deg = 1.0 / np.sqrt(a.sum(axis=1))
    return a * np.outer(inv_sqrt_deg, inv_sqrt_deg)


def _unique_undirected(edges: np.ndarray) -> np.ndarray:
    edges = np.asarray(edges, dtype=np.intp).reshape(-1, 2)
    lo = np.minimum(edges[:, 0], edges[:, 1])
    hi = np.maximum(edges[:, 0], edges[:, 1])
    return np.unique(np.column_stack([lo, hi]), axis=0)


def homophily_score(edges: np.ndarray, labels: np.ndarray, mode: str) -> float:
    """How alike are connected nodes?

    regression: mean |y_i - y_j| over unique undirected edges (lower is more
    homophilous). classification: fraction of edges joining same-class nodes
    (higher is more homophilous).
    """
    pairs = _unique_undirected(edges)
    if pairs.size == 0:
        raise ValueError("homophily_score: empty edge set")
    labels = np.asarray(labels)
    yi = labels[pairs[:, 0]]
    yj = labels[pairs[:, 1]]
    if mode == "regression":
        return float(np.mean(np.abs(yi - yj)))
    if mode == "classification":
        return float(np.mean(yi == yj))
    raise ValueError(f"unknown homophily mode {mode!r}")


GRAPH_FORMATS = ("dot", "json")


def _age_color(age: float, lo: float, hi: float) -> str:
    u = 0.0 if hi == lo else (age - lo) / (hi - lo)
    r = round(255 * u)
    b = round(255 * (1.0 - u))
    return f"#{r:02x}00{b:02x}"


def export_graph(graph, labels, path, fmt: str = "json") -> None:
    """Write a graph to disk.

    dot: one node statement per subject, filled with a blue-to-red ramp over
    the label range, plus one directed edge statement per edge.
    json: {nodes: [{id, age}], edges: [{src, dst, logp?}]}; the logp field is
    present exactly when the input is a sampled graph.
    """
    if isinstance(graph, SampledGraph):
        edges = graph.edges
        logp = np.asarray(graph.log_probs.values if isinstance(graph.log_probs, Tensor)
                          else graph.log_probs, dtype=float)
    else:
        edges = np.asarray(graph, dtype=np.intp).reshape(-1, 2)
        logp = None
    labels = np.asarray(labels, dtype=float)
    n = len(labels)

    if fmt == "dot":
        lo, hi = float(labels.min()), float(labels.max())
        lines = ["digraph population {"]
        for i in range(n):
            color = _age_color(labels[i], lo, hi)
            lines.append(f'  n{i} [label="{labels[i]:.1f}", style=filled, '
                         f'fillcolor="{color}"];')
        for (i, j) in edges:
            lines.append(f"  n{i} -> n{j};")
        lines.append("}")
        text = "\n".join(lines) + "\n"
    elif fmt == "json":
        payload = {
            "nodes": [{"id": int(i), "age": float(labels[i])} for i in range(n)],
            "edges": [
                {"src": int(i), "dst": int(j)}
                | ({} if logp is None else {"logp": float(logp[e])})
                for e, (i, j) in enumerate(edges)
            ],
        }
        text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    else:
        raise ValueError(f"unknown export format {fmt!r}; expected dot or json")

    try:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
    except OSError as exc:
        raise OSError(f"failed writing graph to {path}: {exc}") from exc


def derive_run_seed(master_seed: int, run_index: int) -> int:
    """Independent per-run seed stream: master seed XOR run index."""
    return int(master_seed) ^ int(run_index)
