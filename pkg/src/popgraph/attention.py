"""Global phenotype attention: a small MLP scores every phenotype per
subject, scores are averaged over the population and min-max rescaled into a
single weight vector, and that vector gates the phenotype matrix columnwise.

The weight vector is global: one value per phenotype column, shared by all
subjects. Aggregation stays inside the gradient tape, so the scorer trains
end to end through the edge distribution.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .numerics import Tensor

__all__ = [
    "AttentionMlp",
    "AttentionVector",
    "attention_forward",
    "aggregate_attention",
    "weight_phenotypes",
    "as_attention_vector",
    "rank_phenotypes",
    "save_ranking_csv",
    "save_ranking_json",
]


@dataclass
class AttentionMlp:
    """One-hidden-layer scorer: n_phenotypes -> hidden (ReLU) -> n_phenotypes
    (sigmoid). Hidden width defaults to twice the input width."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @classmethod
    def init(cls, n_phenotypes: int, rng: np.random.Generator,
             hidden: int | None = None) -> "AttentionMlp":
        if hidden is None:
            hidden = 2 * n_phenotypes
        lim1 = 1.0 / np.sqrt(n_phenotypes)
        lim2 = 1.0 / np.sqrt(hidden)
        w1 = rng.uniform(-lim1, lim1, (n_phenotypes, hidden))
        w2 = rng.uniform(-lim2, lim2, (hidden, n_phenotypes))
        return cls(
            w1=Tensor(w1, requires_grad=True),
            b1=Tensor(np.zeros(hidden), requires_grad=True),
            w2=Tensor(w2, requires_grad=True),
            b2=Tensor(np.zeros(n_phenotypes), requires_grad=True),
        )

    @property
    def n_phenotypes(self) -> int:
        return self.w1.shape[0]

    def params(self) -> list:
        return [self.w1, self.b1, self.w2, self.b2]


def attention_forward(phenotypes, mlp: AttentionMlp) -> Tensor:
    """Per-subject sigmoid scores, shape (N, n_phenotypes)."""
    phenotypes = phenotypes if isinstance(phenotypes, Tensor) else Tensor(phenotypes)
    if phenotypes.ndim != 2 or phenotypes.shape[1] != mlp.n_phenotypes:
        raise nm.ShapeError(
            f"attention_forward: phenotype matrix {phenotypes.shape} does not match "
            f"scorer input width {mlp.n_phenotypes}")
    h = nm.relu(nm.add_rowvec(phenotypes @ mlp.w1, mlp.b1))
    return nm.sigmoid(nm.add_rowvec(h @ mlp.w2, mlp.b2))


def aggregate_attention(scores: Tensor) -> Tensor:
    """Column means of the score matrix, min-max rescaled to [0, 1].

    If every column mean is identical the vector degenerates to all 0.5
    (constant, no gradient). Otherwise the rescale is differentiated exactly,
    holding the argmin/argmax positions of the current iterate fixed.
    """
    scores = scores if isinstance(scores, Tensor) else Tensor(scores)
    if scores.ndim != 2:
        raise nm.ShapeError(f"aggregate_attention: expected 2-D scores, got {scores.shape}")
    means = nm.mean(scores, axis=0)
    vals = means.values
    if vals.max() == vals.min():
        return Tensor(np.full(scores.shape[1], 0.5))
    lo = nm.reshape(nm.gather_rows(means, np.array([int(vals.argmin())])), ())
    hi = nm.reshape(nm.gather_rows(means, np.array([int(vals.argmax())])), ())
    return (means - lo) / (hi - lo)


def weight_phenotypes(a, phenotypes) -> Tensor:
    """Row i of the result is a ⊙ phenotypes[i] (columnwise gating)."""
    a = a if isinstance(a, Tensor) else Tensor(a)
    phenotypes = phenotypes if isinstance(phenotypes, Tensor) else Tensor(phenotypes)
    return nm.mul_rowvec(phenotypes, a)


@dataclass
class AttentionVector:
    """A trained weight vector plus the column metadata needed to read it."""

    weights: np.ndarray
    names: list
    kinds: list

    def __post_init__(self):
        if not (len(self.weights) == len(self.names) == len(self.kinds)):
            raise ValueError("attention vector and metadata lengths differ")


def as_attention_vector(a, names, kinds) -> AttentionVector:
    values = a.values if isinstance(a, Tensor) else np.asarray(a, dtype=float)
    return AttentionVector(weights=values.copy(), names=list(names), kinds=list(kinds))


def rank_phenotypes(vector: AttentionVector) -> list:
    """Rows {rank, name, kind, weight} in descending weight order; ties keep
    the original column order."""
    order = np.argsort(-vector.weights, kind="stable")
    return [
        {"rank": r + 1, "name": vector.names[j], "kind": vector.kinds[j],
         "weight": float(vector.weights[j])}
        for r, j in enumerate(order)
    ]


def save_ranking_csv(vector: AttentionVector, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["rank", "name", "kind", "weight"])
        for row in rank_phenotypes(vector):
            writer.writerow([row["rank"], row["name"], row["kind"], repr(row["weight"])])


def save_ranking_json(vector: AttentionVector, path) -> None:
    payload = {
        "weights": {name: float(w) for name, w in zip(vector.names, vector.weights)},
        "ranking": rank_phenotypes(vector),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
