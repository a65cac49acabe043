"""Dense float64 tensors with a reverse-mode gradient tape.

Covers exactly what the pipeline needs: affine layers, graph convolutions,
pairwise-distance kernels, and scalar losses. Broadcasting is limited to
scalar-vs-tensor so shape mistakes fail loudly. Every primitive checks its
output for NaN/Inf and raises instead of propagating garbage.

The tape is thread-local: one training run owns one tape. Independent runs
may execute on separate threads without sharing state.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "NumericsError",
    "ShapeError",
    "NonFiniteError",
    "no_grad",
    "backward",
    "reset_tape",
    "tape_size",
    "concat",
    "gather_rows",
    "masked_select",
    "add_rowvec",
    "mul_rowvec",
    "log_softmax_rows",
    "take_per_row",
    "pairwise_sqdist",
    "pairwise_cosine_distance",
    "pairwise_poincare_distance",
    "grad_check",
    "GradCheckReport",
]


class NumericsError(Exception):
    """Base error for tensor-engine contract violations."""


class ShapeError(NumericsError):
    """Operand shapes do not conform for a primitive."""


class NonFiniteError(NumericsError):
    """A computation produced NaN or Inf."""


_TLS = threading.local()


def _ops() -> list:
    ops = getattr(_TLS, "ops", None)
    if ops is None:
        ops = _TLS.ops = []
    return ops


def _grad_enabled() -> bool:
    return getattr(_TLS, "grad_enabled", True)


def _tape_epoch() -> int:
    return getattr(_TLS, "epoch", 0)


class no_grad:
    """Context manager that disables tape recording (inference passes)."""

    def __enter__(self):
        self._prev = _grad_enabled()
        _TLS.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _TLS.grad_enabled = self._prev
        return False


def reset_tape() -> None:
    """Drop all recorded operations without running backward."""
    _ops().clear()
    _TLS.epoch = _tape_epoch() + 1


def tape_size() -> int:
    return len(_ops())


class Tensor:
    """A dense float64 array plus an optional accumulated gradient."""

    __slots__ = ("values", "requires_grad", "grad", "_from_op", "_epoch")

    def __init__(self, values, requires_grad: bool = False):
        v = np.asarray(values, dtype=np.float64)
        if not np.all(np.isfinite(v)):
            raise NonFiniteError("tensor initialized with non-finite values")
        self.values = v
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(v) if requires_grad else None
        self._from_op = False
        self._epoch = _tape_epoch()

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        return float(self.values)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.values)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operators
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def log(self):
        return log(self)

    def exp(self):
        return exp(self)

    def square(self):
        return square(self)

    def sqrt(self):
        return sqrt(self)

    def abs(self):
        return absolute(self)

    def mean(self, axis=None):
        return mean(self, axis=axis)

    def sum(self, axis=None):
        return tsum(self, axis=axis)

    def reshape(self, shape):
        return reshape(self, shape)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _apply(name: str, out_values: np.ndarray, parents: Sequence[Tensor],
           backward_fn: Callable) -> Tensor:
    """Record one primitive on the tape and return its output tensor.

    ``backward_fn(g)`` must return one gradient array (or None) per parent,
    each shaped like that parent's values.
    """
    out_values = np.asarray(out_values, dtype=np.float64)
    if not np.all(np.isfinite(out_values)):
        raise NonFiniteError(f"{name}: result contains non-finite values")
    out = Tensor.__new__(Tensor)
    out.values = out_values
    track = _grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = track
    out.grad = np.zeros_like(out_values) if track else None
    out._from_op = track
    out._epoch = _tape_epoch()
    if track:
        _ops().append((out, tuple(parents), backward_fn))
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(tensor) into every requires-grad tensor.

    Walks the thread-local tape in exact reverse order of the forward pass,
    then consumes it. Contributions add, so a tensor used twice receives the
    sum of both paths.
    """
    if loss.shape != ():
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise NumericsError("loss does not depend on any requires-grad tensor")
    ops = _ops()
    if loss._from_op and (loss._epoch != _tape_epoch() or not ops):
        raise NumericsError("tape already consumed; run a new forward pass before backward")
    loss.grad = np.ones(())
    for out, parents, backward_fn in reversed(ops):
        g = out.grad
        if g is None or not g.any():
            continue
        contributions = backward_fn(g)
        for parent, contribution in zip(parents, contributions):
            if contribution is None or not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = np.zeros_like(parent.values)
            parent.grad += contribution
    ops.clear()
    _TLS.epoch = _tape_epoch() + 1


# ---------------------------------------------------------------------------
# elementwise / arithmetic primitives
# ---------------------------------------------------------------------------


def _binary_shapes(name: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape and a.shape != () and b.shape != ():
        raise ShapeError(f"{name}: shapes {a.shape} and {b.shape} do not conform "
                         "(equal shapes or scalar broadcast only)")


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    # reduce a full-shape gradient back to a scalar operand
    if shape == () and g.shape != ():
        return np.sum(g)
    return g


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes("add", a, b)
    return _apply("add", a.values + b.values, (a, b),
                  lambda g: (_reduce_to(g, a.shape), _reduce_to(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes("sub", a, b)
    return _apply("sub", a.values - b.values, (a, b),
                  lambda g: (_reduce_to(g, a.shape), _reduce_to(-g, b.shape)))


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _apply("neg", -a.values, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes("mul", a, b)
    av, bv = a.values, b.values
    return _apply("mul", av * bv, (a, b),
                  lambda g: (_reduce_to(g * bv, a.shape), _reduce_to(g * av, b.shape)))


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes("div", a, b)
    av, bv = a.values, b.values
    with np.errstate(divide="ignore", invalid="ignore"):
        out = av / bv
    return _apply("div", out, (a, b),
                  lambda g: (_reduce_to(g / bv, a.shape),
                             _reduce_to(-g * av / (bv * bv), b.shape)))


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim == 2 and b.ndim == 2:
        if a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
        av, bv = a.values, b.values
        return _apply("matmul", av @ bv, (a, b),
                      lambda g: (g @ bv.T, av.T @ g))
    if a.ndim == 2 and b.ndim == 1:
        if a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
        av, bv = a.values, b.values
        return _apply("matmul", av @ bv, (a, b),
                      lambda g: (g[:, None] * bv[None, :], av.T @ g))
    raise ShapeError(f"matmul: unsupported ranks {a.shape} @ {b.shape}")


def add_rowvec(matrix, vec) -> Tensor:
    """matrix (n, m) + vec (m,) broadcast over rows (bias add)."""
    matrix, vec = _as_tensor(matrix), _as_tensor(vec)
    if matrix.ndim != 2 or vec.ndim != 1 or matrix.shape[1] != vec.shape[0]:
        raise ShapeError(f"add_rowvec: shapes {matrix.shape} and {vec.shape} do not conform")
    return _apply("add_rowvec", matrix.values + vec.values[None, :], (matrix, vec),
                  lambda g: (g, g.sum(axis=0)))


def mul_rowvec(matrix, vec) -> Tensor:
    """matrix (n, m) * vec (m,) broadcast over rows (per-column scaling)."""
    matrix, vec = _as_tensor(matrix), _as_tensor(vec)
    if matrix.ndim != 2 or vec.ndim != 1 or matrix.shape[1] != vec.shape[0]:
        raise ShapeError(f"mul_rowvec: shapes {matrix.shape} and {vec.shape} do not conform")
    mv, vv = matrix.values, vec.values
    return _apply("mul_rowvec", mv * vv[None, :], (matrix, vec),
                  lambda g: (g * vv[None, :], (g * mv).sum(axis=0)))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    av = a.values
    return _apply("relu", np.maximum(av, 0.0), (a,), lambda g: (g * (av > 0),))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(over="ignore"):
        s = 1.0 / (1.0 + np.exp(-a.values))
    return _apply("sigmoid", s, (a,), lambda g: (g * s * (1.0 - s),))


def log(a) -> Tensor:
    a = _as_tensor(a)
    av = a.values
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(av)
    return _apply("log", out, (a,), lambda g: (g / av,))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.values)
    return _apply("exp", out, (a,), lambda g: (g * out,))


def square(a) -> Tensor:
    a = _as_tensor(a)
    av = a.values
    return _apply("square", av * av, (a,), lambda g: (2.0 * av * g,))


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.values)
    # subgradient 0 at exactly zero; avoids Inf on zeroed diagonals
    return _apply("sqrt", out, (a,),
                  lambda g: (np.where(out > 0, g / (2.0 * np.where(out > 0, out, 1.0)), 0.0),))


def absolute(a) -> Tensor:
    a = _as_tensor(a)
    av = a.values
    return _apply("abs", np.abs(av), (a,), lambda g: (g * np.sign(av),))


# ---------------------------------------------------------------------------
# shape / indexing primitives
# ---------------------------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    old = a.shape
    out = np.reshape(a.values, shape)
    return _apply("reshape", out, (a,), lambda g: (g.reshape(old),))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    parts = [_as_tensor(t) for t in tensors]
    if not parts:
        raise ShapeError("concat: no operands")
    nd = parts[0].ndim
    for p in parts[1:]:
        if p.ndim != nd:
            raise ShapeError(f"concat: rank mismatch {parts[0].shape} vs {p.shape}")
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        return tuple(np.take(g, np.arange(offsets[i], offsets[i + 1]), axis=axis)
                     for i in range(len(parts)))

    return _apply("concat", np.concatenate([p.values for p in parts], axis=axis),
                  tuple(parts), bwd)


def gather_rows(a, indices) -> Tensor:
    """Select rows (2-D) or elements (1-D) by integer index, with repeats."""
    a = _as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeError(f"gather_rows: indices must be 1-D, got shape {idx.shape}")
    if a.ndim not in (1, 2):
        raise ShapeError(f"gather_rows: operand must be 1-D or 2-D, got {a.shape}")
    shape = a.shape

    def bwd(g):
        z = np.zeros(shape)
        np.add.at(z, idx, g)
        return (z,)

    return _apply("gather_rows", a.values[idx], (a,), bwd)


def masked_select(a, mask) -> Tensor:
    """Keep rows (2-D) or elements (1-D) where mask is True."""
    a = _as_tensor(a)
    m = np.asarray(mask, dtype=bool)
    if a.ndim not in (1, 2) or m.shape != (a.shape[0],):
        raise ShapeError(f"masked_select: mask shape {m.shape} does not match operand {a.shape}")
    shape = a.shape

    def bwd(g):
        z = np.zeros(shape)
        z[m] = g
        return (z,)

    return _apply("masked_select", a.values[m], (a,), bwd)


def take_per_row(matrix, cols) -> Tensor:
    """out[i] = matrix[i, cols[i]] (per-row element pick)."""
    matrix = _as_tensor(matrix)
    c = np.asarray(cols, dtype=np.intp)
    if matrix.ndim != 2 or c.shape != (matrix.shape[0],):
        raise ShapeError(f"take_per_row: shapes {matrix.shape} and {c.shape} do not conform")
    n = matrix.shape[0]
    shape = matrix.shape

    def bwd(g):
        z = np.zeros(shape)
        np.add.at(z, (np.arange(n), c), g)
        return (z,)

    return _apply("take_per_row", matrix.values[np.arange(n), c], (matrix,), bwd)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def tsum(a, axis=None) -> Tensor:
    a = _as_tensor(a)
    shape = a.shape

    if axis is None:
        return _apply("sum", np.sum(a.values), (a,),
                      lambda g: (np.broadcast_to(g, shape).copy(),))

    def bwd(g):
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _apply("sum", np.sum(a.values, axis=axis), (a,), bwd)


def mean(a, axis=None) -> Tensor:
    a = _as_tensor(a)
    shape = a.shape

    if axis is None:
        n = a.size
        return _apply("mean", np.mean(a.values), (a,),
                      lambda g: (np.broadcast_to(g / n, shape).copy(),))

    n = shape[axis]

    def bwd(g):
        return (np.broadcast_to(np.expand_dims(g / n, axis), shape).copy(),)

    return _apply("mean", np.mean(a.values, axis=axis), (a,), bwd)


def log_softmax_rows(logits) -> Tensor:
    """Row-wise log-softmax of an (n, c) matrix."""
    logits = _as_tensor(logits)
    if logits.ndim != 2:
        raise ShapeError(f"log_softmax_rows: operand must be 2-D, got {logits.shape}")
    v = logits.values
    shifted = v - v.max(axis=1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))

    def bwd(g):
        softmax = np.exp(out)
        return (g - softmax * g.sum(axis=1, keepdims=True),)

    return _apply("log_softmax_rows", out, (logits,), bwd)


# ---------------------------------------------------------------------------
# pairwise-distance kernels (fused: the N x N x d intermediate never exists)
# ---------------------------------------------------------------------------


def pairwise_sqdist(f) -> Tensor:
    """All-pairs squared euclidean distances of the rows of f; zero diagonal."""
    f = _as_tensor(f)
    if f.ndim != 2:
        raise ShapeError(f"pairwise_sqdist: operand must be 2-D, got {f.shape}")
    v = f.values
    r = np.sum(v * v, axis=1)
    s = np.maximum(r[:, None] + r[None, :] - 2.0 * (v @ v.T), 0.0)
    np.fill_diagonal(s, 0.0)

    def bwd(g):
        g = g.copy()
        np.fill_diagonal(g, 0.0)
        row = g.sum(axis=1) + g.sum(axis=0)
        return (2.0 * row[:, None] * v - 2.0 * ((g + g.T) @ v),)

    return _apply("pairwise_sqdist", s, (f,), bwd)


def pairwise_cosine_distance(f) -> Tensor:
    """All-pairs cosine distances 1 - cos(u, v); zero rows give distance 1.

    The diagonal is forced to zero. Gradients of zero rows are zero (the
    distance is locally constant there by convention).
    """
    f = _as_tensor(f)
    if f.ndim != 2:
        raise ShapeError(f"pairwise_cosine_distance: operand must be 2-D, got {f.shape}")
    v = f.values
    norms = np.sqrt(np.sum(v * v, axis=1))
    nonzero = norms > 0.0
    safe = np.where(nonzero, norms, 1.0)
    u = v / safe[:, None]
    d = 1.0 - u @ u.T
    np.fill_diagonal(d, 0.0)

    def bwd(g):
        gs = -g.copy()
        np.fill_diagonal(gs, 0.0)
        gu = (gs + gs.T) @ u
        gf = (gu - u * np.sum(gu * u, axis=1)[:, None]) / safe[:, None]
        gf[~nonzero] = 0.0
        return (gf,)

    return _apply("pairwise_cosine_distance", d, (f,), bwd)


def pairwise_poincare_distance(f) -> Tensor:
    """All-pairs Poincare-ball distances of rows already inside the unit ball.

    d(u, v) = arcosh(1 + 2|u-v|^2 / ((1-|u|^2)(1-|v|^2))). Rows must have
    norm strictly below 1; callers rescale first. Coincident pairs get a
    zero subgradient (arcosh is not differentiable at 1).
    """
    f = _as_tensor(f)
    if f.ndim != 2:
        raise ShapeError(f"pairwise_poincare_distance: operand must be 2-D, got {f.shape}")
    v = f.values
    r = np.sum(v * v, axis=1)
    if np.any(r >= 1.0):
        raise NumericsError("pairwise_poincare_distance: rows must lie strictly inside "
                            "the unit ball; rescale inputs first")
    a = np.maximum(r[:, None] + r[None, :] - 2.0 * (v @ v.T), 0.0)
    b_vec = 1.0 - r
    b = np.outer(b_vec, b_vec)
    z = 1.0 + 2.0 * a / b
    d = np.arccosh(np.maximum(z, 1.0))
    np.fill_diagonal(d, 0.0)

    def bwd(g):
        g = g.copy()
        np.fill_diagonal(g, 0.0)
        zsq = np.maximum(z * z - 1.0, 0.0)
        w = np.where(zsq > 1e-24, g / np.sqrt(np.where(zsq > 0, zsq, 1.0)), 0.0)
        ga = w * (2.0 / b)
        gb = w * (-2.0 * a / (b * b))
        row = ga.sum(axis=1) + ga.sum(axis=0)
        gv = 2.0 * row[:, None] * v - 2.0 * ((ga + ga.T) @ v)
        db = (gb + gb.T) @ b_vec
        gv += 2.0 * (-db)[:, None] * v
        return (gv,)

    return _apply("pairwise_poincare_distance", d, (f,), bwd)


# ---------------------------------------------------------------------------
# finite-difference gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    """Comparison of analytic gradients against central finite differences."""

    max_rel_error: float
    worst_param: int
    worst_element: int
    per_param: list = field(default_factory=list)
    tolerance: float = 1e-4
    passed: bool = False
    suspected_nondifferentiable: bool = False

    def summary(self) -> str:
        status = "OK" if self.passed else "FAIL"
        note = " (non-differentiable point suspected)" if self.suspected_nondifferentiable else ""
        return (f"grad_check {status}: max rel error {self.max_rel_error:.3e} "
                f"at param {self.worst_param}[{self.worst_element}] "
                f"(tolerance {self.tolerance:.1e}){note}")


def grad_check(build_loss: Callable[[], Tensor], params: Sequence[Tensor],
               h: float = 1e-5, tolerance: float = 1e-4) -> GradCheckReport:
    """Compare analytic gradients of ``build_loss()`` with finite differences.

    ``build_loss`` must rebuild the loss from scratch on each call and be
    deterministic given the current parameter values (freeze any sampling
    before checking). Relative error uses a floor tied to the largest
    gradient magnitude so that dead units with ~0 gradient are judged
    against finite-difference noise, not against zero.
    """
    reset_tape()
    for p in params:
        p.zero_grad()
    loss = build_loss()
    backward(loss)
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.values)
                for p in params]

    numeric = []
    with no_grad():
        for p in params:
            flat = p.values.reshape(-1)
            fd = np.zeros_like(flat)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                hi = build_loss().item()
                flat[i] = orig - h
                lo = build_loss().item()
                flat[i] = orig
                fd[i] = (hi - lo) / (2.0 * h)
            numeric.append(fd.reshape(p.values.shape))

    scale = max(max((np.max(np.abs(a)) for a in analytic), default=0.0),
                max((np.max(np.abs(n)) for n in numeric), default=0.0))
    floor = max(1e-6 * scale, 1e-8)

    max_rel = 0.0
    worst_param = worst_element = 0
    per_param = []
    for k, (a, n) in enumerate(zip(analytic, numeric)):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        rel = np.abs(a - n) / denom
        pmax = float(rel.max()) if rel.size else 0.0
        per_param.append(pmax)
        if pmax > max_rel:
            max_rel = pmax
            worst_param = k
            worst_element = int(rel.argmax())

    return GradCheckReport(
        max_rel_error=max_rel,
        worst_param=worst_param,
        worst_element=worst_element,
        per_param=per_param,
        tolerance=tolerance,
        passed=max_rel <= tolerance,
        suspected_nondifferentiable=max_rel > 0.5,
    )
