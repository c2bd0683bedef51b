"""Dense float64 arithmetic, classification losses and a reverse-mode gradient tape.

Every trainable quantity in the simulator is differentiated through
:class:`GradTape`.  The tape records primitive steps in creation order, which
is already a topological order, so the backward sweep is a single reversed
walk.  Plain-array helpers (:func:`softmax_t`, :func:`kl_div`,
:func:`matrix_exp`, ...) are the value-only surface used by evaluation code
and tests.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from .errors import InvalidArgument, NumericError

DEFAULT_TAYLOR_ORDER = 12
SCALED_NORM_BOUND = 0.5


def _as_matrix(x, name: str = "input") -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise InvalidArgument(f"{name} contains non-finite entries")
    return arr


def _check_tau(tau: float) -> None:
    if not tau > 0:
        raise InvalidArgument(f"temperature must be positive, got {tau}")


# ---------------------------------------------------------------------------
# value-only surface
# ---------------------------------------------------------------------------

def softmax_t(v, tau: float = 1.0) -> np.ndarray:
    """Temperature softmax along the last axis, with max-subtraction."""
    _check_tau(tau)
    z = _as_matrix(v, "v") / tau
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax_t(v, tau: float = 1.0) -> np.ndarray:
    _check_tau(tau)
    z = _as_matrix(v, "v") / tau
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def kl_div(p, q) -> float:
    """KL(p || q) for two probability vectors; ``0 * log 0`` counts as 0."""
    p = _as_matrix(p, "p").ravel()
    q = _as_matrix(q, "q").ravel()
    if p.shape != q.shape:
        raise InvalidArgument(f"length mismatch: {p.size} vs {q.size}")
    for name, dist in (("p", p), ("q", q)):
        if abs(dist.sum() - 1.0) > 1e-6 or np.any(dist < 0):
            raise InvalidArgument(f"{name} is not a probability vector")
    if np.any(q <= 0):
        raise InvalidArgument("q must be strictly positive")
    mask = p > 0
    return float(np.sum(p[mask] * (np.log(p[mask]) - np.log(q[mask]))))


def cross_entropy(logits, label: int) -> float:
    logits = _as_matrix(logits, "logits").ravel()
    if not 0 <= label < logits.size:
        raise InvalidArgument(f"label {label} out of range for {logits.size} classes")
    return float(-log_softmax_t(logits, 1.0)[label])


def skew_from_params(a, dim: int) -> np.ndarray:
    """Skew-symmetric ``dim x dim`` matrix whose strict upper triangle is ``a`` (row-major)."""
    a = _as_matrix(a, "a").ravel()
    if a.size != dim * (dim - 1) // 2:
        raise InvalidArgument(
            f"expected {dim * (dim - 1) // 2} free parameters for dim {dim}, got {a.size}")
    rows, cols = np.triu_indices(dim, k=1)
    w = np.zeros((dim, dim))
    w[rows, cols] = a
    w[cols, rows] = -a
    return w


def squarings_for(w: np.ndarray) -> int:
    """Smallest s >= 0 with ||w / 2**s||_1 <= 0.5."""
    norm = float(np.abs(w).sum(axis=0).max()) if w.size else 0.0
    if norm <= SCALED_NORM_BOUND:
        return 0
    return max(0, math.ceil(math.log2(norm / SCALED_NORM_BOUND)))


def matrix_exp(w, order: int = DEFAULT_TAYLOR_ORDER, squarings: int | None = None) -> np.ndarray:
    """exp(w) by a Taylor polynomial of degree ``order`` plus scaling and squaring."""
    tape = GradTape()
    return expm(tape.constant(w), order, squarings).value


# ---------------------------------------------------------------------------
# gradient tape
# ---------------------------------------------------------------------------

class Var:
    """A node on a :class:`GradTape`."""

    __slots__ = ("value", "tape", "parents", "backward", "trainable")

    def __init__(self, value, tape, parents=(), backward=None, trainable=False):
        self.value = value
        self.tape = tape
        self.parents = parents
        self.backward = backward
        self.trainable = trainable

    @property
    def shape(self):
        return self.value.shape

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __repr__(self):
        return f"Var(shape={self.value.shape})"


class GradTape:
    """Ordered record of primitive forward steps.

    Gradients are evaluated with :meth:`gradient` for any scalar node with
    respect to any leaf created by :meth:`variable`.
    """

    def __init__(self):
        self.nodes: list[Var] = []

    def _record(self, value, parents, backward) -> Var:
        # a finite sum implies finite entries; the full scan only runs on overflow
        if not math.isfinite(value.sum()) and not np.isfinite(value).all():
            raise NumericError("non-finite value produced on the gradient tape")
        node = Var(value, self, parents, backward)
        self.nodes.append(node)
        return node

    def variable(self, value) -> Var:
        node = Var(np.array(value, dtype=np.float64), self, trainable=True)
        self.nodes.append(node)
        return node

    def constant(self, value) -> Var:
        return Var(_as_matrix(value), self)

    def gradient(self, loss: Var, wrt: Sequence[Var]) -> list[np.ndarray]:
        if loss.value.size != 1:
            raise InvalidArgument("gradient requires a scalar loss")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
        for node in reversed(self.nodes):
            g = grads.get(id(node))
            if g is None or node.backward is None:
                continue
            for parent, pg in zip(node.parents, node.backward(g)):
                if pg is None:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg
        return [grads.get(id(v), np.zeros_like(v.value)) for v in wrt]


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _lift(x, tape: GradTape) -> Var:
    return x if isinstance(x, Var) else tape.constant(x)


def matmul(a: Var, b: Var) -> Var:
    tape = a.tape if isinstance(a, Var) else b.tape
    a, b = _lift(a, tape), _lift(b, tape)
    return tape._record(a.value @ b.value, (a, b),
                        lambda g: (g @ b.value.T, a.value.T @ g))


def add(a: Var, b: Var) -> Var:
    tape = a.tape if isinstance(a, Var) else b.tape
    a, b = _lift(a, tape), _lift(b, tape)
    return tape._record(a.value + b.value, (a, b),
                        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def scale(a: Var, c: float) -> Var:
    return a.tape._record(a.value * c, (a,), lambda g: (g * c,))


def transpose(a: Var) -> Var:
    return a.tape._record(a.value.T.copy(), (a,), lambda g: (g.T,))


def relu(a: Var) -> Var:
    mask = a.value > 0
    return a.tape._record(a.value * mask, (a,), lambda g: (g * mask,))


def leading_rows(a: Var, n: int) -> Var:
    """First ``n`` rows of a matrix."""
    full = a.shape

    def back(g):
        out = np.zeros(full)
        out[:n] = g
        return (out,)

    return a.tape._record(a.value[:n].copy(), (a,), back)


def unflatten(p: Var, shapes: dict) -> dict:
    """Split a flat parameter node into named, reshaped blocks (still on the tape)."""
    out, at = {}, 0
    for name, shape in shapes.items():
        size = math.prod(shape)
        out[name] = _block(p, at, size, shape)
        at += size
    if at != p.value.size:
        raise InvalidArgument(f"shapes cover {at} entries, parameter vector has {p.value.size}")
    return out


def _block(p: Var, start: int, size: int, shape) -> Var:
    def back(g):
        out = np.zeros(p.shape)
        out[start:start + size] = g.ravel()
        return (out,)

    return p.tape._record(p.value[start:start + size].reshape(shape).copy(), (p,), back)


def skew(a: Var, dim: int) -> Var:
    rows, cols = np.triu_indices(dim, k=1)

    def back(g):
        return (g[rows, cols] - g[cols, rows],)

    return a.tape._record(skew_from_params(a.value, dim), (a,), back)


def softmax(a: Var, tau: float = 1.0) -> Var:
    y = softmax_t(a.value, tau)
    return a.tape._record(
        y, (a,), lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)) / tau,))


def log(a: Var) -> Var:
    if np.any(a.value <= 0):
        raise NumericError("log of a non-positive value")
    return a.tape._record(np.log(a.value), (a,), lambda g: (g / a.value,))


def total(a: Var) -> Var:
    return a.tape._record(np.array(a.value.sum()), (a,),
                          lambda g: (np.full(a.shape, float(g)),))


def mean(a: Var) -> Var:
    n = a.value.size
    return a.tape._record(np.array(a.value.mean()), (a,),
                          lambda g: (np.full(a.shape, float(g) / n),))


def kl_rows(p_logits: Var, q_logits: Var, tau: float = 1.0) -> Var:
    """Mean over rows of KL(softmax(p/tau) || softmax(q/tau))."""
    tape = p_logits.tape if isinstance(p_logits, Var) else q_logits.tape
    p_logits, q_logits = _lift(p_logits, tape), _lift(q_logits, tape)
    if p_logits.shape != q_logits.shape:
        raise InvalidArgument(f"shape mismatch {p_logits.shape} vs {q_logits.shape}")
    log_p = log_softmax_t(p_logits.value, tau)
    log_q = log_softmax_t(q_logits.value, tau)
    p = np.exp(log_p)
    q = np.exp(log_q)
    gap = log_p - log_q
    per_row = (p * gap).sum(axis=-1, keepdims=True)
    n = p.shape[0] if p.ndim > 1 else 1

    def back(g):
        g = float(g) / n
        return (g * p * (gap - per_row) / tau, g * (q - p) / tau)

    return tape._record(np.array(per_row.sum() / n), (p_logits, q_logits), back)


def cross_entropy_rows(logits: Var, labels) -> Var:
    """Mean cross-entropy of integer ``labels`` under row-wise softmax of ``logits``."""
    labels = np.asarray(labels)
    n = logits.shape[0]
    if labels.shape != (n,):
        raise InvalidArgument("one label per row required")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise InvalidArgument("label out of range")
    log_p = log_softmax_t(logits.value, 1.0)
    rows = np.arange(n)

    def back(g):
        grad = np.exp(log_p)
        grad[rows, labels] -= 1.0
        return (grad * (float(g) / n),)

    return logits.tape._record(np.array(-log_p[rows, labels].mean()), (logits,), back)


def expm(w: Var, order: int = DEFAULT_TAYLOR_ORDER, squarings: int | None = None) -> Var:
    """Differentiable truncated-Taylor exponential with scaling and squaring.

    Composed only of ``scale``, ``matmul`` and ``add`` so the gradient flows
    through every Taylor term and every squaring.
    """
    if w.value.ndim != 2 or w.shape[0] != w.shape[1]:
        raise InvalidArgument(f"matrix_exp needs a square matrix, got shape {w.shape}")
    if order < 0:
        raise InvalidArgument("Taylor order must be non-negative")
    s = squarings_for(w.value) if squarings is None else squarings
    a = scale(w, 0.5 ** s)
    result = w.tape.constant(np.eye(w.shape[0]))
    power = None
    for j in range(1, order + 1):
        power = a if power is None else scale(matmul(power, a), 1.0 / j)
        result = add(result, power)
    for _ in range(s):
        result = matmul(result, result)
    return result


def orthogonality_residual(m) -> float:
    """Frobenius norm of ``m m^T - I`` (rows orthonormal iff zero)."""
    m = np.asarray(m, dtype=np.float64)
    return float(np.linalg.norm(m @ m.T - np.eye(m.shape[0])))


def grad_check(loss: Callable[[GradTape, Var], Var], params, eps: float = 1e-5) -> float:
    """Max relative gap between tape gradient and central differences.

    ``loss(tape, p)`` must build a scalar node from the trainable leaf ``p``.
    The relative gap per coordinate is ``|analytic - numeric| / max(1, |analytic|)``.
    """
    params = np.array(params, dtype=np.float64)
    tape = GradTape()
    p = tape.variable(params)
    out = loss(tape, p)
    if not np.isfinite(out.value).all():
        raise NumericError("loss is not finite at the base point")
    (analytic,) = tape.gradient(out, [p])

    def probe(x):
        t = GradTape()
        val = float(loss(t, t.variable(x)).value)
        if not math.isfinite(val):
            raise NumericError("loss is not finite at a probe point")
        return val

    worst = 0.0
    flat = params.ravel()
    for i in range(flat.size):
        up = flat.copy()
        down = flat.copy()
        up[i] += eps
        down[i] -= eps
        numeric = (probe(up.reshape(params.shape)) - probe(down.reshape(params.shape))) / (2 * eps)
        a = analytic.ravel()[i]
        worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst
