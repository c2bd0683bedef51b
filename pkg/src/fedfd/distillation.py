"""Server-side ensemble distillation.

Feature distillation aligns the global extractor's features with the mean
features of each client architecture group.  The global features pass
through one projection per narrower group; the projection is the leading
``d`` rows of ``exp(W)`` for a skew-symmetric ``W``, so its rows stay
orthonormal whatever the free parameters are.  Logit distillation against the
mean client logits is kept as the baseline.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .errors import InvalidArgument
from .models import ArchitectureLevel, ScalableModel, tape_features, tape_logits

KL_DIRECTIONS = ("student_first", "teacher_first")


@dataclass(frozen=True)
class FeatureGroup:
    key: str
    feature_dim: int
    member_count: int
    features: np.ndarray  # (batch, feature_dim) mean teacher features


def group_features(client_features: list[tuple[ArchitectureLevel, np.ndarray]]) -> list[FeatureGroup]:
    """Average teacher features within each architecture level, widest first."""
    buckets: dict[ArchitectureLevel, list[np.ndarray]] = {}
    for level, feats in client_features:
        buckets.setdefault(level, []).append(np.asarray(feats, dtype=np.float64))
    groups = []
    for level, batches in buckets.items():
        shape = batches[0].shape
        if any(b.shape != shape for b in batches):
            raise InvalidArgument(f"level {level.label}: feature batches differ in shape")
        groups.append(FeatureGroup(str(shape[1]), shape[1], len(batches),
                                   np.mean(np.stack(batches), axis=0)))
    return sorted(groups, key=lambda g: -g.feature_dim)


@dataclass(frozen=True)
class ProjectionLayer:
    """Orthonormal-row map from ``source_dim`` to ``target_dim`` features."""

    source_dim: int
    target_dim: int
    free_params: np.ndarray
    order: int = nx.DEFAULT_TAYLOR_ORDER
    matrix: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not 1 <= self.target_dim <= self.source_dim:
            raise InvalidArgument(
                f"target dim {self.target_dim} must lie in [1, {self.source_dim}]")
        a = np.asarray(self.free_params, dtype=np.float64)
        if a.size != self.source_dim * (self.source_dim - 1) // 2:
            raise InvalidArgument("free parameter count does not match source dim")
        object.__setattr__(self, "free_params", a)
        rotation = nx.matrix_exp(nx.skew_from_params(a, self.source_dim), self.order)
        object.__setattr__(self, "matrix", rotation[:self.target_dim].copy())

    @classmethod
    def zeros(cls, source_dim: int, target_dim: int, order: int = nx.DEFAULT_TAYLOR_ORDER):
        return cls(source_dim, target_dim, np.zeros(source_dim * (source_dim - 1) // 2), order)

    def build(self, tape: nx.GradTape):
        a = tape.variable(self.free_params)
        rotation = nx.expm(nx.skew(a, self.source_dim), self.order)
        return nx.leading_rows(rotation, self.target_dim), a

    def stepped(self, grad: np.ndarray, lr: float) -> "ProjectionLayer":
        return ProjectionLayer(self.source_dim, self.target_dim,
                               self.free_params - lr * grad, self.order)

    def residual(self) -> float:
        return nx.orthogonality_residual(self.matrix)


@dataclass(frozen=True)
class DenseProjection:
    """Unconstrained ``target_dim x source_dim`` projection (orthogonality ablation).

    Starts from the same truncated identity as a zero-initialised
    :class:`ProjectionLayer`.
    """

    source_dim: int
    target_dim: int
    free_params: np.ndarray

    @classmethod
    def zeros(cls, source_dim: int, target_dim: int, order: int = 0):
        return cls(source_dim, target_dim, np.eye(source_dim)[:target_dim].copy())

    @property
    def matrix(self) -> np.ndarray:
        return self.free_params

    def build(self, tape: nx.GradTape):
        m = tape.variable(self.free_params)
        return m, m

    def stepped(self, grad: np.ndarray, lr: float) -> "DenseProjection":
        return DenseProjection(self.source_dim, self.target_dim, self.free_params - lr * grad)

    def residual(self) -> float:
        return nx.orthogonality_residual(self.matrix)


def project(layer, z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] != layer.source_dim:
        raise InvalidArgument(
            f"expected (batch, {layer.source_dim}) features, got shape {z.shape}")
    return z @ layer.matrix.T


def _check_direction(kl_direction: str) -> None:
    if kl_direction not in KL_DIRECTIONS:
        raise InvalidArgument(f"kl_direction must be one of {KL_DIRECTIONS}")


def projected_groups(model: ScalableModel, groups: list[FeatureGroup], projections: dict):
    """Groups that need a projection: every group narrower than the global features."""
    if not groups:
        raise InvalidArgument("no feature groups to distill from")
    out = [g for g in groups if g.feature_dim != model.feature_dim]
    missing = [g.key for g in out if g.key not in projections]
    if missing:
        raise InvalidArgument(f"missing projection for group(s) {missing}")
    return out


def _distill_objective(model, projections, groups, x, tau, kl_direction):
    """Build the alignment loss on a fresh tape.

    Returns ``(tape, loss, extractor vars, {group key: projection var})``.
    """
    _check_direction(kl_direction)
    targets = projected_groups(model, groups, projections)
    tape = nx.GradTape()
    names = model.extractor_names()
    pv = {k: tape.variable(model.params[k]) for k in names}
    if not targets:
        return tape, tape.constant(np.array(0.0)), pv, {}
    z = tape_features(model, pv, x)
    terms = []
    proj_vars = {}
    for g in targets:
        if g.features.shape[0] != x.shape[0]:
            raise InvalidArgument(f"group {g.key}: teacher batch size differs from inputs")
        m, handle = projections[g.key].build(tape)
        proj_vars[g.key] = handle
        student = nx.matmul(z, nx.transpose(m))
        teacher = tape.constant(g.features)
        if kl_direction == "student_first":
            terms.append(nx.kl_rows(student, teacher, tau))
        else:
            terms.append(nx.kl_rows(teacher, student, tau))
    loss = terms[0]
    for t in terms[1:]:
        loss = nx.add(loss, t)
    return tape, nx.scale(loss, 1.0 / len(terms)), pv, proj_vars


def distill_loss(model: ScalableModel, projections: dict, groups: list[FeatureGroup], x,
                 tau: float = 1.0, kl_direction: str = "student_first") -> float:
    """Mean over projected groups of the batch-mean KL between softmaxed features."""
    nx._check_tau(tau)
    x = np.asarray(x, dtype=np.float64)
    _, loss, _, _ = _distill_objective(model, projections, groups, x, tau, kl_direction)
    return float(loss.value)


def distill_step(model: ScalableModel, projections: dict, groups: list[FeatureGroup], x,
                 lr: float, tau: float = 1.0, kl_direction: str = "student_first"):
    """One SGD step on the alignment loss over extractor weights and projection parameters.

    The classifier head is not touched.  Returns ``(model, projections, loss)``
    where ``loss`` is the value before the step.
    """
    nx._check_tau(tau)
    x = np.asarray(x, dtype=np.float64)
    tape, loss, pv, proj_vars = _distill_objective(
        model, projections, groups, x, tau, kl_direction)
    if not proj_vars:
        return model, dict(projections), float(loss.value)
    wrt = list(pv.values()) + list(proj_vars.values())
    grads = tape.gradient(loss, wrt)
    params = dict(model.params)
    for name, g in zip(pv, grads):
        params[name] = params[name] - lr * g
    new_proj = dict(projections)
    for key, g in zip(proj_vars, grads[len(pv):]):
        new_proj[key] = projections[key].stepped(g, lr)
    return model.with_params(params), new_proj, float(loss.value)


def mean_logits(client_logits: list[tuple[ArchitectureLevel, np.ndarray]]) -> np.ndarray:
    if not client_logits:
        raise InvalidArgument("no client logits")
    batches = [np.asarray(l, dtype=np.float64) for _, l in client_logits]
    if any(b.shape != batches[0].shape for b in batches):
        raise InvalidArgument("client logit batches differ in shape")
    return np.mean(np.stack(batches), axis=0)


def logit_distill_loss(model: ScalableModel, teacher: np.ndarray, x, tau: float = 1.0) -> float:
    tape = nx.GradTape()
    pv = {k: tape.variable(v) for k, v in model.params.items()}
    return float(nx.kl_rows(tape.constant(teacher), tape_logits(model, pv, x), tau).value)


def logit_ensemble_distill_step(model: ScalableModel, client_logits, x, lr: float,
                                tau: float = 1.0):
    """One SGD step on KL(softmax(mean client logits) || softmax(global logits)).

    Updates every parameter, head included.  Returns ``(model, loss)``.
    """
    nx._check_tau(tau)
    x = np.asarray(x, dtype=np.float64)
    teacher = mean_logits(client_logits)
    if teacher.shape != (x.shape[0], model.classes):
        raise InvalidArgument(f"teacher logits shape {teacher.shape} does not match batch")
    tape = nx.GradTape()
    names = list(model.params)
    pv = {k: tape.variable(model.params[k]) for k in names}
    loss = nx.kl_rows(tape.constant(teacher), tape_logits(model, pv, x), tau)
    grads = tape.gradient(loss, [pv[k] for k in names])
    params = {k: model.params[k] - lr * g for k, g in zip(names, grads)}
    return model.with_params(params), float(loss.value)
