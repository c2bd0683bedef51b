"""Width-nested MLP classifiers.

A model is a feature extractor (ReLU MLP) followed by a linear classifier
head.  Every weight is stored as an ``(in, out)`` array so a forward layer is
``x @ w + b``.  Narrower architecture levels keep the leading units of each
hidden layer, which makes a level-q model a coordinate-wise sub-block of any
wider model.
"""

from __future__ import annotations

import json
import math
import string
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .errors import FormatError, InvalidArgument

ParameterSet = dict  # name -> float64 ndarray, insertion-ordered

LEVEL_LABELS = string.ascii_lowercase[:10]
DEFAULT_DECAY = 0.10


@dataclass(frozen=True, order=True)
class ArchitectureLevel:
    width_fraction: float
    label: str = field(compare=False)

    def __post_init__(self):
        if not 0 < self.width_fraction <= 1:
            raise InvalidArgument(f"width fraction {self.width_fraction} outside (0, 1]")

    def width(self, full: int) -> int:
        """Units kept from a layer of ``full`` units (never fewer than one)."""
        # round() guards against 0.7 * 10 = 7.000000000000001 style ceil errors
        return max(1, math.ceil(round(self.width_fraction * full, 9)))


def make_levels(decay: float = DEFAULT_DECAY) -> dict[str, ArchitectureLevel]:
    """Levels a..j, level a at full width, each next one ``decay`` narrower."""
    levels = {}
    for i, label in enumerate(LEVEL_LABELS):
        frac = round(1.0 - i * decay, 10)
        if frac <= 0:
            break
        levels[label] = ArchitectureLevel(frac, label)
    return levels


def parse_levels(text: str, decay: float = DEFAULT_DECAY) -> list[ArchitectureLevel]:
    """Parse ``"a-d-g"`` into architecture levels."""
    table = make_levels(decay)
    labels = [s for s in text.split("-") if s]
    if not labels:
        raise InvalidArgument("level list is empty")
    unknown = [s for s in labels if s not in table]
    if unknown:
        raise InvalidArgument(f"unknown architecture level(s): {', '.join(unknown)}")
    return [table[s] for s in labels]


FULL = ArchitectureLevel(1.0, "a")


@dataclass
class ScalableModel:
    """MLP feature extractor plus linear head.

    ``widths`` are the hidden widths of the level-a model; the arrays in
    ``params`` are sized for ``level``.
    """

    input_dim: int
    widths: tuple[int, ...]
    classes: int
    params: ParameterSet
    level: ArchitectureLevel = FULL

    @property
    def depth(self) -> int:
        return len(self.widths)

    @property
    def feature_dim(self) -> int:
        return self.level.width(self.widths[-1])

    def hidden_widths(self, level: ArchitectureLevel | None = None) -> list[int]:
        level = level or self.level
        return [level.width(n) for n in self.widths]

    def extractor_names(self) -> list[str]:
        return [f"{kind}{i}" for i in range(self.depth) for kind in ("w", "b")]

    def copy(self) -> "ScalableModel":
        return ScalableModel(self.input_dim, self.widths, self.classes,
                             {k: v.copy() for k, v in self.params.items()}, self.level)

    def with_params(self, params: ParameterSet) -> "ScalableModel":
        return ScalableModel(self.input_dim, self.widths, self.classes, params, self.level)


def param_shapes(input_dim: int, widths, classes: int, level: ArchitectureLevel = FULL) -> dict:
    hidden = [level.width(n) for n in widths]
    shapes = {}
    fan_in = input_dim
    for i, n in enumerate(hidden):
        shapes[f"w{i}"] = (fan_in, n)
        shapes[f"b{i}"] = (n,)
        fan_in = n
    shapes["head_w"] = (fan_in, classes)
    shapes["head_b"] = (classes,)
    return shapes


def build_global(input_dim: int, widths, classes: int, seed: int) -> ScalableModel:
    """Level-a model with Glorot-uniform weights and zero biases."""
    widths = tuple(int(n) for n in widths)
    if not widths:
        raise InvalidArgument("at least one hidden layer is required")
    if min(widths) < 1 or input_dim < 1:
        raise InvalidArgument(f"all widths must be positive, got {widths}")
    if classes < 2:
        raise InvalidArgument("need at least two classes")
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(input_dim, widths, classes).items():
        if len(shape) == 1:
            params[name] = np.zeros(shape)
        else:
            limit = math.sqrt(6.0 / (shape[0] + shape[1]))
            params[name] = rng.uniform(-limit, limit, size=shape)
    return ScalableModel(input_dim, widths, classes, params, FULL)


def slice_params(params: ParameterSet, shapes: dict) -> ParameterSet:
    """Leading sub-blocks of ``params`` with the given shapes (copied)."""
    out = {}
    for name, shape in shapes.items():
        src = params[name]
        if any(s > t for s, t in zip(shape, src.shape)):
            raise InvalidArgument(f"{name}: cannot slice {src.shape} to {shape}")
        out[name] = src[tuple(slice(0, s) for s in shape)].copy()
    return out


def slice_model(model: ScalableModel, level: ArchitectureLevel) -> ScalableModel:
    """The nested sub-model at ``level``.

    Widths are always measured against the level-a widths, so slicing an
    already-sliced model gives the same result as slicing the original.
    """
    if not isinstance(level, ArchitectureLevel):
        raise InvalidArgument(f"unknown level {level!r}")
    if level.width_fraction > model.level.width_fraction:
        raise InvalidArgument(
            f"cannot widen a level-{model.level.label} model to level {level.label}")
    shapes = param_shapes(model.input_dim, model.widths, model.classes, level)
    return ScalableModel(model.input_dim, model.widths, model.classes,
                         slice_params(model.params, shapes), level)


def _check_input(model: ScalableModel, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise InvalidArgument(
            f"expected a (batch, {model.input_dim}) input, got shape {x.shape}")
    return x


def forward_features(model: ScalableModel, x) -> np.ndarray:
    h = _check_input(model, x)
    p = model.params
    for i in range(model.depth):
        h = np.maximum(h @ p[f"w{i}"] + p[f"b{i}"], 0.0)
    return h


def forward_logits(model: ScalableModel, x) -> np.ndarray:
    return forward_features(model, x) @ model.params["head_w"] + model.params["head_b"]


def tape_features(model: ScalableModel, pv: dict, x: np.ndarray) -> nx.Var:
    """Extractor forward on a tape; ``pv`` maps parameter names to tape nodes."""
    tape = next(iter(pv.values())).tape
    h = tape.constant(x)
    for i in range(model.depth):
        h = nx.relu(nx.add(nx.matmul(h, pv[f"w{i}"]), pv[f"b{i}"]))
    return h


def tape_logits(model: ScalableModel, pv: dict, x: np.ndarray) -> nx.Var:
    return nx.add(nx.matmul(tape_features(model, pv, x), pv["head_w"]), pv["head_b"])


def sgd_update(params: ParameterSet, grads: dict, lr: float, weight_decay: float = 0.0) -> ParameterSet:
    out = dict(params)
    for name, g in grads.items():
        p = params[name]
        out[name] = p - lr * (g + weight_decay * p)
    return out


def local_train(model: ScalableModel, inputs, labels, epochs: int, lr: float,
                weight_decay: float, batch_size: int, seed) -> tuple[ScalableModel, list[float]]:
    """Seeded mini-batch SGD on mean cross-entropy with L2 weight decay.

    Returns the trained copy and the mean training loss of each epoch.
    """
    inputs = _check_input(model, inputs)
    labels = np.asarray(labels)
    n = len(labels)
    if n == 0:
        raise InvalidArgument("local shard is empty")
    if batch_size < 1:
        raise InvalidArgument("batch size must be positive")
    rng = np.random.default_rng(seed)
    params = {k: v.copy() for k, v in model.params.items()}
    trace = []
    for _ in range(epochs):
        order = rng.permutation(n)
        total, count = 0.0, 0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            tape = nx.GradTape()
            pv = {k: tape.variable(v) for k, v in params.items()}
            loss = nx.cross_entropy_rows(
                tape_logits(model, pv, inputs[idx]), labels[idx])
            names = list(pv)
            grads = dict(zip(names, tape.gradient(loss, [pv[k] for k in names])))
            params = sgd_update(params, grads, lr, weight_decay)
            total += float(loss.value) * len(idx)
            count += len(idx)
        trace.append(total / count)
    return model.with_params(params), trace


def predict(model: ScalableModel, x) -> np.ndarray:
    return np.argmax(forward_logits(model, x), axis=1)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_SCHEMA = 1


def checkpoint_document(model: ScalableModel, levels=(), projections=None) -> dict:
    doc = {
        "schema": CHECKPOINT_SCHEMA,
        "levels": [lv.label for lv in levels],
        "meta": {"input_dim": model.input_dim, "widths": list(model.widths),
                 "classes": model.classes, "level": model.level.label,
                 "width_fraction": model.level.width_fraction},
        "arrays": {name: {"shape": list(arr.shape), "data": arr.ravel().tolist()}
                   for name, arr in model.params.items()},
    }
    if projections is not None:
        doc["projections"] = {str(key): {"free_params": proj.free_params.tolist()}
                              for key, proj in projections.items()}
    return doc


def save_checkpoint(path, model: ScalableModel, levels=(), projections=None) -> None:
    Path(path).write_text(json.dumps(checkpoint_document(model, levels, projections)))


def load_checkpoint(path) -> tuple[ScalableModel, list[str], dict]:
    """Read a checkpoint; returns ``(model, level labels, {key: free_params})``."""
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError("document", str(exc)) from exc
    if doc.get("schema") != CHECKPOINT_SCHEMA:
        raise FormatError("schema", f"unsupported schema {doc.get('schema')!r}")
    arrays = {}
    for name, entry in doc["arrays"].items():
        data = np.asarray(entry["data"], dtype=np.float64)
        shape = tuple(entry["shape"])
        if data.size != math.prod(shape):
            raise FormatError(f"arrays.{name}", "data length does not match shape")
        arrays[name] = data.reshape(shape)
    meta = doc["meta"]
    level = ArchitectureLevel(meta["width_fraction"], meta["level"])
    model = ScalableModel(meta["input_dim"], tuple(meta["widths"]), meta["classes"], arrays, level)
    projections = {key: np.asarray(v["free_params"], dtype=np.float64)
                   for key, v in doc.get("projections", {}).items()}
    return model, list(doc.get("levels", [])), projections
