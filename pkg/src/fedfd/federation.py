"""The communication-round loop: sample, broadcast, train, aggregate, distill, evaluate."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, replace

import numpy as np

from . import distillation as kd
from .aggregation import ClientUpdate, broadcast, hetero_aggregate
from .config import ExperimentConfig
from .data import LabeledDataset, dirichlet_partition, gen_synthetic, load_idx
from .errors import InvalidArgument
from .models import (ArchitectureLevel, ScalableModel, build_global, forward_features,
                     forward_logits, local_train, parse_levels, predict)

# stream tags for derived seeds
_TEST_DATA, _HOLDOUT, _PARTITION, _MODEL, _SAMPLE, _LOCAL, _DISTILL = range(7)


@dataclass(frozen=True)
class ClientState:
    client_id: int
    level: ArchitectureLevel
    shard: np.ndarray  # indices into the training set


@dataclass(frozen=True)
class RoundMetrics:
    round: int
    global_acc: float
    local_acc_mean: float
    distill_loss: float
    ortho_residual: float
    seconds: float


@dataclass(frozen=True)
class FederationState:
    config: ExperimentConfig
    model: ScalableModel
    projections: dict
    clients: tuple[ClientState, ...]
    train: LabeledDataset
    distill_inputs: np.ndarray
    test: LabeledDataset
    round: int = 0


def load_datasets(config: ExperimentConfig) -> tuple[LabeledDataset, LabeledDataset]:
    ds = config.dataset
    if ds.kind == "idx":
        train = load_idx(ds.train_images, ds.train_labels)
        test = load_idx(ds.test_images, ds.test_labels)
        classes = max(train.classes, test.classes)
        return (LabeledDataset(train.inputs, train.labels, classes),
                LabeledDataset(test.inputs, test.labels, classes))
    train = gen_synthetic(ds.classes, ds.train_per_class, ds.input_dim, ds.spread,
                          ds.seed, ds.separation)
    test = gen_synthetic(ds.classes, ds.test_per_class, ds.input_dim, ds.spread,
                         [ds.seed, _TEST_DATA], ds.separation)
    return train, test


def setup(config: ExperimentConfig) -> FederationState:
    """Datasets, held-out distillation inputs, client shards and the initial global model."""
    config.validate()
    full_train, test = load_datasets(config)
    seed = config.seed

    order = np.random.default_rng([seed, _HOLDOUT]).permutation(len(full_train))
    n_distill = max(1, int(round(config.distill_fraction * len(full_train))))
    distill_inputs = full_train.inputs[np.sort(order[:n_distill])]
    train = full_train.subset(np.sort(order[n_distill:]))

    shards = dirichlet_partition(train, config.clients, config.alpha, [seed, _PARTITION])
    levels = parse_levels(config.levels, config.level_decay)
    clients = tuple(ClientState(k, levels[k % len(levels)], shards[k])
                    for k in range(config.clients))
    model = build_global(train.input_dim, config.widths, train.classes, [seed, _MODEL])
    return FederationState(config, model, {}, clients, train, distill_inputs, test)


def sample_clients(num_clients: int, ratio: float, round_index: int, seed) -> list[int]:
    """Uniform sample without replacement of max(1, round(ratio * K)) client ids."""
    if not 0 < ratio <= 1:
        raise InvalidArgument(f"participation ratio must lie in (0, 1], got {ratio}")
    if num_clients < 1:
        raise InvalidArgument("need at least one client")
    count = max(1, math.floor(ratio * num_clients + 0.5))
    rng = np.random.default_rng([int(seed), _SAMPLE, round_index])
    return sorted(rng.choice(num_clients, size=count, replace=False).tolist())


def evaluate(model: ScalableModel, test: LabeledDataset) -> float:
    if len(test) == 0:
        raise InvalidArgument("test set is empty")
    return float(np.mean(predict(model, test.inputs) == test.labels))


def evaluate_local_mean(models: list[ScalableModel], test: LabeledDataset) -> float:
    if not models:
        raise InvalidArgument("no client models to evaluate")
    return float(np.mean([evaluate(m, test) for m in models]))


def _batches(n: int, batch_size: int, rng) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _feature_groups(method: str, trained: list[tuple[ClientState, ScalableModel]], x):
    """Teacher feature groups: one per level, or one per client for the grouping ablations."""
    if method in ("ablation:no_group", "ablation:neither"):
        groups = []
        for client, model in trained:
            feats = forward_features(model, x)
            groups.append(kd.FeatureGroup(f"client{client.client_id}", feats.shape[1], 1, feats))
        return sorted(groups, key=lambda g: -g.feature_dim)
    return kd.group_features([(client.level, forward_features(model, x))
                              for client, model in trained])


def _ensure_projections(projections: dict, groups, source_dim: int, method: str, order: int) -> dict:
    factory = kd.DenseProjection if method in ("ablation:no_ortho", "ablation:neither") \
        else kd.ProjectionLayer
    out = dict(projections)
    for g in groups:
        if g.feature_dim != source_dim and g.key not in out:
            out[g.key] = factory.zeros(source_dim, g.feature_dim, order)
    return out


def _feature_distill(state, model, trained, rng):
    cfg = state.config
    x_all = state.distill_inputs
    groups = _feature_groups(cfg.method, trained, x_all)
    projections = _ensure_projections(state.projections, groups, model.feature_dim,
                                      cfg.method, cfg.taylor_order)
    losses = []
    for _ in range(cfg.distill_epochs):
        for idx in _batches(len(x_all), cfg.distill_batch_size, rng):
            batch_groups = [replace(g, features=g.features[idx]) for g in groups]
            model, projections, loss = kd.distill_step(
                model, projections, batch_groups, x_all[idx], cfg.distill_lr,
                cfg.tau, cfg.kl_direction)
            losses.append(loss)
    return model, projections, losses


def _logit_distill(state, model, trained, rng):
    cfg = state.config
    x_all = state.distill_inputs
    client_logits = [(client.level, forward_logits(m, x_all)) for client, m in trained]
    losses = []
    for _ in range(cfg.distill_epochs):
        for idx in _batches(len(x_all), cfg.distill_batch_size, rng):
            batch = [(lv, logits[idx]) for lv, logits in client_logits]
            model, loss = kd.logit_ensemble_distill_step(
                model, batch, x_all[idx], cfg.distill_lr, cfg.tau)
            losses.append(loss)
    return model, losses


def run_round(state: FederationState) -> tuple[FederationState, RoundMetrics]:
    """One communication round; returns the next state and its metrics."""
    started = time.perf_counter()
    cfg = state.config
    t = state.round + 1
    selected = sample_clients(len(state.clients), cfg.participation, t, cfg.seed)

    trained = []
    for k in selected:
        client = state.clients[k]
        shard = state.train.subset(client.shard)
        local, _ = local_train(broadcast(state.model, client.level), shard.inputs, shard.labels,
                               cfg.local_epochs, cfg.local_lr, cfg.weight_decay,
                               cfg.batch_size, [cfg.seed, _LOCAL, t, k])
        trained.append((client, local))

    updates = [ClientUpdate(c.client_id, c.level, m.params, len(c.shard)) for c, m in trained]
    model = state.model.with_params(hetero_aggregate(state.model, updates, cfg.aggregation))

    projections = state.projections
    losses: list[float] = []
    rng = np.random.default_rng([cfg.seed, _DISTILL, t])
    if cfg.method == "logit_baseline":
        model, losses = _logit_distill(state, model, trained, rng)
    elif cfg.method != "heterofl_only":
        model, projections, losses = _feature_distill(state, model, trained, rng)

    residuals = [p.residual() for p in projections.values()]
    metrics = RoundMetrics(
        round=t,
        global_acc=evaluate(model, state.test),
        local_acc_mean=evaluate_local_mean([m for _, m in trained], state.test),
        distill_loss=float(np.mean(losses)) if losses else float("nan"),
        ortho_residual=max(residuals) if residuals else float("nan"),
        seconds=time.perf_counter() - started,
    )
    return replace(state, model=model, projections=projections, round=t), metrics
