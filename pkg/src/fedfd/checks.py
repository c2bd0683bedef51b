"""Self-contained invariant suite behind ``fedfd check``.

Each check returns ``(passed, detail)``.  The oracles here are brute-force
re-derivations that share no code path with the implementation they test.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import numerics as nx
from .aggregation import ClientUpdate, broadcast, fedavg, hetero_aggregate
from .config import ExperimentConfig, parse_config
from .data import dirichlet_partition, gen_synthetic, label_entropy
from .distillation import FeatureGroup, ProjectionLayer, distill_step, group_features, project
from .models import (build_global, forward_features, make_levels, slice_model, tape_features,
                     tape_logits)


@dataclass
class Check:
    module: str
    name: str
    run: Callable[[int], tuple[bool, str]]


CHECKS: list[Check] = []


def check(module: str, name: str):
    def register(fn):
        CHECKS.append(Check(module, name, fn))
        return fn
    return register


def _random_skew(rng, dim):
    return nx.skew_from_params(rng.standard_normal(dim * (dim - 1) // 2), dim)


def _laplace_det(m: np.ndarray) -> float:
    if m.shape[0] == 1:
        return float(m[0, 0])
    return sum((-1) ** j * m[0, j] * _laplace_det(np.delete(m[1:], j, axis=1))
               for j in range(m.shape[0]))


@check("numerics", "orthogonality of exp(skew)")
def _orthogonality(order):
    rng = np.random.default_rng(0)
    worst = max(nx.orthogonality_residual(nx.matrix_exp(_random_skew(rng, d), order))
                for d in (2, 4, 8, 16, 32) for _ in range(5))
    return worst <= 1e-10, f"max residual {worst:.2e}"


@check("numerics", "det(exp(skew)) = +1")
def _determinant(order):
    rng = np.random.default_rng(1)
    worst = max(abs(_laplace_det(nx.matrix_exp(_random_skew(rng, d), order)) - 1.0)
                for d in range(1, 7) for _ in range(3))
    return worst <= 1e-8, f"max |det - 1| {worst:.2e}"


@check("numerics", "softmax shift invariance")
def _softmax_shift(order):
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(50):
        v = rng.standard_normal(7) * 5
        worst = max(worst, np.abs(nx.softmax_t(v + rng.normal() * 10, 0.7) - nx.softmax_t(v, 0.7)).max())
    return worst <= 1e-12, f"max deviation {worst:.2e}"


@check("numerics", "KL non-negativity")
def _kl_nonneg(order):
    rng = np.random.default_rng(3)
    worst = min(nx.kl_div(nx.softmax_t(rng.standard_normal(6)), nx.softmax_t(rng.standard_normal(6)))
                for _ in range(200))
    same = max(abs(nx.kl_div(p, p)) for p in (nx.softmax_t(rng.standard_normal(6)) for _ in range(20)))
    return worst >= -1e-9 and same <= 1e-9, f"min KL {worst:.2e}, max KL(p,p) {same:.2e}"


def gradient_cases(order: int = nx.DEFAULT_TAYLOR_ORDER) -> dict[str, tuple[Callable, np.ndarray]]:
    """Every loss composition trained anywhere in the package, as grad_check inputs."""
    rng = np.random.default_rng(4)
    model = build_global(5, [6, 4], 3, seed=5)
    x = rng.standard_normal((7, 5))
    y = rng.integers(0, 3, 7)
    names = list(model.params)
    shapes = {k: model.params[k].shape for k in names}
    flat = np.concatenate([model.params[k].ravel() for k in names])

    def ce_loss(tape, p):
        return nx.cross_entropy_rows(tape_logits(model, nx.unflatten(p, shapes), x), y)

    dim = 4
    teacher = {2: rng.standard_normal((7, 2)), 3: rng.standard_normal((7, 3))}
    a0 = rng.standard_normal(dim * (dim - 1) // 2) * 0.8

    def distill_wrt_a(tape, a):
        pv = {k: tape.constant(model.params[k]) for k in model.extractor_names()}
        z = tape_features(model, pv, x)
        terms = []
        for d, e in teacher.items():
            m = nx.leading_rows(nx.expm(nx.skew(a, dim), order), d)
            terms.append(nx.kl_rows(nx.matmul(z, nx.transpose(m)), e))
        return nx.scale(nx.add(terms[0], terms[1]), 0.5)

    ext_shapes = {k: shapes[k] for k in model.extractor_names()}
    ext_flat = np.concatenate([model.params[k].ravel() for k in ext_shapes])

    def distill_wrt_w(tape, p):
        z = tape_features(model, nx.unflatten(p, ext_shapes), x)
        m = tape.constant(nx.matrix_exp(nx.skew_from_params(a0, dim), order)[:3])
        return nx.kl_rows(tape.constant(teacher[3]), nx.matmul(z, nx.transpose(m)))

    teacher_logits = rng.standard_normal((7, 3))

    def logit_kl(tape, p):
        return nx.kl_rows(tape.constant(teacher_logits),
                          tape_logits(model, nx.unflatten(p, shapes), x), 2.0)

    return {
        "cross-entropy through 2-layer model": (ce_loss, flat),
        "feature KL through matrix exponential (projection params)": (distill_wrt_a, a0),
        "feature KL teacher-first (extractor weights)": (distill_wrt_w, ext_flat),
        "logit-ensemble KL": (logit_kl, flat),
    }


@check("numerics", "gradient fidelity of every loss")
def _gradients(order):
    errs = {name: nx.grad_check(fn, p) for name, (fn, p) in gradient_cases(order).items()}
    worst = max(errs.values())
    return worst <= 1e-4, f"max relative error {worst:.2e} over {len(errs)} losses"


@check("models", "nesting of slices")
def _nesting(order):
    model = build_global(6, [10, 7], 3, seed=6)
    levels = list(make_levels().values())
    ok = True
    for p, q in itertools.combinations(levels, 2):
        direct = slice_model(model, q).params
        nested = slice_model(slice_model(model, p), q).params
        ok &= all(np.array_equal(direct[k], nested[k]) for k in direct)
    return bool(ok), f"{len(levels) * (len(levels) - 1) // 2} level pairs"


@check("models", "feature dimension per level")
def _feature_dims(order):
    model = build_global(6, [20, 10], 3, seed=7)
    x = np.ones((2, 6))
    ok = all(forward_features(slice_model(model, lv), x).shape[1] == lv.width(10)
             for lv in make_levels().values())
    return ok, "forward_features width equals ceil(r * n)"


def covering_mean_oracle(global_params: dict, updates: list[ClientUpdate], weighted: bool) -> dict:
    """Per-coordinate mean over the clients whose slice contains the coordinate."""
    out = {}
    for name, arr in global_params.items():
        res = arr.copy()
        for coord in itertools.product(*(range(s) for s in arr.shape)):
            num = den = 0.0
            for u in updates:
                block = u.params[name]
                if all(c < s for c, s in zip(coord, block.shape)):
                    w = float(u.sample_count) if weighted else 1.0
                    num += w * block[coord]
                    den += w
            if den:
                res[coord] = num / den
        out[name] = res
    return out


def random_aggregation_instance(rng, max_clients=5, max_width=8):
    widths = [int(rng.integers(1, max_width + 1)) for _ in range(int(rng.integers(1, 3)))]
    model = build_global(int(rng.integers(1, 5)), widths, int(rng.integers(2, 4)),
                         seed=int(rng.integers(1 << 30)))
    pool = list(make_levels().values())
    levels = [pool[i] for i in sorted(rng.choice(len(pool), size=3, replace=False))]
    updates = []
    for cid in range(int(rng.integers(1, max_clients + 1))):
        lv = levels[int(rng.integers(len(levels)))]
        sub = broadcast(model, lv)
        params = {k: rng.standard_normal(v.shape) for k, v in sub.params.items()}
        updates.append(ClientUpdate(cid, lv, params, int(rng.integers(1, 50))))
    return model, updates


@check("aggregation", "covering-mean oracle")
def _covering(order):
    rng = np.random.default_rng(8)
    worst = 0.0
    for _ in range(40):
        model, updates = random_aggregation_instance(rng)
        for weighting in ("uniform", "sample"):
            got = hetero_aggregate(model, updates, weighting)
            want = covering_mean_oracle(model.params, updates, weighting == "sample")
            worst = max(worst, max(np.abs(got[k] - want[k]).max() for k in got))
    return worst <= 1e-12, f"max deviation {worst:.2e}"


@check("aggregation", "reduction to fedavg")
def _fedavg_reduction(order):
    rng = np.random.default_rng(9)
    model = build_global(3, [5, 4], 2, seed=10)
    lv = make_levels()["a"]
    updates = [ClientUpdate(i, lv, {k: rng.standard_normal(v.shape) for k, v in model.params.items()}, 1)
               for i in range(4)]
    got, want = hetero_aggregate(model, updates), fedavg(updates)
    worst = max(np.abs(got[k] - want[k]).max() for k in got)
    return worst <= 1e-12, f"max deviation {worst:.2e}"


@check("distillation", "orthogonality after training")
def _ortho_training(order):
    rng = np.random.default_rng(11)
    model = build_global(6, [10, 8], 3, seed=12)
    x = rng.standard_normal((16, 6))
    groups = [FeatureGroup("8", 8, 1, np.abs(rng.standard_normal((16, 8)))),
              FeatureGroup("5", 5, 1, np.abs(rng.standard_normal((16, 5)))),
              FeatureGroup("3", 3, 1, np.abs(rng.standard_normal((16, 3))))]
    proj = {"5": ProjectionLayer(8, 5, rng.standard_normal(28), order),
            "3": ProjectionLayer(8, 3, rng.standard_normal(28), order)}
    for _ in range(30):
        model, proj, _ = distill_step(model, proj, groups, x, 0.5)
    worst = max(p.residual() for p in proj.values())
    return worst <= 1e-9, f"max residual {worst:.2e} after 30 steps"


@check("distillation", "projection count is m - 1")
def _projection_count(order):
    levels = make_levels()
    feats = [(levels[lv], np.ones((4, w))) for lv, w in
             [("a", 10), ("d", 7), ("d", 7), ("g", 4), ("g", 4), ("g", 4)]]
    groups = group_features(feats)
    needed = [g for g in groups if g.feature_dim != 10]
    return len(groups) == 3 and len(needed) == 2, f"{len(groups)} groups, {len(needed)} projections"


@check("distillation", "square projection is an isometry")
def _isometry(order):
    rng = np.random.default_rng(13)
    layer = ProjectionLayer(9, 9, rng.standard_normal(36) * 2, order)
    z = rng.standard_normal((20, 9))
    worst = np.abs(np.linalg.norm(project(layer, z), axis=1) - np.linalg.norm(z, axis=1)).max()
    return worst <= 1e-9, f"max norm change {worst:.2e}"


@check("data", "partition disjoint and exhaustive")
def _partition(order):
    ds = gen_synthetic(5, 40, 3, 1.0, seed=14)
    ok = True
    for alpha in (0.05, 0.5, 5.0):
        for seed in range(5):
            shards = dirichlet_partition(ds, 7, alpha, seed)
            joined = np.concatenate(shards)
            ok &= joined.size == len(ds) and np.array_equal(np.sort(joined), np.arange(len(ds)))
            ok &= all(s.size > 0 for s in shards)
    return bool(ok), "15 (alpha, seed) pairs"


@check("data", "label entropy increases with alpha")
def _entropy(order):
    ds = gen_synthetic(10, 50, 3, 1.0, seed=15)
    means = []
    for alpha in (0.1, 1.0, 10.0):
        ent = [np.mean([label_entropy(ds.labels[s], 10) for s in dirichlet_partition(ds, 10, alpha, seed)])
               for seed in range(20)]
        means.append(float(np.mean(ent)))
    return means[0] < means[1] < means[2], "mean entropies " + ", ".join(f"{m:.3f}" for m in means)


@check("cli", "config round-trip and defaults")
def _config(order):
    import json
    cfg = ExperimentConfig()
    again = parse_config(json.loads(cfg.dumps()))
    defaults = (cfg.local_epochs, cfg.rounds, cfg.clients, cfg.participation, cfg.batch_size,
                cfg.weight_decay, cfg.local_lr, cfg.distill_lr, cfg.level_decay)
    ok = again == cfg and defaults == (10, 200, 20, 0.4, 64, 1e-4, 0.001, 0.01, 0.10)
    return ok, "parse(serialize(default)) == default"


def run_checks(module_filter: str | None = None, taylor_order: int = nx.DEFAULT_TAYLOR_ORDER):
    """Yield ``(module, name, passed, detail)`` for every registered check."""
    for c in CHECKS:
        if module_filter and c.module != module_filter:
            continue
        try:
            ok, detail = c.run(taylor_order)
        except Exception as exc:  # a crashing check is a failing check
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        yield c.module, c.name, bool(ok), detail
