import math

import numpy as np
import pytest

from fedfd import numerics as nx
from fedfd.distillation import (DenseProjection, FeatureGroup, ProjectionLayer, distill_loss,
                                distill_step, group_features, logit_distill_loss,
                                logit_ensemble_distill_step, mean_logits, project)
from fedfd.errors import InvalidArgument
from fedfd.models import build_global, forward_features, forward_logits, make_levels, slice_model

LEVELS = make_levels()


def naive_kl_rows(p_logits, q_logits, tau):
    """Batch-mean KL(softmax(p/tau) || softmax(q/tau)), scalar loops with fsum."""
    total = []
    for pr, qr in zip(p_logits, q_logits):
        ep = [math.exp(v / tau) for v in pr]
        eq = [math.exp(v / tau) for v in qr]
        sp, sq = math.fsum(ep), math.fsum(eq)
        total.append(math.fsum((a / sp) * math.log((a / sp) / (b / sq)) for a, b in zip(ep, eq)))
    return math.fsum(total) / len(total)


def setup_problem(seed=0, batch=6, widths=(8, 6)):
    rng = np.random.default_rng(seed)
    model = build_global(4, list(widths), 3, seed=seed)
    x = rng.standard_normal((batch, 4))
    clients = []
    for label in "adg":
        sub = slice_model(model, LEVELS[label])
        noisy = sub.with_params({k: v + 0.3 * rng.standard_normal(v.shape) for k, v in sub.params.items()})
        clients.append((LEVELS[label], forward_features(noisy, x)))
    groups = group_features(clients)
    projections = {g.key: ProjectionLayer(model.feature_dim, g.feature_dim,
                                          rng.standard_normal(model.feature_dim * (model.feature_dim - 1) // 2) * 0.3)
                   for g in groups if g.feature_dim != model.feature_dim}
    return model, x, groups, projections


# --- group_features -----------------------------------------------------------

def test_group_features_means_and_order():
    f1, f2, f3 = np.ones((2, 3)), 3 * np.ones((2, 3)), np.zeros((2, 5))
    groups = group_features([(LEVELS["d"], f1), (LEVELS["a"], f3), (LEVELS["d"], f2)])
    assert [g.feature_dim for g in groups] == [5, 3]
    assert groups[1].key == "3" and groups[1].member_count == 2
    np.testing.assert_array_equal(groups[1].features, 2 * np.ones((2, 3)))


def test_group_features_rejects_ragged():
    with pytest.raises(InvalidArgument):
        group_features([(LEVELS["d"], np.ones((2, 3))), (LEVELS["d"], np.ones((3, 3)))])


# --- projections --------------------------------------------------------------

def test_zero_params_project_to_truncated_identity():
    layer = ProjectionLayer.zeros(5, 3)
    np.testing.assert_array_equal(layer.matrix, np.eye(5)[:3])
    z = np.random.default_rng(0).standard_normal((4, 5))
    np.testing.assert_array_equal(project(layer, z), z[:, :3])
    np.testing.assert_array_equal(DenseProjection.zeros(5, 3).matrix, layer.matrix)


def test_full_rank_projection_is_isometry():
    rng = np.random.default_rng(1)
    layer = ProjectionLayer(6, 6, rng.standard_normal(15))
    z = rng.standard_normal((10, 6))
    np.testing.assert_allclose(np.linalg.norm(project(layer, z), axis=1),
                               np.linalg.norm(z, axis=1), rtol=1e-12)


def test_truncated_projection_contracts():
    rng = np.random.default_rng(2)
    layer = ProjectionLayer(7, 3, rng.standard_normal(21) * 2)
    assert layer.residual() <= 1e-10
    np.testing.assert_allclose(np.linalg.svd(layer.matrix, compute_uv=False), 1.0, atol=1e-12)
    z = rng.standard_normal((20, 7))
    assert np.all(np.linalg.norm(project(layer, z), axis=1) <= np.linalg.norm(z, axis=1) + 1e-12)


def test_projection_validation():
    with pytest.raises(InvalidArgument):
        ProjectionLayer.zeros(3, 4)
    with pytest.raises(InvalidArgument):
        ProjectionLayer(3, 2, np.zeros(2))
    with pytest.raises(InvalidArgument):
        project(ProjectionLayer.zeros(3, 2), np.ones((2, 4)))


# --- distill_loss ---------------------------------------------------------------

def test_loss_is_zero_when_teacher_equals_projected_student():
    model, x, _, _ = setup_problem()
    layer = ProjectionLayer(6, 3, np.random.default_rng(3).standard_normal(15))
    target = project(layer, forward_features(model, x))
    groups = [FeatureGroup("3", 3, 1, target)]
    assert distill_loss(model, {"3": layer}, groups, x) == pytest.approx(0.0, abs=1e-14)


def test_loss_single_group_matches_naive():
    model, x, groups, projections = setup_problem(seed=4)
    one = [g for g in groups if g.key == "3"]
    student = project(projections["3"], forward_features(model, x))
    for tau in (0.5, 1.0, 3.0):
        want = naive_kl_rows(student, one[0].features, tau)
        assert distill_loss(model, projections, one, x, tau) == pytest.approx(want, abs=1e-10)
        back = naive_kl_rows(one[0].features, student, tau)
        got = distill_loss(model, projections, one, x, tau, "teacher_first")
        assert got == pytest.approx(back, abs=1e-10)


def test_loss_averages_over_projected_groups_only():
    model, x, groups, projections = setup_problem(seed=5)
    feats = forward_features(model, x)
    terms = [naive_kl_rows(project(projections[g.key], feats), g.features, 1.0)
             for g in groups if g.key in projections]
    assert len(terms) == 2 and len(groups) == 3
    assert distill_loss(model, projections, groups, x) == pytest.approx(sum(terms) / 2, abs=1e-10)


def test_loss_only_top_group_is_zero():
    model, x, groups, _ = setup_problem()
    top = [g for g in groups if g.feature_dim == model.feature_dim]
    assert distill_loss(model, {}, top, x) == 0.0


def test_loss_errors():
    model, x, groups, projections = setup_problem()
    with pytest.raises(InvalidArgument):
        distill_loss(model, {}, groups, x)
    with pytest.raises(InvalidArgument):
        distill_loss(model, projections, [], x)
    with pytest.raises(InvalidArgument):
        distill_loss(model, projections, groups, x, tau=0.0)
    with pytest.raises(InvalidArgument):
        distill_loss(model, projections, groups, x, kl_direction="sideways")


# --- distill_step ---------------------------------------------------------------

def test_zero_lr_step_is_bit_identical():
    model, x, groups, projections = setup_problem()
    new_model, new_proj, _ = distill_step(model, projections, groups, x, lr=0.0)
    for k in model.params:
        assert new_model.params[k].tobytes() == model.params[k].tobytes()
    for k in projections:
        assert new_proj[k].free_params.tobytes() == projections[k].free_params.tobytes()


def test_step_leaves_head_untouched_and_updates_extractor():
    model, x, groups, projections = setup_problem()
    new_model, _, _ = distill_step(model, projections, groups, x, lr=0.5)
    assert new_model.params["head_w"].tobytes() == model.params["head_w"].tobytes()
    assert new_model.params["head_b"].tobytes() == model.params["head_b"].tobytes()
    assert not np.array_equal(new_model.params["w0"], model.params["w0"])


def test_steps_keep_orthogonality_and_reduce_loss():
    model, x, groups, projections = setup_problem(seed=6)
    start = distill_loss(model, projections, groups, x)
    for _ in range(50):
        model, projections, _ = distill_step(model, projections, groups, x, lr=0.2)
        assert max(p.residual() for p in projections.values()) <= 1e-9
    assert distill_loss(model, projections, groups, x) < start


def test_step_returns_pre_step_loss():
    model, x, groups, projections = setup_problem()
    _, _, loss = distill_step(model, projections, groups, x, lr=0.3)
    assert loss == distill_loss(model, projections, groups, x)


def test_step_gradients_match_finite_differences():
    model, x, groups, projections = setup_problem(seed=7, batch=3, widths=(5, 4))
    lr = 1e-3
    new_model, new_proj, _ = distill_step(model, projections, groups, x, lr=lr)
    eps = 1e-6
    for key, layer in projections.items():
        num = np.zeros_like(layer.free_params)
        for i in range(layer.free_params.size):
            up, down = layer.free_params.copy(), layer.free_params.copy()
            up[i] += eps
            down[i] -= eps
            lu = distill_loss(model, dict(projections, **{key: ProjectionLayer(4, layer.target_dim, up)}), groups, x)
            ld = distill_loss(model, dict(projections, **{key: ProjectionLayer(4, layer.target_dim, down)}), groups, x)
            num[i] = (lu - ld) / (2 * eps)
        analytic = (layer.free_params - new_proj[key].free_params) / lr
        np.testing.assert_allclose(analytic, num, atol=1e-6)


def test_dense_projection_step_runs():
    model, x, groups, _ = setup_problem()
    dense = {g.key: DenseProjection.zeros(model.feature_dim, g.feature_dim)
             for g in groups if g.feature_dim != model.feature_dim}
    _, new, _ = distill_step(model, dense, groups, x, lr=0.5)
    assert any(not np.array_equal(new[k].matrix, dense[k].matrix) for k in dense)


# --- logit baseline ---------------------------------------------------------------

def test_mean_logits():
    got = mean_logits([(LEVELS["a"], np.zeros((2, 3))), (LEVELS["d"], np.full((2, 3), 2.0))])
    np.testing.assert_array_equal(got, np.ones((2, 3)))
    with pytest.raises(InvalidArgument):
        mean_logits([])


def test_logit_step_zero_gradient_when_teacher_is_global():
    model = build_global(4, [6], 3, seed=0)
    x = np.random.default_rng(0).standard_normal((5, 4))
    own = forward_logits(model, x)
    new, loss = logit_ensemble_distill_step(model, [(LEVELS["a"], own)], x, lr=1.0)
    assert loss == pytest.approx(0.0, abs=1e-15)
    for k in model.params:
        np.testing.assert_allclose(new.params[k], model.params[k], atol=1e-14)


def test_logit_loss_matches_naive_and_decreases():
    model = build_global(4, [6], 3, seed=1)
    rng = np.random.default_rng(1)
    x = rng.standard_normal((5, 4))
    teacher = rng.standard_normal((5, 3))
    assert logit_distill_loss(model, teacher, x, 2.0) == pytest.approx(
        naive_kl_rows(teacher, forward_logits(model, x), 2.0), abs=1e-12)
    start = logit_distill_loss(model, teacher, x)
    for _ in range(30):
        model, _ = logit_ensemble_distill_step(model, [(LEVELS["a"], teacher)], x, lr=0.5)
    assert logit_distill_loss(model, teacher, x) < start


def test_logit_step_rejects_shape_mismatch():
    model = build_global(4, [6], 3, seed=1)
    with pytest.raises(InvalidArgument):
        logit_ensemble_distill_step(model, [(LEVELS["a"], np.zeros((4, 3)))], np.zeros((5, 4)), 0.1)


@pytest.mark.parametrize("dim", [2, 5, 10])
def test_orthogonality_after_random_init_at_small_dims(dim):
    rng = np.random.default_rng(dim)
    for _ in range(20):
        layer = ProjectionLayer(dim, max(1, dim // 2), rng.standard_normal(dim * (dim - 1) // 2) * 3)
        assert layer.residual() <= 1e-10
        assert nx.orthogonality_residual(nx.matrix_exp(nx.skew_from_params(layer.free_params, dim))) <= 1e-10
