import hashlib

import numpy as np
import pytest

from causalmeta import autodiff as ad
from causalmeta import rng as rngs
from causalmeta.autodiff import ParamSet, Tensor
from causalmeta.config import CausalHyper, ExperimentConfig, ModelConfig
from causalmeta.meta import (MetricsRow, TrainingDiverged, adapt, adapt_batch, confidence_half_width,
                             forward, inner_adapt, meta_evaluate, meta_gradient, meta_outer_step,
                             meta_train, sinusoid_source, task_loss, train_batch_two_step)
from causalmeta.models import init_bundle, predict, grouping_weights
from causalmeta.tasks import SinusoidSpec, Task, sinusoid_batch, stack_tasks

SMALL = ModelConfig(encoder_hidden=(8,), n_z=8, n_factors=4)


def config(**kw):
    base = dict(model=SMALL, iterations=3)
    base.update(kw)
    return ExperimentConfig(**base)


def tasks(n=4, seed=0, shots=5):
    return sinusoid_batch(SinusoidSpec(shots=shots, queries=shots), n, rngs.stream(seed, rngs.TRAIN))


def digest(params):
    h = hashlib.sha256()
    for k, v in params.items():
        h.update(k.encode())
        h.update(v.data.tobytes())
    return h.hexdigest()


# -------------------------------------------------------------- inner loop

@pytest.mark.parametrize("mode", ["plain", "causal"])
def test_zero_inner_rate_is_identity(mode):
    c = config(mode=mode, inner_lr=0.0)
    b = init_bundle(c)
    fast = inner_adapt(b, tasks(1)[0], c)
    for k, v in b.theta().items():
        np.testing.assert_array_equal(fast[k].data, v.data)


def test_quadratic_closed_form():
    h, c0, alpha, theta0 = 3.0, 0.5, 0.1, 2.0
    p = ParamSet(t=Tensor([theta0], requires_grad=True))
    fast = adapt(p, lambda q: ad.mul(ad.sum(ad.mul(ad.sub(q["t"], c0), ad.sub(q["t"], c0))), 0.5 * h), alpha)
    assert fast["t"].item() == pytest.approx(theta0 - alpha * h * (theta0 - c0), rel=1e-15)


def test_inner_step_line_search():
    c = config(mode="plain")
    b = init_bundle(c)
    task = tasks(1, seed=3)[0]
    pred = forward(b, b.theta(), task.x_support, None)
    before = task_loss(pred, task.y_support, "regression").item()
    alpha = 1.0
    for _ in range(40):
        fast = inner_adapt(b, task, c.replace(inner_lr=alpha), create_graph=False)
        after = task_loss(forward(b, fast, task.x_support, None), task.y_support, "regression").item()
        if after <= before:
            break
        alpha /= 2
    assert after <= before


def test_inner_adapt_is_differentiable_and_leaves_causal_params():
    c = config(mode="causal")
    b = init_bundle(c)
    xi_before = b.xi.data.tobytes()
    theta = b.theta().tracked()
    fast = inner_adapt(b.with_theta(theta), tasks(1)[0], c)
    loss = ad.sum(ad.mul(fast["h.0.w"], fast["h.0.w"]))
    g = ad.grad(loss, theta)
    assert np.abs(g["g.0.w"].data).sum() > 0   # the head step depends on the encoder
    assert b.xi.data.tobytes() == xi_before


def test_kind_mismatch_rejected():
    c = config(task_kind="classification", model=ModelConfig(output_dim=2))
    with pytest.raises(ValueError):
        inner_adapt(init_bundle(c), tasks(1)[0], c)


def test_vectorised_adaptation_matches_per_task():
    c = config(mode="causal", inner_lr=0.05)
    b = init_bundle(c)
    ts = tasks(3)
    batch = adapt_batch(b, b.theta(), stack_tasks(ts), c, create_graph=False)
    for i, t in enumerate(ts):
        single = inner_adapt(b, t, c, create_graph=False)
        for k in single:
            np.testing.assert_allclose(batch[k].data[i], single[k].data, rtol=0, atol=1e-14)


# -------------------------------------------------------------- outer step

def test_meta_gradient_quadratic_closed_form():
    # f(x) = w*x with a single weight; squared loss on one point is quadratic in w
    h_x, alpha = 1.3, 0.2
    x = np.array([[h_x]])
    ys, yq = np.array([[0.4]]), np.array([[-0.7]])
    w0 = 0.9
    p = ParamSet(w=Tensor([[w0]], requires_grad=True))

    def loss(q, y):
        return ad.mse_loss(ad.matmul(Tensor(x), q["w"]), Tensor(y))

    fast = adapt(p, lambda q: loss(q, ys), alpha)
    (g,) = ad.grad(loss(fast, yq), [p["w"]])
    # d/dw of (x w - y)^2 is 2 x (x w - y); curvature 2 x^2
    h = 2 * h_x ** 2
    w1 = w0 - alpha * 2 * h_x * (h_x * w0 - ys[0, 0])
    expected = (1 - alpha * h) * 2 * h_x * (h_x * w1 - yq[0, 0])
    assert g.item() == pytest.approx(expected, rel=1e-12, abs=1e-15)


def test_zero_inner_rate_gives_plain_query_gradient():
    c = config(mode="plain", inner_lr=0.0)
    b = init_bundle(c)
    ts = tasks(3)
    mg = meta_gradient(b, ts, c)
    theta = b.theta().tracked()
    batch = stack_tasks(ts)
    direct = ad.grad(task_loss(forward(b, theta, batch.x_query, None), batch.y_query, "regression"), theta)
    for k in theta:
        np.testing.assert_allclose(mg.grads[k].data, direct[k].data, rtol=1e-12, atol=1e-15)


@pytest.mark.parametrize("opt", ["sgd", "adam"])
def test_zero_outer_rate_keeps_theta(opt):
    c = config(mode="causal", outer_lr=0.0, outer_optimizer=opt)
    b = init_bundle(c)
    out = meta_outer_step(b, tasks(), c)
    assert digest(out.theta()) == digest(b.theta())
    assert digest(out.causal_params()) == digest(b.causal_params())


def test_sgd_outer_step_is_gradient_step():
    c = config(mode="plain", outer_optimizer="sgd", outer_lr=0.01)
    b = init_bundle(c)
    ts = tasks()
    mg = meta_gradient(b, ts, c)
    out = meta_outer_step(b, ts, c)
    for k, v in b.theta().items():
        np.testing.assert_allclose(out.theta()[k].data, v.data - 0.01 * mg.grads[k].data, atol=1e-16)


def test_meta_gradient_finite_differences_four_parameters():
    # encoder 1->1 and head 1->1: four parameters in total
    c = config(mode="plain", inner_lr=0.3,
               model=ModelConfig(encoder_hidden=(), n_z=1, hidden_act="tanh", match_params=False))
    b = init_bundle(c, 5)
    assert b.num_params() == 4
    batch = stack_tasks(tasks(2, shots=4))

    def fn(p):
        p = p if all(v.requires_grad for v in p.values()) else ParamSet(p).tracked()
        fast = adapt_batch(b, p, batch, c)
        return task_loss(forward(b, fast, batch.x_query, None), batch.y_query, "regression")

    mg = meta_gradient(b, batch, c)
    fd = ad.finite_diff_grad(fn, b.theta().detached())
    a = np.concatenate([mg.grads[k].data.ravel() for k in b.theta()])
    n = np.concatenate([fd[k].ravel() for k in b.theta()])
    assert np.linalg.norm(a - n) / np.linalg.norm(n) <= 1e-3


# ---------------------------------------------------------------- two-step

def test_plain_two_step_equals_outer_step():
    c = config(mode="plain")
    b = init_bundle(c)
    ts = tasks()
    a, _ = train_batch_two_step(b, ts, c)
    assert digest(a.theta()) == digest(meta_outer_step(b, ts, c).theta())


def test_causal_zero_rates_changes_only_theta():
    c = config(mode="causal", causal=CausalHyper(alpha1=0, alpha2=0, alpha3=0, alpha4=0))
    b = init_bundle(c)
    out, row = train_batch_two_step(b, tasks(), c)
    assert digest(out.causal_params()) == digest(b.causal_params())
    assert digest(out.theta()) != digest(b.theta())
    assert row.l_dm_xi > 0


def test_two_step_rerun_bit_identical():
    c = config(mode="causal")
    ts = tasks()
    a, ra = train_batch_two_step(init_bundle(c), ts, c)
    b, rb = train_batch_two_step(init_bundle(c), ts, c)
    assert digest(a.named_params()) == digest(b.named_params())
    assert ra == rb


def test_reduction_to_baseline():
    # zero causal rates and regularisers, Xi = I and a constant grouping output
    # under max-normalisation (weights exactly 1): the causal model computes
    # h(g(x)) and its theta-trajectory must coincide with plain mode's
    mc = ModelConfig(encoder_hidden=(6,), n_z=4, n_factors=4, match_params=False)
    zero = CausalHyper(0, 0, 0, 0, 0, 0, norm="max")
    cc = config(mode="causal", model=mc, causal=zero, iterations=5)
    pc = cc.replace(mode="plain")
    cb = init_bundle(cc)
    gr = ParamSet((k, Tensor(np.zeros_like(v.data))) for k, v in cb.grouping.items())
    cb = cb.with_causal({"xi": Tensor(np.eye(4)), **gr.prefixed("gr.")})
    pb = init_bundle(pc).with_theta(cb.theta())
    source = sinusoid_source(SinusoidSpec(shots=5, queries=5))
    cb, _ = meta_train(cc, source, cb)
    pb, _ = meta_train(pc, source, pb)
    for k, v in pb.theta().items():
        np.testing.assert_allclose(cb.theta()[k].data, v.data, rtol=0, atol=1e-13)


# ---------------------------------------------------------------- training

def test_budget_one_gives_one_row():
    c = config(iterations=1)
    _, rows = meta_train(c)
    assert len(rows) == 1 and rows[0].iteration == 0


def test_training_is_deterministic():
    c = config(mode="causal", iterations=4)
    b1, r1 = meta_train(c)
    b2, r2 = meta_train(c)
    strip = lambda rows: [(r.iteration, r.pred_loss, r.score, r.l_dm_xi, r.l_dm_fgr) for r in rows]
    assert strip(r1) == strip(r2)
    assert digest(b1.named_params()) == digest(b2.named_params())


def test_divergence_reports_iteration():
    c = config(mode="plain", outer_optimizer="sgd", outer_lr=1e6, inner_lr=0.0, iterations=50)
    with pytest.raises(TrainingDiverged) as info:
        meta_train(c)
    assert 0 < info.value.iteration < 50


def test_metrics_row_must_be_finite():
    with pytest.raises(ValueError):
        MetricsRow(0, "train", float("nan"), 0.0)


@pytest.mark.slow
def test_desk_training_beats_untrained():
    c = ExperimentConfig(mode="plain")
    eval_tasks = sinusoid_source(c.sinusoid)(rngs.stream(0, rngs.EVAL), 100)
    before = meta_evaluate(init_bundle(c), eval_tasks, c).mean
    trained, _ = meta_train(c)
    assert meta_evaluate(trained, eval_tasks, c).mean < before


# -------------------------------------------------------------- evaluation

def test_exact_predictions_give_zero_mse():
    c = config(mode="plain", inner_lr=0.0)
    b = init_bundle(c)
    t = tasks(1)[0]
    exact = Task(t.x_support, predict(b, t.x_support).data, t.x_query, predict(b, t.x_query).data, "regression")
    assert meta_evaluate(b, [exact], c).mean == 0.0


def test_duplicated_tasks_shrink_half_width():
    c = config(mode="causal")
    b = init_bundle(c)
    ts = tasks(6)
    one = meta_evaluate(b, ts, c)
    two = meta_evaluate(b, ts + ts, c)
    assert two.mean == pytest.approx(one.mean, rel=1e-14)
    assert two.half_width == pytest.approx(one.half_width / np.sqrt(2), rel=1e-12)


def test_mean_is_direct_average():
    c = config(mode="plain")
    b = init_bundle(c)
    ts = tasks(5, seed=2)
    res = meta_evaluate(b, ts, c, chunk=2)
    direct = []
    for t in ts:
        fast = inner_adapt(b, t, c, create_graph=False)
        pred = forward(b, fast, t.x_query, None).data
        direct.append(np.mean((pred - t.y_query) ** 2))
    np.testing.assert_allclose(res.scores, direct, rtol=1e-12)
    assert res.mean == pytest.approx(sum(direct) / len(direct), rel=1e-12)
    assert confidence_half_width(np.array(direct)) == pytest.approx(1.96 * np.std(direct) / np.sqrt(5))


def test_empty_evaluation_rejected():
    c = config()
    with pytest.raises(ValueError):
        meta_evaluate(init_bundle(c), [], c)
