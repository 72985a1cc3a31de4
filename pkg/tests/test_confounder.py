import math

import numpy as np
import pytest

from causalmeta import autodiff as ad
from causalmeta import rng as rngs
from causalmeta.autodiff import ParamSet, Tensor
from causalmeta.config import ExperimentConfig, Theorem1Config, parse_config
from causalmeta.confounder import (SweepCell, SweepReport, classification_config,
                                   confounded_source, empirical_lsq_weights,
                                   evaluation_tasks, finite_sample_norms,
                                   noncausal_weight_mass, population_lsq_weights,
                                   population_moments, theorem1_experiment, world_for)
from causalmeta.models import init_bundle
from causalmeta.tasks import JointSetting, sample_theorem1_dataset


def gen(seed=0):
    return rngs.stream(seed, rngs.EVAL)


# ------------------------------------------------------------- population

def test_independent_labels_give_exactly_zero_block():
    for s in (JointSetting(), JointSetting(2.0, 0.5, 0.3, 1.7, 3, 5)):
        w = population_lsq_weights(s, 0.5)
        assert np.all(w[s.width_i:] == 0.0)
        assert np.all(w[:s.width_i] > 0)


def test_zero_partner_mean_gives_zero_block():
    s = JointSetting(mu_j=0.0)
    for q in (0.0, 0.2, 0.8, 1.0):
        assert np.all(population_lsq_weights(s, q)[2:] == 0.0)


def test_opposite_agreement_is_mirror_image():
    s = JointSetting()
    lo, hi = population_lsq_weights(s, 0.2), population_lsq_weights(s, 0.8)
    np.testing.assert_allclose(lo[:2], hi[:2], atol=1e-15)
    np.testing.assert_allclose(lo[2:], -hi[2:], atol=1e-15)
    assert np.linalg.norm(hi[2:]) > 0.05


def test_closed_form_matches_full_solve():
    # oracle: solve the 4x4 normal equations built from the moments
    s = JointSetting(1.3, 0.7, 0.9, 1.1, 2, 3)
    for q in (0.1, 0.5, 0.65, 1.0):
        cov, cross = population_moments(s, q)
        np.testing.assert_allclose(population_lsq_weights(s, q), np.linalg.solve(cov, cross),
                                   atol=1e-12)


def test_moments_match_sample_covariance():
    s = JointSetting()
    d = sample_theorem1_dataset(s, 400_000, 0.8, gen(1))
    cov, cross = population_moments(s, 0.8)
    np.testing.assert_allclose(d.z.T @ d.z / len(d.z), cov, atol=0.02)
    np.testing.assert_allclose(d.z.T @ d.y_i / len(d.z), cross, atol=0.02)


def test_population_errors():
    with pytest.raises(np.linalg.LinAlgError):
        population_lsq_weights(JointSetting(sd_i=0.0), 0.5)
    with pytest.raises(ValueError):
        population_lsq_weights(JointSetting(), 1.2)


# -------------------------------------------------------------- empirical

def test_two_point_exact_fit():
    z = np.array([[1.0], [2.0]])
    y = np.array([2.0, 4.0])
    np.testing.assert_allclose(empirical_lsq_weights((z, y), ridge=0.0), [2.0], atol=1e-14)
    assert abs(empirical_lsq_weights((z, y))[0] - 2.0) < 1e-7


def test_ridge_is_scale_aware_and_non_negative():
    with pytest.raises(ValueError):
        empirical_lsq_weights((np.ones((3, 1)), np.ones(3)), ridge=-1.0)
    # duplicated columns are singular without the ridge but solvable with it
    z = np.repeat(np.arange(1.0, 6.0)[:, None], 2, axis=1)
    w = empirical_lsq_weights((z, z[:, 0]))
    np.testing.assert_allclose(w, [0.5, 0.5], atol=1e-6)


def test_single_resample_has_positive_norm():
    mean_w, norms = finite_sample_norms(JointSetting(), 0.5, 50, 1, gen())
    assert norms.shape == (1,) and norms[0] > 0
    assert mean_w.shape == (4,)


def test_norms_shrink_with_sample_size():
    med = [np.median(finite_sample_norms(JointSetting(), 0.5, n, 50, gen(n))[1])
           for n in (50, 500, 5000)]
    assert med[0] > med[1] > med[2]


# --------------------------------------------------------------- reports

def test_report_count_and_order():
    cfg = Theorem1Config(q_grid=(0.2, 0.5), n_grid=(30, "population"), resamples=5)
    reps = theorem1_experiment(cfg)
    assert len(reps) == 4
    assert [(r.setting["q"], r.setting["n"]) for r in reps] == [
        (0.2, 30), (0.2, "population"), (0.5, 30), (0.5, "population")]
    pop = reps[3]
    assert pop.noncausal_norm == 0.0 and pop.verdicts["consistent"]
    assert reps[0].norms.shape == (5,)
    assert "noncausal_norm_quantiles" in reps[0].to_dict()
    assert reps[1].setting["label_correlation"] == pytest.approx(-0.6)


def test_theorem_experiment_is_seeded():
    cfg = Theorem1Config(q_grid=(0.5,), n_grid=(20,), resamples=3)
    a = theorem1_experiment(cfg, seed=4)[0]
    b = theorem1_experiment(cfg, seed=4)[0]
    assert a.norms.tobytes() == b.norms.tobytes()
    assert theorem1_experiment(cfg, seed=5)[0].norms.tobytes() != a.norms.tobytes()


# ------------------------------------------------------------ sweep report

def _cells():
    rng = np.random.default_rng(0)
    cells = []
    for mode in ("plain", "causal"):
        for seed in range(3):
            for bs in (4, 8):
                a, b = rng.uniform(0.5, 1.0, size=2)
                cells.append(SweepCell(bs, seed, mode, a, 0.01, b, 0.01, 0.3))
    return tuple(cells)


def test_sweep_aggregate_recomputes_from_cells():
    rep = SweepReport(4, _cells(), 0.8)
    agg = rep.aggregate()
    for mode in ("plain", "causal"):
        for bs in (4, 8):
            vals = np.array([c.held_out for c in rep.select(mode, bs)])
            entry = agg[mode][str(bs)]["held_out"]
            assert entry["mean"] == pytest.approx(vals.mean(), abs=1e-15)
            assert entry["half_width"] == pytest.approx(1.96 * vals.std() / math.sqrt(3))


def test_sweep_verdicts_follow_means():
    cells = []
    for seed in range(2):
        cells += [SweepCell(4, seed, "plain", 0.8, 0, 0.8, 0, 0), SweepCell(8, seed, "plain", 0.7, 0, 0.7, 0, 0),
                  SweepCell(4, seed, "causal", 0.8, 0, 0.8, 0, 0), SweepCell(8, seed, "causal", 0.795, 0, 0.8, 0, 0)]
    v = SweepReport(4, tuple(cells), 0.8).verdicts()
    assert v == {"plain_degrades": True, "causal_holds": True}
    assert SweepReport(4, tuple(cells), 0.8).verdicts(tolerance=0.0)["causal_holds"] is False


def test_sweep_report_needs_both_sizes():
    with pytest.raises(ValueError):
        SweepReport(4, (SweepCell(4, 0, "plain", 0.5, 0, 0.5, 0, 0),), 0.8)


# ---------------------------------------------------------------- sources

def test_confounded_source_draws_distinct_train_ids():
    cfg = classification_config(ExperimentConfig())
    world = world_for(cfg)
    tasks = confounded_source(world, 0.8, 5, 5, "all")(gen(), 6)
    ids = [t.meta["task_id"] for t in tasks]
    assert len(set(ids)) == 6
    assert set(ids) <= set(world.train_ids)
    assert all(t.x_support.shape == (5, world.spec.input_dim) for t in tasks)


def test_single_task_batch_is_unconfounded():
    world = world_for(classification_config(ExperimentConfig()))
    (t,) = confounded_source(world, 0.8, 5, 5, "all")(gen(), 1)
    assert not t.meta.get("partner_labels")


def test_evaluation_tasks_use_requested_ids():
    world = world_for(classification_config(ExperimentConfig()))
    tasks = evaluation_tasks(world, world.test_ids, 7, 4, 3, gen())
    assert len(tasks) == 7
    assert {t.meta["task_id"] for t in tasks} <= set(world.test_ids)


# ------------------------------------------------------------- diagnostic

def _classifier(mode="plain"):
    cfg = classification_config(parse_config({"mode": mode}))
    return cfg, init_bundle(cfg), world_for(cfg)


def test_zero_head_has_no_noncausal_mass():
    cfg, b, world = _classifier()
    head = ParamSet((k, Tensor(np.zeros_like(v.data))) for k, v in b.head.items())
    b = b.with_theta({**b.encoder.prefixed("g."), **head.prefixed("h.")})
    assert noncausal_weight_mass(b, world, world.train_ids[0]) == 0.0


def test_noncausal_mass_positive_for_random_init():
    cfg, b, world = _classifier("causal")
    assert noncausal_weight_mass(b, world, world.train_ids[0]) > 0.0


@pytest.mark.slow
def test_stronger_confounding_raises_noncausal_mass():
    # plain models on q=0.9 pairs lean on partner factors more than on q=0.5 pairs
    from causalmeta.confounder import sweep_cell_config
    from causalmeta.meta import meta_train
    base = parse_config({"sweep": {"iterations": 300}})
    sw = base.sweep
    means = {}
    for q in (0.5, 0.9):
        per_seed = []
        for seed in range(10):
            cfg = sweep_cell_config(base, "plain", sw.base_batch, seed)
            world = world_for(cfg)
            b, _ = meta_train(cfg, confounded_source(world, q, sw.shots, sw.queries, sw.pairing))
            per_seed.append(np.mean([noncausal_weight_mass(b, world, i) for i in world.train_ids]))
        means[q] = np.mean(per_seed)
    assert means[0.9] > means[0.5]


def test_constant_function_has_no_noncausal_mass():
    cfg, b, world = _classifier()
    enc = ParamSet((k, Tensor(np.zeros_like(v.data))) for k, v in b.encoder.items())
    b = b.with_theta({**enc.prefixed("g."), **b.head.prefixed("h.")})
    assert noncausal_weight_mass(b, world, world.train_ids[1]) == 0.0
