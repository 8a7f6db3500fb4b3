import itertools

import numpy as np
import pytest

from compmeta import evaluation as ev
from compmeta.errors import LengthMismatch
from compmeta.experiments import episode_set, inference_scores, zero_predictor_mse
from compmeta.model import CompositionalModel, ModelConfig
from compmeta.tasks import all_specs, gen_motor_skill, gen_rule_episode, ground_truth_transitions

SIGMA_FLOOR = 0.01


def test_pearson_basic():
    assert ev.pearson([1, 2, 3], [2, 4, 6]) == pytest.approx(1.0)
    assert ev.pearson([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0)
    assert ev.pearson(np.ones(5), np.arange(5)) == 0.0


def test_uniform_rows_have_zero_correlation_with_truth():
    # a constant vector has no variance, so the correlation is exactly 0 by definition
    truth = np.stack([ground_truth_transitions(s, 1) for s in range(6)])
    assert ev.pearson(np.full_like(truth, 1 / 6), truth) == 0.0
    probs = np.full((5, 6, 6), 1 / 6)
    assert ev.gating_accuracy(ev.TransitionProbe(probs), np.arange(6)) == 0.0


def test_best_permutation_exhaustive_and_tie_break():
    rng = np.random.default_rng(0)
    score = rng.standard_normal((6, 6))
    perm = ev.best_permutation(score)
    best = max(itertools.permutations(range(6)), key=lambda p: score[np.arange(6), p].sum())
    assert tuple(perm) == best
    assert tuple(ev.best_permutation(np.zeros((6, 6)))) == tuple(range(6))
    assert tuple(ev.best_permutation(score)) == tuple(perm)
    assert sorted(perm) == list(range(6))


def test_oracle_rule_accuracies_are_one(oracle_rule):
    report, mp, tp = ev.recovery_report(oracle_rule)
    assert report["module_accuracy"] == pytest.approx(1.0, abs=1e-6)
    assert report["gating_accuracy"] == pytest.approx(1.0, abs=1e-6)
    assert mp.permutation.tolist() == list(range(6))
    assert report["correlation"] == "pearson"


def test_oracle_transition_rows(oracle_rule):
    tp = ev.probe_transitions(oracle_rule)
    assert np.allclose(tp.probs.sum(-1), 1.0, atol=1e-6)
    assert np.allclose(tp.probs[2, 0], [0, .2, .2, .2, .2, .2], atol=1e-3)
    assert tp.probs[3, 4, 4] >= 0.9
    assert tp.probs[2, 0, 0] < 0.1


def test_untrained_probes():
    m = CompositionalModel.init(ModelConfig.rule(), seed=0)
    mp = ev.probe_modules(m)
    assert np.abs(mp.responses).max() < 0.05
    tp = ev.probe_transitions(m)
    assert np.allclose(tp.probs.sum(-1), 1.0, atol=1e-6)
    assert np.abs(tp.probs - 1 / 6).max() < 1e-3


def test_accuracy_invariant_to_module_relabeling(oracle_rule):
    perm = [3, 0, 5, 1, 4, 2]
    m = oracle_rule.copy()
    for name, v in m.params.entries.items():
        if name.startswith("mod.") and v.dim() > 1 and name != "mod.W_out":
            v.copy_(oracle_rule.params[name][perm])
    mp = ev.probe_modules(m)
    assert mp.permutation.tolist() == perm
    assert ev.module_accuracy(mp) == pytest.approx(1.0, abs=1e-6)
    # re-running alignment on the same probe is stable
    assert ev.probe_modules(m).permutation.tolist() == perm


def test_oracle_motor_probe(oracle_motor):
    report, mp, tp = ev.recovery_report(oracle_motor)
    assert mp.translation_error == pytest.approx(0.0, abs=1e-6)
    assert np.allclose(np.diag(mp.cost), 0.0, atol=1e-6)
    assert report["module_accuracy"] == pytest.approx(1.0, abs=1e-6)
    assert report["max_self_after_duration"] < 0.1


def test_padding_penalizes_duration_mismatch():
    five = gen_motor_skill(4).translations          # 5 steps
    assert ev.path_alignment_cost(five, five) == 0.0
    three = five[:3]
    # hand case: after step 3 the short path stays at its endpoint; the gap grows by the skipped steps
    full = np.cumsum(five, 0)
    gaps = [0, 0, 0, np.linalg.norm(full[3] - full[2]), np.linalg.norm(full[4] - full[2])]
    assert ev.path_alignment_cost(three, five) == pytest.approx(np.mean(gaps))
    assert ev.path_alignment_cost(three, five) > 0
    a, b = np.array([[1.0, 0.0]]), np.array([[1.0, 0.0], [0.0, 1.0]])
    assert ev.path_alignment_cost(a, b) == pytest.approx(0.5)


def test_map_accuracy_cases():
    z = np.array([0, 0, 1, 1, 2])
    assert ev.map_accuracy(z, z) == 1.0
    assert ev.map_accuracy(np.array([1, 1, 0, 0, 2]), z, permutation=[1, 0, 2, 3, 4, 5]) == 1.0
    with pytest.raises(LengthMismatch):
        ev.map_accuracy(z[:3], z)


def test_map_accuracy_of_random_sequences_is_one_sixth():
    rng = np.random.default_rng(0)
    z = np.array(gen_rule_episode((0, 1, 2), rng).z_true)
    n = 20_000
    acc = np.array([ev.map_accuracy(rng.integers(0, 6, len(z)), z) for _ in range(n)])
    se = np.sqrt((1 / 6) * (5 / 6) / (len(z) * n))
    assert abs(acc.mean() - 1 / 6) < 4 * se


def test_final_third():
    assert ev.final_third(np.arange(12)).tolist() == [8, 9, 10, 11]
    assert ev.final_third(np.arange(10)).tolist() == [6, 7, 8, 9]


def test_oracle_eval_mse_at_noise_floor(oracle_rule):
    eps = episode_set("rule", all_specs()[:8], 8, seed=0)
    mse = ev.eval_mse(oracle_rule, eps, K=50, seed=0)
    assert mse <= SIGMA_FLOOR ** 2


def test_zero_predictor_matches_generator_variance():
    rng = np.random.default_rng(0)
    eps = [gen_rule_episode(all_specs()[i % 120], rng) for i in range(3000)]
    ys = np.concatenate([e.y for e in eps])
    assert zero_predictor_mse(eps) == pytest.approx(float((ys ** 2).mean()), rel=1e-9)
    # y_t is a sum of t independent standard normals (shifts permute entries), so E[y^2] = mean over t of t
    ts = np.concatenate([np.arange(1, e.T + 1) for e in eps])
    assert zero_predictor_mse(eps) == pytest.approx(ts.mean(), rel=0.03)


def test_oracle_inference_scores(oracle_rule):
    eps = episode_set("rule", all_specs()[:10], 10, seed=1)
    res = inference_scores(oracle_rule, eps, K=100, seed=0, permutation=np.arange(6))
    assert np.all(res["map_accuracy"] == 1.0)
    assert res["degenerate"] == 0


def test_oracle_sparse_inference_final_third(oracle_rule):
    eps = episode_set("rule", all_specs()[:10], 10, seed=2, p=0.25)
    res = inference_scores(oracle_rule, eps, K=250, seed=0, permutation=np.arange(6))
    assert np.mean(res["final_third"]) >= 0.9
