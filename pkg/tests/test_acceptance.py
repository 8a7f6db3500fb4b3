"""Acceptance criteria, one test each, every one printing a single PASS/FAIL line.

Criteria 4 to 10 read the desk-scale runs under ``artifacts/`` (or
``$COMPMETA_ARTIFACTS``).  A missing or stale run is trained on the spot through
the command line, which takes hours; ``demos/run_desk_experiments.py`` builds
them all ahead of time.
"""

import json
import time

import numpy as np
import pytest

from compmeta import oracles
from compmeta.controls import load_control
from compmeta.evaluation import recovery_report
from compmeta.experiments import (INFER_PARTICLES, RULE_SEEDS, ensure_run, episode_set, estimator_variance,
                                  inference_scores, zero_predictor_mse)
from compmeta.model import load_model
from compmeta.tasks import DatasetSplit
from compmeta.train import control_mse

RESULTS = []  # (criterion, passed, detail), echoed again in the terminal summary

MODULE_GATE, GATING_GATE = 0.9, 0.8
N_TEST_EPISODES = 24


def report(n, title, passed, detail):
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {n:2d} {title}: {detail}"
    RESULTS.append(line)
    print(line)
    return passed


def check(n, title, passed, detail):
    report(n, title, passed, detail)
    assert passed, detail


# ---------------------------------------------------------------------------
# shared run loading


@pytest.fixture(scope="module")
def rule_runs():
    out = {}
    for s in RULE_SEEDS:
        run = ensure_run(f"rule-seed{s}")
        model = load_model(run / "model.json")
        rep, _, _ = recovery_report(model)
        out[s] = {"run": run, "model": model, "report": rep}
    return out


@pytest.fixture(scope="module")
def recovered(rule_runs):
    """First seed meeting the recovery gates; the strongest seed if none does."""
    ok = [s for s, r in rule_runs.items()
          if r["report"]["module_accuracy"] >= MODULE_GATE and r["report"]["gating_accuracy"] >= GATING_GATE]
    seed = ok[0] if ok else max(rule_runs, key=lambda s: min(rule_runs[s]["report"]["module_accuracy"],
                                                             rule_runs[s]["report"]["gating_accuracy"]))
    r = rule_runs[seed]
    split = DatasetSplit.load(r["run"] / "split.json")
    return {"seed": seed, "model": r["model"], "split": split, "permutation": np.array(r["report"]["permutation"]),
            "recovered": bool(ok)}


@pytest.fixture(scope="module")
def motor_model():
    run = ensure_run("motor-seed0")
    return load_model(run / "model.json"), DatasetSplit.load(run / "split.json")


def _scores(model, episodes, permutation, seed=0):
    return inference_scores(model, episodes, K=INFER_PARTICLES, seed=seed, permutation=permutation)


# ---------------------------------------------------------------------------
# 1-3: oracles


def test_criterion_01_filter_matches_exact_forward_algorithm():
    t0 = time.time()
    res = oracles.check_hmm(K=1000, runs=20, T=10, tol=0.02)
    secs = time.time() - t0
    check(1, "HMM log-marginal", res["passed"] and secs < 60,
          f"mean {res['mean']:.4f} vs exact {res['exact']:.4f}, rel err {res['relative_error']:.2e} "
          f"(<= 0.02), {secs:.1f}s (< 60s)")


def test_criterion_02_gradients_match_finite_differences():
    t0 = time.time()
    res = oracles.check_gradients(tol=1e-3)
    secs = time.time() - t0
    check(2, "gradient correctness", res["passed"] and secs < 60,
          f"{res['checked'] - res['failures']}/{res['checked']} parameters within 1e-3, "
          f"max rel err {res['max_relative_error']:.2e}, {secs:.1f}s")


def test_criterion_03_stratified_resampling():
    res = oracles.check_resampling(max_K=6)
    cases = sum(c["passed"] for c in res["cases"])
    check(3, "stratified resampling", res["passed"],
          f"hand cases {cases}/{len(res['cases'])}, u-sweep violations {res['sweep_violations']} "
          f"over {res['sweep_probes']} probes (K <= 6)")


# ---------------------------------------------------------------------------
# 4-7: rule task


def test_criterion_04_rule_recovery(rule_runs):
    smoke = ensure_run("rule-paper-smoke")
    smoke_ok = (smoke / "model.json").exists()
    hits = [s for s, r in rule_runs.items()
            if r["report"]["module_accuracy"] >= MODULE_GATE and r["report"]["gating_accuracy"] >= GATING_GATE]
    per_seed = ", ".join(f"s{s} mod {r['report']['module_accuracy']:.3f} gate {r['report']['gating_accuracy']:.3f}"
                         for s, r in rule_runs.items())
    check(4, "rule recovery", len(hits) >= 3 and smoke_ok,
          f"{len(hits)}/5 seeds reach module >= 0.9 and gating >= 0.8 ({per_seed}); "
          f"full-config run {'completed' if smoke_ok else 'missing'}")


def test_criterion_05_one_shot_inference(recovered):
    eps = episode_set("rule", recovered["split"].test, N_TEST_EPISODES, seed=100, purpose="acceptance-full")
    res = _scores(recovered["model"], eps, recovered["permutation"])
    frac = float(np.mean(res["map_accuracy"] == 1.0))
    check(5, "one-shot inference", frac >= 0.9,
          f"seed {recovered['seed']}: {int(np.sum(res['map_accuracy'] == 1.0))}/{len(eps)} held-out episodes "
          f"with MAP accuracy 1.0 ({frac:.3f}, need >= 0.9); mean accuracy {res['map_accuracy'].mean():.3f}")


def test_criterion_06_sparse_feedback_beats_uniform_gating(recovered):
    ablation = load_model(ensure_run("rule-uniform-seed0") / "model.json")
    assert ablation.config.uniform_gating
    abl_perm = np.array(recovery_report(ablation)[0]["permutation"])
    eps = episode_set("rule", recovered["split"].test, N_TEST_EPISODES, seed=101, p=0.25, purpose="acceptance-sparse")
    full = _scores(recovered["model"], eps, recovered["permutation"])
    abl = _scores(ablation, eps, abl_perm)
    gap = full["map_accuracy"].mean() - abl["map_accuracy"].mean()
    third = full["final_third"].mean()
    check(6, "sparse feedback", gap >= 0.2 and third >= 0.9,
          f"full {full['map_accuracy'].mean():.3f} vs uniform gating {abl['map_accuracy'].mean():.3f} "
          f"(gap {gap:.3f}, need >= 0.2); full-model final third {third:.3f} (need >= 0.9)")


def test_criterion_07_extended_tasks(recovered):
    eps = episode_set("rule", recovered["split"].test, N_TEST_EPISODES, seed=102, p=0.25, factor=4,
                      purpose="acceptance-extended")
    res = _scores(recovered["model"], eps, recovered["permutation"])
    third = res["final_third"].mean()
    check(7, "extended tasks", third >= 0.85,
          f"factor 4, p=0.25, T in [{min(e.T for e in eps)}, {max(e.T for e in eps)}]: final-third MAP accuracy "
          f"{third:.3f} (need >= 0.85); whole-episode {res['map_accuracy'].mean():.3f}")


# ---------------------------------------------------------------------------
# 8: controls


def test_criterion_08_controls():
    plain_run = ensure_run("control-plain_rnn")
    tid_run = ensure_run("control-task_id_rnn")
    split = DatasetSplit.load(plain_run / "split.json")
    test_eps = episode_set("rule", split.test, 64, seed=103, purpose="acceptance-controls")
    train_eps = episode_set("rule", split.train, 64, seed=103, purpose="acceptance-controls")
    plain = load_control(plain_run / "model.json")
    tid = load_control(tid_run / "model.json")
    zero = zero_predictor_mse(test_eps)
    plain_mse = control_mse(plain, test_eps)
    rel = abs(plain_mse - zero) / zero
    tid_train, tid_test = control_mse(tid, train_eps), control_mse(tid, test_eps)
    check(8, "controls", rel <= 0.2 and tid_train * 5 <= tid_test,
          f"plain RNN test MSE {plain_mse:.3f} vs zero predictor {zero:.3f} (off by {rel:.1%}, need <= 20%); "
          f"task-id RNN train {tid_train:.3f} vs test {tid_test:.3f} (ratio {tid_test / tid_train:.1f}, need >= 5)")


# ---------------------------------------------------------------------------
# 9-10: motor task


def test_criterion_09_motor_recovery(motor_model):
    model, _ = motor_model
    rep, _, _ = recovery_report(model)
    err, self_p = rep["translation_error"], rep["max_self_after_duration"]
    check(9, "motor recovery", err <= 0.1 and self_p <= 0.1,
          f"per-step translation error {err:.4f} (need <= 0.1); max self-probability after full duration "
          f"{self_p:.4f} (need <= 0.1); permutation {rep['permutation']}")


def test_criterion_10_guided_beats_bootstrap_variance(motor_model):
    model, split = motor_model
    eps = episode_set("motor", split.train, 8, seed=104, purpose="acceptance-variance")
    est = estimator_variance(model, eps, K=100, repeats=50, seed=0)
    var = {}
    for mode, rows in est.items():
        finite = np.isfinite(rows).all()
        var[mode] = float(np.var(rows, axis=0, ddof=1).mean()) if finite else float("inf")
    lost = {m: int((~np.isfinite(r)).any(axis=1).sum()) for m, r in est.items()}
    check(10, "guided vs bootstrap", var["guided"] < var["bootstrap"],
          f"K=100, 50 repeats, {len(eps)} training episodes: mean log-marginal variance guided "
          f"{var['guided']:.4g} vs bootstrap {var['bootstrap']:.4g}; repeats with lost particles {json.dumps(lost)}")


# ---------------------------------------------------------------------------
# auxiliary property (not a numbered criterion)


def test_rule_training_loss_decreases_early(rule_runs):
    import csv

    with open(rule_runs[0]["run"] / "losses.csv", newline="") as fh:
        losses = np.array([float(r["loss"]) for r in csv.DictReader(fh)])
    blocks = losses[:500].reshape(5, 100).mean(axis=1)
    assert np.all(np.diff(blocks) <= 0), f"100-iteration means over the first 500 iterations: {blocks}"
