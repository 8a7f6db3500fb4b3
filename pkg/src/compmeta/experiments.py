"""Experiment drivers shared by the command line, the demos and the acceptance suite:
held-out episode sets, inference scores, control comparisons and filter variance."""

import json
import os
from pathlib import Path

import numpy as np

from .errors import DegenerateWeights
from .evaluation import final_third_accuracy, map_accuracy, probe_modules
from .rng import stream
from .smc import filter_episodes
from .tasks import extend_spec, gen_episode, sparse_mask
from .train import TrainConfig

INFER_PARTICLES = 250


def episode_set(family, specs, n, seed, p=1.0, factor=1, purpose="episodes"):
    """``n`` episodes cycling through ``specs``; feedback density ``p``, optionally extended."""
    rng = stream(seed, purpose, family, int(round(p * 1000)), factor)
    out = []
    for i in range(n):
        spec = tuple(specs[i % len(specs)])
        check = True
        if factor > 1:
            spec = extend_spec(spec, factor, rng)
            check = False
        ep = gen_episode(family, spec, rng, check=check)
        if p < 1.0:
            ep = ep.with_feedback(sparse_mask(ep.T, p, rng))
        out.append(ep)
    return out


def inference_scores(model, episodes, K=INFER_PARTICLES, seed=0, permutation=None, batch=32):
    """MAP accuracy (whole episode and final third) per episode under bootstrap filtering."""
    if permutation is None:
        permutation = probe_modules(model).permutation
    rng = stream(seed, "inference")
    full, third, traces = [], [], []
    degenerate = 0
    for start in range(0, len(episodes), batch):
        chunk = episodes[start:start + batch]
        try:
            results = filter_episodes(model, chunk, K, "bootstrap", rng=rng)
        except DegenerateWeights:
            # one lost episode should not sink the batch; it scores zero
            results = []
            for ep in chunk:
                try:
                    results.append(filter_episodes(model, [ep], K, "bootstrap", rng=rng)[0])
                except DegenerateWeights:
                    results.append(None)
        for tr, ep in zip(results, chunk):
            traces.append(tr)
            if tr is None:
                degenerate += 1
                full.append(0.0)
                third.append(0.0)
                continue
            full.append(map_accuracy(tr, ep.z_true, permutation))
            third.append(final_third_accuracy(tr, ep.z_true, permutation))
    return {"map_accuracy": np.array(full), "final_third": np.array(third), "traces": traces,
            "permutation": np.asarray(permutation), "degenerate": degenerate}


def zero_predictor_mse(episodes):
    err = [(e.y ** 2)[e.feedback].mean(axis=1) for e in episodes]
    return float(np.concatenate(err).mean())


def estimator_variance(model, episodes, K=100, repeats=50, seed=0):
    """Spread of the log-marginal estimate over independent filter runs, per mode.

    Returns per-mode arrays of shape (repeats, n_episodes); a run that loses every
    particle is recorded as -inf.
    """
    out = {}
    for mode in ("bootstrap", "guided"):
        rng = stream(seed, "variance", mode)
        rows = []
        for _ in range(repeats):
            try:
                rows.append([tr.log_marginal for tr in filter_episodes(model, episodes, K, mode, rng=rng)])
            except DegenerateWeights:
                rows.append([-np.inf] * len(episodes))
        out[mode] = np.array(rows)
    return out


# ---------------------------------------------------------------------------
# the desk-scale training suite behind the recovery, inference and control checks

ARTIFACTS_ENV = "COMPMETA_ARTIFACTS"
RULE_SEEDS = (0, 1, 2, 3, 4)


def desk_runs():
    """Run name -> (training config, control kind or None), in the order they are trained."""
    runs = {"rule-seed0": (TrainConfig.desk("rule", seed=0), None),
            "rule-uniform-seed0": (TrainConfig.desk("rule", seed=0), "uniform_gating"),
            "motor-seed0": (TrainConfig.desk("motor", seed=0), None),
            "control-plain_rnn": (TrainConfig.desk("rule", seed=0), "plain_rnn"),
            "control-task_id_rnn": (TrainConfig.desk("rule", seed=0), "task_id_rnn"),
            # the full configuration is only exercised, not trained to convergence
            "rule-paper-smoke": (TrainConfig.paper("rule", iterations=1, eval_every=1, checkpoint_every=1), None)}
    for s in RULE_SEEDS[1:]:
        runs[f"rule-seed{s}"] = (TrainConfig.desk("rule", seed=s), None)
    return runs


def artifacts_root(root=None):
    if root is not None:
        return Path(root)
    return Path(os.environ.get(ARTIFACTS_ENV, Path.cwd() / "artifacts"))


def run_is_complete(run_dir, config):
    run_dir = Path(run_dir)
    if not (run_dir / "model.json").exists() or not (run_dir / "config.json").exists():
        return False
    return TrainConfig.from_json(run_dir / "config.json") == config


def ensure_run(name, root=None, retrain=True):
    """Directory of a finished desk run, training it through the command line if needed."""
    from .cli import main

    config, control = desk_runs()[name]
    run_dir = artifacts_root(root) / name
    if run_is_complete(run_dir, config):
        return run_dir
    if not retrain:
        raise FileNotFoundError(f"no finished run at {run_dir}")
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg_path = run_dir / "requested_config.json"
    cfg_path.write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
    argv = ["train", "--config", str(cfg_path), "--out", str(run_dir)]
    if control:
        argv += ["--control", control]
    code = main(argv)
    if code != 0:
        raise RuntimeError(f"training run {name} exited with code {code}")
    return run_dir
