"""Recovery analyses: module probes, transition probes, accuracies, MSE and MAP scores.

Also builds hand-wired oracle models (exact shift modules, exact skill replay
modules, a gating RNN that counts run lengths) used as reference fixtures.
"""

import itertools
from dataclasses import dataclass

import numpy as np
import torch

from . import nn
from .errors import LengthMismatch
from .model import CompositionalModel, ModelConfig
from .smc import filter_episodes
from .tasks import DURATIONS, N_OPS, gen_motor_skill, ground_truth_transitions, shift_matrix

CORRELATION = "pearson"


def pearson(a, b):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    a = a - a.mean()
    b = b - b.mean()
    den = np.sqrt((a * a).sum() * (b * b).sum())
    if den < 1e-12:
        return 0.0
    return float((a * b).sum() / den)


def best_permutation(score, maximize=True):
    """Exhaustive assignment: ``perm[j]`` is the target assigned to learned module j.

    Ties resolve to the lexicographically smallest permutation.
    """
    n = score.shape[0]
    best, best_val = None, None
    rows = np.arange(n)
    for perm in itertools.permutations(range(n)):
        val = score[rows, perm].sum()
        if best is None or (val > best_val + 1e-12 if maximize else val < best_val - 1e-12):
            best, best_val = perm, val
    return np.array(best)


@dataclass
class ProbeResult:
    responses: np.ndarray    # rule: (N, 6, 6); motor: (N, max_steps, 2) aligned-skill translations
    permutation: np.ndarray  # learned module -> ground-truth operation
    scores: np.ndarray       # per-module correlation with the assigned operation
    cost: np.ndarray = None  # pairwise score/cost matrix used for the assignment
    translation_error: float = None


@dataclass
class TransitionProbe:
    probs: np.ndarray  # (max_depth, N, N); [h-1, i] after h repetitions of module i


def _zeros(n, d, dtype):
    return torch.zeros(n, d, dtype=dtype)


@torch.no_grad()
def probe_modules_rule(model):
    cfg = model.config
    dt = model.dtype
    n = cfg.d_y
    x = _zeros(n, cfg.d_x, dt) if cfg.use_input else None
    y_prev = torch.eye(n, dtype=dt)
    m0 = model.params["mod.m0"].expand(n, cfg.hidden_module)
    _, mu_cand = model.module_candidates(x, y_prev, m0, torch.full((n,), -1, dtype=torch.long))
    responses = mu_cand.permute(1, 0, 2).double().numpy()
    corr = np.array([[pearson(responses[j], shift_matrix(s)) for s in range(N_OPS)]
                     for j in range(cfg.n_modules)])
    perm = best_permutation(corr)
    scores = corr[np.arange(cfg.n_modules), perm]
    return ProbeResult(responses, perm, scores, cost=corr)


@torch.no_grad()
def run_module(model, j, steps):
    """Roll module ``j`` out in isolation from its initial state; returns (steps, d_y) means."""
    cfg = model.config
    dt = model.dtype
    if cfg.reset_hidden_on_switch:
        m = model.params["mod.m0_z"][j].unsqueeze(0)
    else:
        m = model.params["mod.m0"].unsqueeze(0)
    prev = torch.full((1,), -1, dtype=torch.long)
    x = _zeros(1, cfg.d_x, dt) if cfg.use_input else None
    y_prev = _zeros(1, cfg.d_y, dt)
    out = []
    for _ in range(steps):
        m_cand, mu_cand = model.module_candidates(x, y_prev, m, prev)
        m = m_cand[:, j]
        out.append(mu_cand[0, j].double().numpy())
        if cfg.feed_prev_target:
            y_prev = mu_cand[:, j]
        prev = torch.full((1,), j, dtype=torch.long)
    return np.stack(out)


def path_alignment_cost(module_steps, skill_steps):
    """Mean distance between the cumulative paths; the shorter one is padded with zero steps."""
    a = np.asarray(module_steps, dtype=np.float64)
    b = np.asarray(skill_steps, dtype=np.float64)
    n = max(len(a), len(b))
    pa = np.zeros((n, a.shape[1]))
    pb = np.zeros((n, b.shape[1]))
    pa[:len(a)] = a
    pb[:len(b)] = b
    return float(np.linalg.norm(np.cumsum(pa, 0) - np.cumsum(pb, 0), axis=1).mean())


@torch.no_grad()
def probe_modules_motor(model):
    cfg = model.config
    N = cfg.n_modules
    skills = [gen_motor_skill(s) for s in range(N_OPS)]
    rollouts = [run_module(model, j, max(DURATIONS)) for j in range(N)]
    cost = np.array([[path_alignment_cost(rollouts[j][:sk.duration], sk.translations) for sk in skills]
                     for j in range(N)])
    perm = best_permutation(cost, maximize=False)
    responses = np.zeros((N, max(DURATIONS), cfg.d_y))
    scores = np.zeros(N)
    errors = []
    for j in range(N):
        sk = skills[perm[j]]
        steps = rollouts[j][:sk.duration]
        responses[j, :sk.duration] = steps
        scores[j] = pearson(steps, sk.translations)
        errors.extend(np.linalg.norm(steps - sk.translations, axis=1))
    return ProbeResult(responses, perm, scores, cost=cost, translation_error=float(np.mean(errors)))


def probe_modules(model):
    if model.config.family == "motor":
        return probe_modules_motor(model)
    return probe_modules_rule(model)


@torch.no_grad()
def probe_transitions(model, max_depth=5):
    """Gating output after h = 1..max_depth forced repetitions of each module (x = 0, y_prev = 0)."""
    cfg = model.config
    N = cfg.n_modules
    dt = model.dtype
    x = _zeros(N, cfg.d_x, dt) if cfg.use_input else None
    y0 = _zeros(N, cfg.d_y, dt)
    state = model.initial_state(N)
    g, _ = model.gating_step(x, y0, state)
    probs = np.zeros((max_depth, N, N))
    onehot = torch.eye(N, dtype=dt)
    for h in range(max_depth):
        state.g = g
        state.z_prev = onehot
        g, logits = model.gating_step(x, y0, state)
        probs[h] = torch.softmax(logits, -1).double().numpy()
    return TransitionProbe(probs)


def aligned_transitions(probe, permutation):
    """Reorder a transition probe from learned-module labels to operation labels."""
    inv = np.argsort(permutation)
    return probe.probs[:, inv][:, :, inv]


def gating_accuracy(probe, permutation):
    """Mean over depths of the correlation between learned and true transition rows."""
    P = aligned_transitions(probe, permutation)
    depth_scores = []
    for h in range(1, P.shape[0] + 1):
        ops = [s for s in range(N_OPS) if h <= DURATIONS[s]]
        if not ops:
            continue
        truth = np.stack([ground_truth_transitions(s, h) for s in ops])
        depth_scores.append(pearson(P[h - 1, ops], truth))
    return float(np.mean(depth_scores))


def module_accuracy(probe):
    return float(np.mean(probe.scores))


def self_probability_after_duration(probe, permutation):
    """Probability of repeating each operation once its full duration has elapsed."""
    P = aligned_transitions(probe, permutation)
    return np.array([P[DURATIONS[s] - 1, s, s] for s in range(N_OPS)])


def recovery_report(model):
    mp = probe_modules(model)
    tp = probe_transitions(model)
    report = {
        "module_accuracy": module_accuracy(mp),
        "gating_accuracy": gating_accuracy(tp, mp.permutation),
        "permutation": [int(p) for p in mp.permutation],
        "correlation": CORRELATION,
    }
    if mp.translation_error is not None:
        report["translation_error"] = mp.translation_error
        report["max_self_after_duration"] = float(self_probability_after_duration(tp, mp.permutation).max())
    return report, mp, tp


# ---------------------------------------------------------------------------
# task-level scores


def map_accuracy(trace, z_true, permutation=None):
    seq = np.asarray(trace.map_sequence if hasattr(trace, "map_sequence") else trace)
    z_true = np.asarray(z_true)
    if len(seq) != len(z_true):
        raise LengthMismatch(f"sequence lengths differ: {len(seq)} vs {len(z_true)}")
    if permutation is not None:
        seq = np.asarray(permutation)[seq]
    return float((seq == z_true).mean())


def final_third(values):
    values = np.asarray(values)
    return values[(2 * len(values)) // 3:]


def final_third_accuracy(trace, z_true, permutation=None):
    seq = np.asarray(trace.map_sequence)
    if permutation is not None:
        seq = np.asarray(permutation)[seq]
    return float((final_third(seq) == final_third(z_true)).mean())


def eval_mse(model, episodes, K=250, rng=None, mode="bootstrap", seed=0):
    """Mean squared error of the MAP-path outputs over feedback steps."""
    from .controls import ControlModel, predict_episodes

    if isinstance(model, ControlModel) and model.kind != "uniform_gating":
        preds = predict_episodes(model, episodes)
        errs = [((p - e.y) ** 2)[e.feedback].mean(axis=1) for p, e in zip(preds, episodes)]
        return float(np.concatenate(errs).mean())
    if isinstance(model, ControlModel):
        model = model.model
    rng = rng if rng is not None else np.random.default_rng(seed)
    traces = filter_episodes(model, episodes, K, mode, rng=rng, hard=True)
    errs = [((tr.map_mu - e.y) ** 2)[e.feedback].mean(axis=1) for tr, e in zip(traces, episodes)]
    return float(np.concatenate(errs).mean())


# ---------------------------------------------------------------------------
# oracle models

GATE_GAIN = 120.0
GATE_LOGIT = 30.0


def _count_units():
    units = []
    for i in range(N_OPS):
        for r in range(1, DURATIONS[i] + 1):
            units.append((i, r))
    return units


def _wire_oracle_gating(params, cfg):
    """Hidden units encode (module, run length) as +-1 indicators plus one always-on unit."""
    C, L = GATE_GAIN, GATE_LOGIT
    units = _count_units()
    H = cfg.hidden_gating
    if H < len(units) + 1:
        raise ValueError(f"oracle gating needs {len(units) + 1} hidden units")
    z_off = cfg.module_input_dim
    W_ih = np.zeros((H, cfg.gating_input_dim))
    W_hh = np.zeros((H, H))
    b = np.zeros(H)
    g0 = np.zeros(H)
    index = {u: k for k, u in enumerate(units)}
    bias_unit = len(units)
    for (i, r), k in index.items():
        W_ih[k, z_off + i] = C
        g0[k] = -1.0
        if r == 1:
            for rr in range(1, DURATIONS[i] + 1):
                W_hh[k, index[(i, rr)]] = -C / 2
            b[k] = -C / 2 * (DURATIONS[i] + 1)
        else:
            W_hh[k, index[(i, r - 1)]] = C / 2
            b[k] = -C
    b[bias_unit] = C
    g0[bias_unit] = 1.0
    W_out = np.zeros((N_OPS, H))
    for (i, r), k in index.items():
        target = np.zeros(N_OPS)
        target[i] = L if r < DURATIONS[i] else -L
        W_out[:, k] = target / 2
    W_out[:, bias_unit] = W_out[:, :len(units)].sum(axis=1)
    params["gate.W_ih"], params["gate.W_hh"], params["gate.b_ih"] = W_ih, W_hh, b
    params["gate.b_hh"], params["gate.g0"], params["gate.W_out"] = np.zeros(H), g0, W_out


def _store(cfg, arrays):
    from .model import layer_specs

    base = nn.init_params(layer_specs(cfg), cfg.w_init, np.random.default_rng(0))
    for name, value in arrays.items():
        base.entries[name] = torch.as_tensor(np.asarray(value), dtype=nn.DTYPE).reshape(base.entries[name].shape).clone()
    for name in base.entries:
        if name not in arrays and name != "rho":
            base.entries[name].zero_()
    return nn.ParamStore(base.entries, w_init=cfg.w_init)


def build_oracle_rule_model(eps=1e-3):
    """Modules compute tanh(eps * (S_z y_prev + x)) / eps; gating follows the true durations."""
    cfg = ModelConfig.rule()
    params = {}
    _wire_oracle_gating(params, cfg)
    N, H, D = cfg.n_modules, cfg.hidden_module, cfg.module_input_dim
    W_ih = np.zeros((N, H, D))
    for z in range(N):
        W_ih[z, :6, :6] = eps * np.eye(6)
        W_ih[z, :6, 6:12] = eps * shift_matrix(z).T
    W_out = np.zeros((cfg.d_y, H))
    W_out[:, :6] = np.eye(6) / eps
    params["mod.W_ih"], params["mod.W_out"] = W_ih, W_out
    params["rho"] = np.array(-30.0)
    return CompositionalModel(cfg, _store(cfg, params))


def build_oracle_motor_model():
    """Modules replay the true skills with a one-hot step counter; gating follows the durations."""
    cfg = ModelConfig.motor()
    params = {}
    _wire_oracle_gating(params, cfg)
    C = GATE_GAIN
    N, H = cfg.n_modules, cfg.hidden_module
    steps = max(DURATIONS)
    marker, bias_unit = 0, steps + 1
    W_hh = np.zeros((N, H, H))
    b = np.zeros((N, H))
    m0 = np.zeros((N, H))
    W_out = np.zeros((N, cfg.d_y, H))
    for z in range(N):
        W_hh[z, 1, marker] = C / 2
        for k in range(1, steps):
            W_hh[z, k + 1, k] = C / 2
        b[z, marker] = -C
        b[z, bias_unit] = C
        m0[z, marker] = 1.0
        m0[z, 1:steps + 1] = -1.0
        m0[z, bias_unit] = 1.0
        sk = gen_motor_skill(z)
        for k in range(sk.duration):
            W_out[z, :, k + 1] = sk.translations[k] / 2
        W_out[z, :, bias_unit] = W_out[z, :, 1:steps + 1].sum(axis=1)
    params["mod.W_hh"], params["mod.b_ih"], params["mod.m0_z"], params["mod.W_out"] = W_hh, b, m0, W_out
    params["rho"] = np.array(-30.0)
    return CompositionalModel(cfg, _store(cfg, params))

