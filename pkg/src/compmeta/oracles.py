"""Independent reference computations used to validate the filter and the gradients.

* an exact forward algorithm for a small hidden Markov model, together with a
  hand-wired compositional model whose generative process is that HMM;
* central finite differences on a float64 copy of a model;
* the hand-worked stratified resampling cases and an exhaustive copy-count sweep.
"""

import math
import time
from dataclasses import dataclass

import numpy as np
import torch
from scipy.special import logsumexp

from . import nn
from .model import CompositionalModel, ModelConfig, layer_specs
from .smc import Noise, filter_arrays, filter_episodes, stratified_resample, training_loss
from .tasks import Episode

# ---------------------------------------------------------------------------
# discrete surrogate

HMM_TRANSITIONS = np.array([
    [0.80, 0.10, 0.10],
    [0.20, 0.60, 0.20],
    [0.15, 0.15, 0.70],
])
HMM_MEANS = np.array([[1.0, 0.0], [-0.5, 0.8660254037844386], [-0.5, -0.8660254037844386]])
HMM_SIGMA = 0.7
SURROGATE_GAIN = 240.0


@dataclass(frozen=True)
class GaussianHMM:
    transitions: np.ndarray  # (S, S), rows sum to 1
    means: np.ndarray        # (S, d)
    sigma: float
    initial: np.ndarray = None

    @property
    def n_states(self):
        return self.transitions.shape[0]

    def start(self):
        if self.initial is None:
            return np.full(self.n_states, 1.0 / self.n_states)
        return self.initial

    def log_emission(self, y):
        """(T, S) log densities of each observation under each state."""
        y = np.asarray(y, dtype=np.float64)
        d = y.shape[1]
        sq = ((y[:, None, :] - self.means[None]) ** 2).sum(-1)
        return -d * (math.log(self.sigma) + 0.5 * math.log(2 * math.pi)) - sq / (2 * self.sigma**2)

    def sample(self, T, rng):
        z = np.zeros(T, dtype=np.int64)
        z[0] = rng.choice(self.n_states, p=self.start())
        for t in range(1, T):
            z[t] = rng.choice(self.n_states, p=self.transitions[z[t - 1]])
        y = self.means[z] + self.sigma * rng.standard_normal((T, self.means.shape[1]))
        return z, y


def default_hmm():
    return GaussianHMM(HMM_TRANSITIONS, HMM_MEANS, HMM_SIGMA)


def forward_log_marginal(hmm, y, feedback=None):
    """Exact log p(y_{observed}) by the forward recursion, in the log domain."""
    log_e = hmm.log_emission(y)
    T = len(log_e)
    if feedback is not None:
        log_e = np.where(np.asarray(feedback)[:, None], log_e, 0.0)
    log_A = np.log(hmm.transitions)
    alpha = np.log(hmm.start()) + log_e[0]
    for t in range(1, T):
        alpha = logsumexp(alpha[:, None] + log_A, axis=0) + log_e[t]
    return float(logsumexp(alpha))


def build_hmm_surrogate(hmm=None):
    """Compositional model whose gating implements ``hmm.transitions`` exactly.

    Gating unit i fires (+1) iff the previous module was i; one always-on unit
    carries a bias so the first step (soft uniform z_prev) gets flat logits.
    Each module emits a constant mean, so the emission is the HMM's Gaussian.
    """
    hmm = hmm or default_hmm()
    if hmm.initial is not None and not np.allclose(hmm.initial, 1.0 / hmm.n_states):
        raise ValueError("the surrogate starts from a uniform state distribution")
    S, d = hmm.means.shape
    C = SURROGATE_GAIN
    cfg = ModelConfig(family="hmm", n_modules=S, hidden_gating=S + 1, hidden_module=S, d_x=0, d_y=d,
                      use_input=False, feed_prev_target=False, sigma_init=hmm.sigma)
    store = nn.init_params(layer_specs(cfg), cfg.w_init, np.random.default_rng(0))
    arrays = {name: np.zeros(tuple(v.shape)) for name, v in store.entries.items()}
    W_ih = np.zeros((S + 1, S))
    b_ih = np.zeros(S + 1)
    for i in range(S):
        W_ih[i, i] = C
        b_ih[i] = -C / 2
    b_ih[S] = C
    W_out = np.zeros((S, S + 1))
    W_out[:, :S] = np.log(hmm.transitions).T / 2
    W_out[:, S] = W_out[:, :S].sum(axis=1)
    arrays["gate.W_ih"], arrays["gate.b_ih"], arrays["gate.W_out"] = W_ih, b_ih, W_out
    arrays["mod.b_ih"] = C * np.eye(S)
    arrays["mod.W_out"] = hmm.means.T
    arrays["rho"] = np.array(nn.softplus_inverse(hmm.sigma - cfg.sigma_floor))
    entries = {n: torch.as_tensor(a, dtype=nn.DTYPE).reshape(store.entries[n].shape).clone()
               for n, a in arrays.items()}
    return CompositionalModel(cfg, nn.ParamStore(entries, w_init=cfg.w_init))


def hmm_episode(hmm, T, rng):
    z, y = hmm.sample(T, rng)
    return Episode(y=y, feedback=np.ones(T, dtype=bool), z_true=z, task=())


def check_hmm(K=1000, runs=20, T=10, seed=0, tol=0.02, mode="bootstrap"):
    """Mean filter log-marginal over ``runs`` repeats vs the exact forward value."""
    hmm = default_hmm()
    model = build_hmm_surrogate(hmm)
    ep = hmm_episode(hmm, T, np.random.default_rng(seed))
    exact = forward_log_marginal(hmm, ep.y)
    t0 = time.time()
    rng = np.random.default_rng(seed + 1)
    estimates = [filter_episodes(model, [ep], K, mode, rng=rng)[0].log_marginal for _ in range(runs)]
    mean = float(np.mean(estimates))
    rel = abs(mean - exact) / abs(exact)
    return {"exact": exact, "mean": mean, "std": float(np.std(estimates)), "relative_error": rel,
            "seconds": time.time() - t0, "passed": bool(rel <= tol)}


# ---------------------------------------------------------------------------
# finite differences


def relative_error(a, b, floor=1e-7):
    a, b = float(a), float(b)
    scale = max(abs(a), abs(b))
    if scale < floor:
        return 0.0
    return abs(a - b) / scale


def finite_difference_grads(fn, params, step=1e-3):
    """Central differences of scalar ``fn()`` w.r.t. every element of ``params`` (dict of tensors)."""
    out = {}
    with torch.no_grad():
        for name, p in params.items():
            g = torch.zeros_like(p)
            flat, gflat = p.view(-1), g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + step
                up = float(fn())
                flat[i] = orig - step
                down = float(fn())
                flat[i] = orig
                gflat[i] = (up - down) / (2 * step)
            out[name] = g
    return out


def compare_grads(analytic, numeric, tol):
    worst, failures, total = 0.0, 0, 0
    for name, g in numeric.items():
        a = analytic[name].reshape(-1)
        for ai, ni in zip(a.tolist(), g.reshape(-1).tolist()):
            err = relative_error(ai, ni)
            worst = max(worst, err)
            failures += err > tol
            total += 1
    return {"checked": total, "failures": int(failures), "max_relative_error": worst,
            "passed": failures == 0}


def gradient_toy(seed=0, T=3, K=8, B=2):
    """Two-module rule-style model with hidden width 4 and a fixed batch and noise draw."""
    cfg = ModelConfig.rule(n_modules=2, hidden_gating=4, hidden_module=4, d_x=2, d_y=2, w_init=0.8)
    rng = np.random.default_rng(seed)
    model = CompositionalModel.init(cfg, rng, seed).copy(torch.float64)
    for v in model.params.entries.values():
        if v.dim() and not v.abs().sum():
            v.copy_(torch.as_tensor(0.3 * rng.standard_normal(tuple(v.shape))))
    x = rng.standard_normal((B, T, cfg.d_x))
    y = rng.standard_normal((B, T, cfg.d_y))
    fb = np.ones((B, T), dtype=bool)
    noise = Noise.draw(rng, T, B, K, cfg.n_modules)
    return model, (x, y, fb), K, noise


def check_gradients(tol=1e-3, step=1e-3, seed=0):
    """Autograd loss gradient vs central differences on the float64 toy."""
    t0 = time.time()
    model, (x, y, fb), K, noise = gradient_toy(seed)

    def loss():
        return -filter_arrays(model, x, y, fb, K, "bootstrap", noise=noise).log_marginal.mean()

    model.params.requires_grad_(True)
    model.params.zero_grad()
    loss().backward()
    analytic = {n: v.grad.detach().clone() for n, v in model.params.entries.items()}
    model.params.requires_grad_(False)
    numeric = finite_difference_grads(loss, model.params.entries, step)
    result = compare_grads(analytic, numeric, tol)
    result["seconds"] = time.time() - t0
    return result


# ---------------------------------------------------------------------------
# resampling


RESAMPLING_CASES = (
    ((0.25, 0.25, 0.25, 0.25), 0.1, (0, 1, 2, 3)),
    ((0.7, 0.1, 0.1, 0.1), 0.2, (0, 0, 1, 3)),
)


def copy_count_sweep(weights):
    """Every distinct ``u`` regime for these weights; returns the worst copy-count violation."""
    w = np.asarray(weights, dtype=np.float64)
    K = len(w)
    bounds = np.concatenate([[0.0], np.cumsum(w)])
    # breakpoints where some grid point u + i/K crosses a boundary
    cuts = sorted({float(b - i / K) for b in bounds for i in range(K) if 0.0 <= b - i / K < 1.0 / K} | {0.0})
    cuts.append(1.0 / K)
    probes = []
    for lo, hi in zip(cuts[:-1], cuts[1:]):
        probes.append(lo)
        probes.append(0.5 * (lo + hi))
    violations = 0
    for u in probes:
        if not 0.0 <= u < 1.0 / K:
            continue
        counts = np.bincount(stratified_resample(w, u), minlength=K)
        lo_ok = counts >= np.floor(w * K - 1e-9)
        hi_ok = counts <= np.ceil(w * K + 1e-9)
        violations += int((~(lo_ok & hi_ok)).sum())
    return violations, len(probes)


def check_resampling(max_K=6, draws=200, seed=0):
    cases = []
    for weights, u, expected in RESAMPLING_CASES:
        got = tuple(int(i) for i in stratified_resample(weights, u))
        cases.append({"weights": weights, "u": u, "expected": expected, "got": got, "passed": got == expected})
    rng = np.random.default_rng(seed)
    violations, probes = 0, 0
    for K in range(2, max_K + 1):
        weight_sets = [np.full(K, 1.0 / K), np.eye(K)[0]]
        weight_sets += [rng.dirichlet(np.full(K, a)) for a in (0.3, 1.0, 5.0) for _ in range(draws // 3)]
        # exact multiples of 1/K put boundaries on the grid
        weight_sets += [rng.multinomial(K, np.full(K, 1.0 / K)) / K for _ in range(draws // 4)]
        for w in weight_sets:
            v, n = copy_count_sweep(w / w.sum())
            violations += v
            probes += n
    return {"cases": cases, "sweep_probes": probes, "sweep_violations": violations,
            "passed": all(c["passed"] for c in cases) and violations == 0}


CHECKS = {"hmm": check_hmm, "gradients": check_gradients, "resampling": check_resampling}


def run_checks(names=None):
    names = list(CHECKS) if not names else list(names)
    return {n: CHECKS[n]() for n in names}
