"""Particle filtering over the compositional model.

Batches of episodes are filtered together: particle tensors have B*K rows, episode
``b`` owning rows ``b*K .. b*K+K-1``. Steps without feedback leave the weights alone
and skip resampling; their particles feed their own predicted mean forward as the
previous target.
"""

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from . import nn
from .errors import DegenerateWeights, GuidedWithoutFeedback, IoFailure, UnnormalizedWeights, UOutOfRange
from .model import combine
from .tasks import stack_episodes

MODES = ("bootstrap", "guided")


def stratified_resample(weights, u):
    """Ancestor indices for the grid ``u + i/K``: index k is returned for grid
    points with ``b_{k-1} <= b < b_k``, ``b_k`` the cumulative weights."""
    w = np.asarray(weights, dtype=np.float64)
    K = len(w)
    if abs(w.sum() - 1.0) > 1e-6 or (w < 0).any():
        raise UnnormalizedWeights(f"weights sum to {w.sum()!r}")
    if not 0.0 <= u < 1.0 / K:
        raise UOutOfRange(f"u={u!r} outside [0, 1/{K})")
    bounds = _snap(np.cumsum(w), K)
    grid = u + np.arange(K) / K
    return np.minimum(np.searchsorted(bounds, grid, side="right"), K - 1)


SNAP_TOL = 1e-9


def _snap(bounds, K):
    """Round cumulative weights lying within rounding error of a multiple of 1/K onto it,
    so that boundaries meant to coincide with grid points do not miss them by an ulp."""
    scaled = bounds * K
    near = np.round(scaled) if isinstance(bounds, np.ndarray) else torch.round(scaled)
    snapped = near / K
    out = np.where(np.abs(scaled - near) < SNAP_TOL, snapped, bounds) if isinstance(bounds, np.ndarray) \
        else torch.where((scaled - near).abs() < SNAP_TOL, snapped, bounds)
    out[..., -1] = 1.0
    return out


def _stratified_batch(weights, u):
    """Row-wise :func:`stratified_resample` for (B, K) weights and (B,) offsets."""
    B, K = weights.shape
    bounds = _snap(torch.cumsum(weights.double(), dim=1), K)
    grid = u.double().unsqueeze(1) + torch.arange(K, dtype=torch.float64) / K
    idx = torch.searchsorted(bounds, grid, right=True)
    return idx.clamp_(max=K - 1)


@dataclass
class StepRecord:
    z_id: torch.Tensor       # (B, K) module chosen by each pre-resampling particle
    ancestors: torch.Tensor  # (B, K) pre-resampling index of each post-resampling slot
    log_l: torch.Tensor      # (B, K) current-step log-likelihood (0 without feedback)
    feedback: torch.Tensor   # (B,)
    mu: torch.Tensor         # (B, K, d_y)


@dataclass
class ParticleSystem:
    B: int
    K: int
    state: object
    log_marginal: torch.Tensor
    history: list = field(default_factory=list)

    @classmethod
    def init(cls, model, B, K):
        if K < 2:
            raise ValueError("need at least two particles")
        return cls(B, K, model.initial_state(B * K), torch.zeros(B, dtype=model.dtype))


@dataclass
class Noise:
    """Pre-drawn uniforms for a filter run: gumbel (T, B, K, N) and resampling (T, B)."""

    gumbel: torch.Tensor
    resample: torch.Tensor

    @classmethod
    def draw(cls, rng, T, B, K, N):
        g = torch.as_tensor(rng.random((T, B, K, N)))
        r = torch.as_tensor(rng.random((T, B)) / K, dtype=torch.float64)
        return cls(g, r)


def _step(model, system, x_t, y_t, fb, gumbel_u, resample_u, hard, guided):
    cfg = model.config
    B, K = system.B, system.K
    P = B * K
    st = system.state
    dt = model.dtype
    if y_t is None:
        fb = torch.zeros(B, dtype=torch.bool)
        y_t = torch.zeros(B, cfg.d_y, dtype=dt)
    xr = x_t.repeat_interleave(K, 0) if x_t is not None else None
    yr = y_t.repeat_interleave(K, 0)
    fbr = fb.repeat_interleave(K)

    g, logits = model.gating_step(xr, st.y_prev, st)
    log_prior = torch.log_softmax(logits, dim=-1)
    m_cand, mu_cand = model.module_candidates(xr, st.y_prev, st.m, st.z_id)
    sigma = model.sigma()
    u = gumbel_u.reshape(P, cfg.n_modules)
    if guided:
        log_f = log_prior + nn.mvn_logpdf(yr.unsqueeze(1), mu_cand, sigma)
        proposal = torch.where(fbr.unsqueeze(1), log_f, log_prior)
        a = nn.gumbel_softmax(torch.log_softmax(proposal, dim=-1), cfg.temperature, hard=hard, u=u)
        m, mu = combine(a, m_cand, mu_cand)
        log_l = torch.where(fbr, torch.logsumexp(log_f, dim=-1), torch.zeros((), dtype=dt))
    else:
        a = nn.gumbel_softmax(log_prior, cfg.temperature, hard=hard, u=u)
        m, mu = combine(a, m_cand, mu_cand)
        log_l = torch.where(fbr, nn.mvn_logpdf(yr, mu, sigma), torch.zeros((), dtype=dt))
    log_l = log_l.view(B, K)

    finite = torch.isfinite(log_l.detach())
    if (fb & ~finite.any(dim=1)).any() or (fb.unsqueeze(1) & torch.isnan(log_l.detach())).any():
        raise DegenerateWeights("all particles have zero likelihood at a feedback step")

    step_lm = torch.logsumexp(log_l, dim=1) - math.log(K)
    system.log_marginal = system.log_marginal + torch.where(fb, step_lm, torch.zeros((), dtype=dt))

    w = torch.softmax(log_l.detach().double(), dim=1)
    idx = _stratified_batch(w, resample_u)
    idx = torch.where(fb.unsqueeze(1), idx, torch.arange(K).unsqueeze(0))
    flat = (idx + torch.arange(B).unsqueeze(1) * K).reshape(-1)

    z_id = a.detach().argmax(dim=-1)
    y_prev = torch.where(fbr.unsqueeze(1), yr, mu)
    new_state = type(st)(g, m, a, z_id, y_prev)
    system.state = new_state.index(flat)
    system.history.append(StepRecord(z_id.view(B, K), idx, log_l.detach(), fb, mu.detach().view(B, K, -1)))
    return system


def bootstrap_step(model, system, x_t, y_t, feedback=None, rng=None, hard=False, noise=None):
    """Propose modules from the gating prior, weight by the target likelihood.

    ``y_t`` None means no feedback for any episode at this step. ``noise`` is a
    ``(gumbel_u, resample_u)`` pair; otherwise both are drawn from ``rng``.
    """
    gu, ru = _noise_for(model, system, rng, noise)
    fb = _fb(system, y_t, feedback)
    return _step(model, system, x_t, y_t, fb, gu, ru, hard, guided=False)


def guided_step(model, system, x_t, y_t, feedback=None, rng=None, hard=False, noise=None):
    """Propose modules from prior x likelihood by enumerating every module.

    Training-time only: the current target must be observed.
    """
    fb = _fb(system, y_t, feedback)
    if y_t is None or not bool(fb.all()):
        raise GuidedWithoutFeedback("guided filtering needs the current target")
    gu, ru = _noise_for(model, system, rng, noise)
    return _step(model, system, x_t, y_t, fb, gu, ru, hard, guided=True)


def _fb(system, y_t, feedback):
    if feedback is None:
        return torch.full((system.B,), y_t is not None, dtype=torch.bool)
    return torch.as_tensor(feedback, dtype=torch.bool).reshape(system.B)


def _noise_for(model, system, rng, noise):
    if noise is not None:
        return noise
    if rng is None:
        raise ValueError("either rng or noise must be given")
    n = Noise.draw(rng, 1, system.B, system.K, model.config.n_modules)
    return n.gumbel[0], n.resample[0]


def filter_arrays(model, x, y, fb, K, mode="bootstrap", rng=None, hard=False, noise=None):
    """Run the filter over padded batches: x (B, T, d_x) or None, y (B, T, d_y), fb (B, T).

    Returns the final :class:`ParticleSystem`; ``system.log_marginal`` is differentiable.
    In guided mode steps without feedback (padding) fall back to the prior proposal.
    """
    if mode not in MODES:
        raise ValueError(f"unknown filter mode {mode!r}")
    dt = model.dtype
    y = torch.as_tensor(y, dtype=dt)
    fb = torch.as_tensor(fb, dtype=torch.bool)
    x = torch.as_tensor(x, dtype=dt) if x is not None else None
    B, T = fb.shape
    if noise is None:
        noise = Noise.draw(rng, T, B, K, model.config.n_modules)
    system = ParticleSystem.init(model, B, K)
    for t in range(T):
        x_t = x[:, t] if x is not None and model.config.use_input else None
        _step(model, system, x_t, y[:, t], fb[:, t], noise.gumbel[t], noise.resample[t], hard,
              guided=(mode == "guided"))
    return system


@dataclass
class PosteriorTrace:
    filtered: np.ndarray      # (T, N) module distribution over post-resampling particles
    map_sequence: np.ndarray  # (T,) traced back from the best final particle
    map_mu: np.ndarray        # (T, d_y) output means along the traced path
    log_marginal: float
    feedback: np.ndarray
    particles: dict = None    # raw history for plotting: z_id, ancestors, mu, log_l


def trace_from_history(system, b, T, n_modules):
    hist = system.history[:T]
    z = torch.stack([h.z_id[b] for h in hist]).numpy()
    anc = torch.stack([h.ancestors[b] for h in hist]).numpy()
    log_l = torch.stack([h.log_l[b] for h in hist]).numpy()
    mu = torch.stack([h.mu[b] for h in hist]).numpy()
    fb = torch.stack([h.feedback[b] for h in hist]).numpy()
    K = z.shape[1]
    filtered = np.zeros((T, n_modules))
    for t in range(T):
        filtered[t] = np.bincount(z[t, anc[t]], minlength=n_modules) / K
    path = np.zeros(T, dtype=np.int64)
    map_mu = np.zeros((T, mu.shape[2]))
    k = int(np.argmax(log_l[T - 1]))
    for t in range(T - 1, -1, -1):
        path[t] = z[t, k]
        map_mu[t] = mu[t, k]
        if t > 0:
            k = int(anc[t - 1, k])
    return PosteriorTrace(filtered, path, map_mu, float(system.log_marginal[b]), fb,
                          {"z_id": z, "ancestors": anc, "mu": mu, "log_l": log_l})


@torch.no_grad()
def filter_episodes(model, episodes, K, mode="bootstrap", rng=None, hard=True, noise=None):
    """Filter a list of episodes together; one :class:`PosteriorTrace` each."""
    if mode == "guided":
        for e in episodes:
            if not e.feedback.all():
                raise GuidedWithoutFeedback("guided filtering needs feedback at every step")
    x, y, fb, lengths = stack_episodes(episodes)
    system = filter_arrays(model, x, y, fb, K, mode, rng=rng, hard=hard, noise=noise)
    return [trace_from_history(system, b, int(T), model.config.n_modules) for b, T in enumerate(lengths)]


def run_filter(model, episode, K, mode="bootstrap", rng=None, hard=True, noise=None):
    return filter_episodes(model, [episode], K, mode, rng=rng, hard=hard, noise=noise)[0]


def training_loss(model, episodes, K, mode="bootstrap", rng=None, noise=None):
    """Mean negative log marginal likelihood estimate over a batch (soft activations)."""
    if not episodes:
        raise ValueError("empty batch")
    x, y, fb, _ = stack_episodes(episodes)
    system = filter_arrays(model, x, y, fb, K, mode, rng=rng, hard=False, noise=noise)
    return -system.log_marginal.mean()


def write_trace_csv(trace, path, z_true=None):
    N = trace.filtered.shape[1]
    header = ["t", "feedback"] + [f"p{i}" for i in range(N)] + ["map_id", "true_id"]
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for t in range(len(trace.map_sequence)):
                true_id = "" if z_true is None else int(z_true[t])
                w.writerow([t, int(trace.feedback[t])] + [repr(float(p)) for p in trace.filtered[t]]
                           + [int(trace.map_sequence[t]), true_id])
    except OSError as exc:
        raise IoFailure(f"cannot write posterior trace {path}: {exc}") from exc


def write_summary(path, **fields):
    try:
        with open(path, "w") as fh:
            json.dump(fields, fh, indent=2, sort_keys=True)
            fh.write("\n")
    except OSError as exc:
        raise IoFailure(f"cannot write summary {path}: {exc}") from exc
