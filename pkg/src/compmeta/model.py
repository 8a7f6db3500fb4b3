"""The compositional generative model: a gating RNN choosing, at every step, which
of N module RNNs produces the output mean of an isotropic Gaussian."""

from dataclasses import asdict, dataclass, replace

import numpy as np
import torch
import torch.nn.functional as F

from . import nn
from .errors import ConfigVersionMismatch, ShapeMismatch
from .nn import LayerSpec

CONFIG_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    family: str = "rule"
    n_modules: int = 6
    hidden_gating: int = 32
    hidden_module: int = 32
    d_x: int = 6
    d_y: int = 6
    use_input: bool = True
    feed_prev_target: bool = True
    reset_hidden_on_switch: bool = False
    per_module_readout: bool = False
    uniform_gating: bool = False
    temperature: float = 1.0
    sigma_floor: float = 0.01
    sigma_init: float = 1.0
    w_init: float = 0.01

    def __post_init__(self):
        if self.n_modules < 2:
            raise ValueError("n_modules must be >= 2")
        if self.hidden_gating < 1 or self.hidden_module < 1:
            raise ValueError("hidden sizes must be >= 1")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.sigma_init <= self.sigma_floor:
            raise ValueError("sigma_init must exceed the sigma floor")

    @classmethod
    def rule(cls, **kw):
        return cls(**{"family": "rule", **kw})

    @classmethod
    def motor(cls, **kw):
        base = dict(family="motor", d_x=0, d_y=2, use_input=False, feed_prev_target=False,
                    reset_hidden_on_switch=True, per_module_readout=True, w_init=0.001)
        base.update(kw)
        return cls(**base)

    @classmethod
    def for_family(cls, family, **kw):
        if family == "rule":
            return cls.rule(**kw)
        if family == "motor":
            return cls.motor(**kw)
        raise ValueError(f"unknown task family {family!r}")

    @property
    def gating_input_dim(self):
        return self.module_input_dim + self.n_modules

    @property
    def module_input_dim(self):
        return self.d_x * self.use_input + self.d_y * self.feed_prev_target


@dataclass
class StepState:
    """Per-particle recurrent state, rows are particles."""

    g: torch.Tensor
    m: torch.Tensor
    z_prev: torch.Tensor
    z_id: torch.Tensor
    y_prev: torch.Tensor

    def index(self, idx):
        return StepState(self.g[idx], self.m[idx], self.z_prev[idx], self.z_id[idx], self.y_prev[idx])


def layer_specs(cfg):
    N, Hg, Hm = cfg.n_modules, cfg.hidden_gating, cfg.hidden_module
    specs = []
    if not cfg.uniform_gating:
        specs += [
            LayerSpec("gate.W_ih", "input", (Hg, cfg.gating_input_dim)),
            LayerSpec("gate.b_ih", "bias", (Hg,)),
            LayerSpec("gate.W_hh", "recurrent", (Hg, Hg)),
            LayerSpec("gate.b_hh", "bias", (Hg,)),
            LayerSpec("gate.W_out", "linear", (N, Hg)),
            LayerSpec("gate.g0", "hidden0", (Hg,)),
        ]
    specs += [
        LayerSpec("mod.W_ih", "input", (Hm, cfg.module_input_dim), stack=N),
        LayerSpec("mod.b_ih", "bias", (Hm,), stack=N),
        LayerSpec("mod.W_hh", "recurrent", (Hm, Hm), stack=N),
        LayerSpec("mod.b_hh", "bias", (Hm,), stack=N),
    ]
    if cfg.per_module_readout:
        specs.append(LayerSpec("mod.W_out", "linear", (cfg.d_y, Hm), stack=N))
    else:
        specs.append(LayerSpec("mod.W_out", "linear", (cfg.d_y, Hm)))
    specs.append(LayerSpec("mod.m0", "hidden0", (Hm,)))
    if cfg.reset_hidden_on_switch:
        specs.append(LayerSpec("mod.m0_z", "hidden0", (Hm,), stack=N))
    rho0 = nn.softplus_inverse(cfg.sigma_init - cfg.sigma_floor)
    specs.append(LayerSpec("rho", "const", (), value=rho0))
    return specs


class CompositionalModel:
    """Gating network + module bank + readouts + learnable noise.

    Parameters live in ``self.params`` (a :class:`~compmeta.nn.ParamStore`).
    """

    def __init__(self, config, params):
        self.config = config
        self.params = params
        self._check()

    @classmethod
    def init(cls, config, rng=None, seed=0):
        rng = rng if rng is not None else np.random.default_rng(seed)
        return cls(config, nn.init_params(layer_specs(config), config.w_init, rng, seed=seed))

    def _check(self):
        for spec in layer_specs(self.config):
            shape = (spec.stack,) + tuple(spec.shape) if spec.stack else tuple(spec.shape)
            if spec.name not in self.params:
                raise ShapeMismatch(f"missing parameter {spec.name}")
            if tuple(self.params[spec.name].shape) != shape:
                raise ShapeMismatch(f"{spec.name} has shape {tuple(self.params[spec.name].shape)}, expected {shape}")

    def copy(self, dtype=None):
        return CompositionalModel(self.config, self.params.copy(dtype))

    @property
    def dtype(self):
        return self.params["rho"].dtype

    def sigma(self):
        return self.config.sigma_floor + F.softplus(self.params["rho"])

    def initial_state(self, n):
        cfg, p = self.config, self.params
        dt = self.dtype
        if cfg.uniform_gating:
            g = torch.zeros(n, 0, dtype=dt)
        else:
            g = p["gate.g0"].expand(n, cfg.hidden_gating)
        m = p["mod.m0"].expand(n, cfg.hidden_module)
        z = torch.full((n, cfg.n_modules), 1.0 / cfg.n_modules, dtype=dt)
        z_id = torch.full((n,), -1, dtype=torch.long)
        y_prev = torch.zeros(n, cfg.d_y, dtype=dt)
        return StepState(g, m, z, z_id, y_prev)

    def _module_input(self, x, y_prev, n):
        cfg = self.config
        parts = []
        if cfg.use_input:
            if x is None:
                raise ShapeMismatch("this model needs an input x_t")
            parts.append(x)
        if cfg.feed_prev_target:
            parts.append(y_prev)
        if not parts:
            return torch.zeros(n, 0, dtype=self.dtype)
        return torch.cat(parts, dim=-1)

    def gating_step(self, x, y_prev, state):
        """Advance the gating RNN on [x, y_prev, z_prev]; return (g_next, logits)."""
        cfg, p = self.config, self.params
        n = state.z_prev.shape[0]
        if cfg.uniform_gating:
            return state.g, torch.zeros(n, cfg.n_modules, dtype=self.dtype)
        inp = torch.cat([self._module_input(x, y_prev, n), state.z_prev], dim=-1)
        g = nn.elman_step(p["gate.W_ih"], p["gate.b_ih"], p["gate.W_hh"], p["gate.b_hh"], inp, state.g)
        return g, g @ p["gate.W_out"].T

    def module_candidates(self, x, y_prev, m_prev, prev_id):
        """Advance every module; returns per-module hidden (P, N, H) and means (P, N, d_y).

        With hidden reset enabled a module that differs from the previously selected one
        starts from its own learnable initial state.
        """
        cfg, p = self.config, self.params
        n = m_prev.shape[0]
        inp = self._module_input(x, y_prev, n)
        start = m_prev
        if cfg.reset_hidden_on_switch:
            same = torch.arange(cfg.n_modules).unsqueeze(0) == prev_id.unsqueeze(1)
            start = torch.where(same.unsqueeze(-1), m_prev.unsqueeze(1), p["mod.m0_z"].unsqueeze(0))
        m_cand = nn.elman_bank_step(p["mod.W_ih"], p["mod.b_ih"], p["mod.W_hh"], p["mod.b_hh"], inp, start)
        W = p["mod.W_out"]
        if cfg.per_module_readout:
            mu_cand = torch.einsum("pnh,nyh->pny", m_cand, W)
        else:
            mu_cand = m_cand @ W.T
        return m_cand, mu_cand

    def module_step(self, activation, x, y_prev, m_prev, prev_id=None):
        """Activation-weighted module update; returns (m_next, mu)."""
        if activation.shape[-1] != self.config.n_modules:
            raise ShapeMismatch("activation must have one entry per module")
        if prev_id is None:
            prev_id = torch.full((m_prev.shape[0],), -1, dtype=torch.long)
        m_cand, mu_cand = self.module_candidates(x, y_prev, m_prev, prev_id)
        return combine(activation, m_cand, mu_cand)


def combine(activation, m_cand, mu_cand):
    a = activation.unsqueeze(-1)
    # Linear readouts commute with the weighted sum, so this matches W_M applied to m_next.
    return (a * m_cand).sum(1), (a * mu_cand).sum(1)


def sample_module(logits, temperature=1.0, rng=None, hard=False, u=None):
    """Gumbel-softmax draw from Cat(softmax(logits))."""
    return nn.gumbel_softmax(torch.log_softmax(logits, dim=-1), temperature, rng=rng, hard=hard, u=u)


@torch.no_grad()
def generate_episode(model, T, rng, inputs=None, hard=True):
    """Ancestral sample of (module ids, outputs) for one episode."""
    cfg = model.config
    if T < 1:
        raise ValueError("T must be >= 1")
    if cfg.use_input != (inputs is not None):
        raise ShapeMismatch("inputs must be given exactly when the model uses inputs")
    state = model.initial_state(1)
    sigma = model.sigma()
    z_seq = np.zeros(T, dtype=np.int64)
    y_seq = np.zeros((T, cfg.d_y))
    for t in range(T):
        x = torch.as_tensor(inputs[t:t + 1], dtype=model.dtype) if inputs is not None else None
        g, logits = model.gating_step(x, state.y_prev, state)
        a = sample_module(logits, cfg.temperature, rng=rng, hard=hard)
        m, mu = model.module_step(a, x, state.y_prev, state.m, state.z_id)
        eps = torch.as_tensor(rng.standard_normal((1, cfg.d_y)), dtype=model.dtype)
        y = mu + sigma * eps
        z_id = a.argmax(-1)
        z_seq[t] = int(z_id[0])
        y_seq[t] = y[0].numpy()
        state = StepState(g, m, a, z_id, y)
    return z_seq, y_seq


def save_model(model, path):
    meta = {"kind": "compositional", "config_version": CONFIG_VERSION, "config": asdict(model.config)}
    return nn.save_store(model.params, path, meta=meta)


def load_model(path, family=None):
    store, manifest = nn.load_store(path)
    meta = manifest.get("meta", {})
    if meta.get("kind") != "compositional" or meta.get("config_version") != CONFIG_VERSION:
        raise ConfigVersionMismatch(f"{path} does not hold a compositional model of version {CONFIG_VERSION}")
    config = ModelConfig(**meta["config"])
    if family is not None and config.family != family:
        raise ConfigVersionMismatch(f"{path} holds a {config.family} model, a {family} model was required")
    return CompositionalModel(config, store)


def with_config(model, **changes):
    """Same parameters under a modified config (only flags that keep shapes valid)."""
    return CompositionalModel(replace(model.config, **changes), model.params)
