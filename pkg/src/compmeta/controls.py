"""Control models: a plain GRU, a GRU with task identity input, and the module bank
under a fixed uniform transition."""

from dataclasses import asdict, replace

import numpy as np
import torch

from . import nn
from .errors import ConfigVersionMismatch, MissingTaskId
from .model import CompositionalModel, ModelConfig
from .nn import LayerSpec
from .smc import filter_episodes
from .tasks import stack_episodes

KINDS = ("plain_rnn", "task_id_rnn", "uniform_gating")
CONTROL_HIDDEN = 7 * 32


class ControlModel:
    def __init__(self, kind, params=None, model=None, d_x=6, d_y=6, hidden=CONTROL_HIDDEN, tasks=()):
        if kind not in KINDS:
            raise ValueError(f"unknown control kind {kind!r}")
        self.kind = kind
        self.params = params
        self.model = model
        self.d_x, self.d_y, self.hidden = d_x, d_y, hidden
        self.tasks = [tuple(t) for t in tasks]

    @classmethod
    def init(cls, kind, config=None, train_tasks=(), hidden=CONTROL_HIDDEN, seed=0, w_init=None):
        config = config or ModelConfig.rule()
        rng = np.random.default_rng(seed)
        if kind == "uniform_gating":
            return cls(kind, model=CompositionalModel.init(replace(config, uniform_gating=True), rng, seed))
        tasks = list(train_tasks) if kind == "task_id_rnn" else []
        if kind == "task_id_rnn" and not tasks:
            raise MissingTaskId("a task identity control needs the list of training tasks")
        d_in = config.module_input_dim + len(tasks)
        specs = [
            LayerSpec("gru.W_ih", "input", (3 * hidden, d_in)),
            LayerSpec("gru.W_hh", "recurrent", (3 * hidden, hidden), blocks=3),
            LayerSpec("gru.b_ih", "bias", (3 * hidden,)),
            LayerSpec("gru.b_hh", "bias", (3 * hidden,)),
            LayerSpec("gru.h0", "hidden0", (hidden,)),
            LayerSpec("out.W", "linear", (config.d_y, hidden)),
            LayerSpec("out.b", "bias", (config.d_y,)),
        ]
        store = nn.init_params(specs, w_init or config.w_init, rng, seed=seed)
        d_x = config.d_x if config.use_input else 0
        return cls(kind, params=store, d_x=d_x, d_y=config.d_y, hidden=hidden, tasks=tasks)

    def task_onehot(self, spec):
        """One-hot identity of a training task; all zeros for tasks never trained on."""
        v = np.zeros(len(self.tasks))
        spec = tuple(spec)
        if spec in self.tasks:
            v[self.tasks.index(spec)] = 1.0
        return v


def rnn_predict(control, x, y, task=None):
    """Teacher-forced predictions (B, T, d_y) from inputs [x_t, y_{t-1}, task]."""
    p = control.params
    dt = p["out.W"].dtype
    y = torch.as_tensor(y, dtype=dt)
    B, T, _ = y.shape
    parts_const = []
    if control.kind == "task_id_rnn":
        if task is None:
            raise MissingTaskId("task identity input required")
        parts_const.append(torch.as_tensor(task, dtype=dt).reshape(B, -1))
    h = p["gru.h0"].expand(B, control.hidden)
    y_prev = torch.zeros(B, control.d_y, dtype=dt)
    gru = {k: p["gru." + k] for k in ("W_ih", "W_hh", "b_ih", "b_hh")}
    out = []
    for t in range(T):
        parts = []
        if control.d_x:
            parts.append(torch.as_tensor(x[:, t], dtype=dt))
        parts.append(y_prev)
        h = nn.gru_step(gru, torch.cat(parts + parts_const, dim=-1), h)
        out.append(h @ p["out.W"].T + p["out.b"])
        y_prev = y[:, t]
    return torch.stack(out, dim=1)


def control_forward(control, episode, task_id=None, K=250, rng=None):
    """Per-step predictions for one episode."""
    if control.kind == "uniform_gating":
        rng = rng if rng is not None else np.random.default_rng(0)
        return filter_episodes(control.model, [episode], K, rng=rng)[0].map_mu
    if control.kind == "task_id_rnn" and task_id is None:
        raise MissingTaskId("task_id_rnn needs a task identity")
    x = episode.x[None] if episode.x is not None else None
    task = None if task_id is None else np.asarray(task_id)[None]
    with torch.no_grad():
        return rnn_predict(control, x, episode.y[None], task)[0].double().numpy()


def predict_episodes(control, episodes):
    x, y, _, lengths = stack_episodes(episodes)
    task = None
    if control.kind == "task_id_rnn":
        task = np.stack([control.task_onehot(e.task) for e in episodes])
    with torch.no_grad():
        pred = rnn_predict(control, x, y, task).double().numpy()
    return [pred[b, :T] for b, T in enumerate(lengths)]


def save_control(control, path):
    from .model import save_model

    if control.kind == "uniform_gating":
        return save_model(control.model, path)
    meta = {"kind": "control", "control_kind": control.kind, "d_x": control.d_x, "d_y": control.d_y,
            "hidden": control.hidden, "tasks": [list(t) for t in control.tasks]}
    return nn.save_store(control.params, path, meta=meta)


def load_control(path):
    from .model import load_model

    store, manifest = nn.load_store(path)
    meta = manifest.get("meta", {})
    if meta.get("kind") == "compositional":
        model = load_model(path)
        if not model.config.uniform_gating:
            raise ConfigVersionMismatch(f"{path} holds a full compositional model, not a control")
        return ControlModel("uniform_gating", model=model)
    if meta.get("kind") != "control":
        raise ConfigVersionMismatch(f"{path} does not hold a control model")
    return ControlModel(meta["control_kind"], params=store, d_x=meta["d_x"], d_y=meta["d_y"],
                        hidden=meta["hidden"], tasks=meta["tasks"])


def describe(control):
    if control.kind == "uniform_gating":
        return {"kind": control.kind, "config": asdict(control.model.config)}
    return {"kind": control.kind, "hidden": control.hidden, "n_tasks": len(control.tasks)}
