"""Training loops: marginal-likelihood training through the particle filter for the
compositional model, MSE regression for the GRU controls."""

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch

from . import nn
from .controls import ControlModel, predict_episodes, rnn_predict
from .errors import ConfigVersionMismatch, DegenerateWeights, DivergenceDetected, IoFailure
from .evaluation import eval_mse, gating_accuracy, module_accuracy, probe_modules, probe_transitions
from .model import CompositionalModel, ModelConfig
from .rng import stream
from .smc import training_loss
from .tasks import gen_episode, stack_episodes

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    task_family: str = "rule"
    iterations: int = 20000
    batch_size: int = 512
    particles: int = 250
    lr: float = 3e-4
    clip_norm: float = 1.0
    w_init: float = 0.01
    temperature: float = 1.0
    filter_mode: str = "bootstrap"
    seed: int = 0
    checkpoint_every: int = 1000
    eval_every: int = 250
    hidden: int = 32
    n_test: int = 24
    split_seed: int = 0
    micro_batch: int = 128
    eval_episodes: int = 32
    eval_particles: int = 100

    def __post_init__(self):
        if self.task_family not in ("rule", "motor"):
            raise ValueError(f"unknown task family {self.task_family!r}")
        if self.filter_mode not in ("bootstrap", "guided"):
            raise ValueError(f"unknown filter mode {self.filter_mode!r}")
        for name in ("batch_size", "particles", "hidden", "eval_every", "n_test"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("iterations", "checkpoint_every", "micro_batch", "eval_episodes"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.lr <= 0 or self.clip_norm <= 0 or self.w_init <= 0 or self.temperature <= 0:
            raise ValueError("lr, clip_norm, w_init and temperature must be positive")

    @classmethod
    def paper(cls, family="rule", **kw):
        base = dict(task_family=family)
        if family == "motor":
            base.update(lr=1e-4, w_init=0.001, filter_mode="guided")
        base.update(kw)
        return cls(**base)

    @classmethod
    def desk(cls, family="rule", **kw):
        base = dict(iterations=5000, batch_size=128, particles=100, checkpoint_every=500, micro_batch=0)
        base.update(kw)
        return cls.paper(family, **base)

    def model_config(self, **kw):
        return ModelConfig.for_family(self.task_family, hidden_gating=self.hidden, hidden_module=self.hidden,
                                      w_init=self.w_init, temperature=self.temperature, **kw)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path):
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise IoFailure(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(json.loads(text))


@dataclass
class MetricsLog:
    records: list = field(default_factory=list)
    losses: list = field(default_factory=list)

    # wall_time stays in memory (and the run manifest) so that metric files are reproducible
    COLUMNS = ("iteration", "train_loss", "task_mse", "module_accuracy", "gating_accuracy")

    def append(self, **rec):
        if self.records and rec["iteration"] <= self.records[-1]["iteration"]:
            raise ValueError("metric iterations must increase")
        self.records.append(rec)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.COLUMNS)
            for r in self.records:
                w.writerow([r[c] if c == "iteration" else repr(float(r[c])) for c in self.COLUMNS])

    def reproducible_records(self):
        return [{k: r[k] for k in self.COLUMNS} for r in self.records]

    def timings(self):
        return [{"iteration": r["iteration"], "wall_time": r["wall_time"]} for r in self.records if "wall_time" in r]

    def write_losses(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "loss"])
            for i, v in enumerate(self.losses, start=1):
                w.writerow([i, repr(float(v))])

    @classmethod
    def read_csv(cls, path):
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        recs = [{k: (int(v) if k == "iteration" else float(v)) for k, v in r.items()} for r in rows]
        return cls(records=recs)


@dataclass
class TrainResult:
    model: object
    metrics: MetricsLog
    checkpoints: list


def sample_batch(config, split, iteration, tag="batch"):
    rng = stream(config.seed, "batch", tag, iteration)
    idx = rng.integers(0, len(split.train), size=config.batch_size)
    return [gen_episode(config.task_family, split.train[i], rng) for i in idx]


def evaluate_primary(model, config, split, iteration):
    mp = probe_modules(model)
    tp = probe_transitions(model)
    rng = stream(config.seed, "eval", iteration)
    mse = float("nan")
    if config.eval_episodes:
        idx = rng.integers(0, len(split.train), size=config.eval_episodes)
        eps = [gen_episode(config.task_family, split.train[i], rng) for i in idx]
        mse = eval_mse(model, eps, K=config.eval_particles, rng=rng)
    return {"task_mse": mse, "module_accuracy": module_accuracy(mp),
            "gating_accuracy": gating_accuracy(tp, mp.permutation)}


# ---------------------------------------------------------------------------
# checkpoints


def checkpoint(model, config, iteration, metrics, path):
    meta = {"kind": "compositional", "config_version": 1, "config": asdict(model.config),
            "train_config": config.to_dict(), "iteration": iteration,
            "metrics": metrics.reproducible_records(), "losses": [float(v) for v in metrics.losses]}
    return nn.save_store(model.params, path, meta=meta, include_optimizer=True)


def resume(path, config=None):
    """Load a checkpoint; returns (model, train config, iteration, metrics)."""
    store, manifest = nn.load_store(path)
    meta = manifest["meta"]
    saved = TrainConfig.from_dict(meta["train_config"])
    if config is not None and replace(saved, iterations=config.iterations) != config:
        raise ConfigVersionMismatch(f"checkpoint {path} was written with a different training config")
    model = CompositionalModel(ModelConfig(**meta["config"]), store)
    metrics = MetricsLog(records=meta["metrics"], losses=meta["losses"])
    return model, saved, meta["iteration"], metrics


# ---------------------------------------------------------------------------
# primary model


def _batch_loss_and_grads(model, config, episodes, iteration):
    B = len(episodes)
    mb = config.micro_batch or B
    total = 0.0
    model.params.zero_grad()
    for start in range(0, B, mb):
        chunk = episodes[start:start + mb]
        rng = stream(config.seed, "filter", iteration, start)
        loss = training_loss(model, chunk, config.particles, config.filter_mode, rng=rng)
        (loss * (len(chunk) / B)).backward()
        total += float(loss.detach()) * len(chunk) / B
    return total, model.params.grads()


def train_primary(model, split, config, out_dir=None, resume_from=None, progress=None):
    """Marginal-likelihood training; returns a :class:`TrainResult`.

    ``out_dir`` receives checkpoints, ``metrics.csv`` and ``losses.csv``.
    """
    if model.config.family != config.task_family:
        raise ConfigVersionMismatch("model family does not match the training task family")
    start_it = 0
    metrics = MetricsLog()
    if resume_from is not None:
        model, _, start_it, metrics = resume(resume_from, config)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    checkpoints = []
    last_good = resume_from
    model.params.requires_grad_(True)
    t0 = time.time()
    window = []
    for it in range(start_it, config.iterations):
        episodes = sample_batch(config, split, it)
        try:
            loss, grads = _batch_loss_and_grads(model, config, episodes, it)
        except DegenerateWeights as exc:
            raise DivergenceDetected(f"degenerate particle weights at iteration {it + 1}", it + 1, last_good) from exc
        if not math.isfinite(loss) or any(not torch.isfinite(g).all() for g in grads.values()):
            raise DivergenceDetected(f"non-finite loss at iteration {it + 1}", it + 1, last_good)
        grads = nn.clip_global_norm(grads, config.clip_norm)
        nn.adam_step(model.params, grads, config.lr)
        metrics.losses.append(loss)
        window.append(loss)
        done = it + 1
        if done % config.eval_every == 0 or done == config.iterations:
            rec = evaluate_primary(model, config, split, done)
            metrics.append(iteration=done, train_loss=float(np.mean(window)), wall_time=time.time() - t0, **rec)
            window = []
            log.info("iter %d loss %.3f mse %.4f mod %.3f gate %.3f", done, metrics.records[-1]["train_loss"],
                     rec["task_mse"], rec["module_accuracy"], rec["gating_accuracy"])
            if progress is not None:
                progress(metrics.records[-1])
        if out is not None and config.checkpoint_every and (done % config.checkpoint_every == 0 or done == config.iterations):
            path = checkpoint(model, config, done, metrics, out / f"ckpt_{done:06d}.json")
            checkpoints.append(path)
            last_good = path
    model.params.requires_grad_(False)
    if out is not None:
        metrics.write_csv(out / "metrics.csv")
        metrics.write_losses(out / "losses.csv")
    return TrainResult(model, metrics, checkpoints)


# ---------------------------------------------------------------------------
# controls


def control_mse(control, episodes):
    preds = predict_episodes(control, episodes)
    return float(np.mean([((p - e.y) ** 2)[e.feedback].mean() for p, e in zip(preds, episodes)]))


def train_control(control, split, config, out_dir=None):
    """Teacher-forced MSE training of a GRU control (plain or with task identity)."""
    if control.kind == "uniform_gating":
        return train_primary(control.model, split, config, out_dir=out_dir)
    params = control.params
    params.requires_grad_(True)
    metrics = MetricsLog()
    t0 = time.time()
    window = []
    for it in range(config.iterations):
        episodes = sample_batch(config, split, it, tag="control")
        x, y, fb, _ = stack_episodes(episodes)
        task = None
        if control.kind == "task_id_rnn":
            task = np.stack([control.task_onehot(e.task) for e in episodes])
        params.zero_grad()
        pred = rnn_predict(control, x, y, task)
        mask = torch.as_tensor(fb, dtype=pred.dtype).unsqueeze(-1)
        target = torch.as_tensor(y, dtype=pred.dtype)
        loss = (((pred - target) ** 2) * mask).sum() / (mask.sum() * control.d_y)
        loss.backward()
        value = float(loss.detach())
        if not math.isfinite(value):
            raise DivergenceDetected(f"non-finite control loss at iteration {it + 1}", it + 1)
        nn.adam_step(params, nn.clip_global_norm(params.grads(), config.clip_norm), config.lr)
        metrics.losses.append(value)
        window.append(value)
        done = it + 1
        if done % config.eval_every == 0 or done == config.iterations:
            metrics.append(iteration=done, train_loss=float(np.mean(window)), task_mse=float(np.mean(window)),
                           module_accuracy=float("nan"), gating_accuracy=float("nan"), wall_time=time.time() - t0)
            window = []
    params.requires_grad_(False)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        metrics.write_csv(Path(out_dir) / "metrics.csv")
    return TrainResult(control, metrics, [])
