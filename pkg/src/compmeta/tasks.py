"""Ground-truth task families.

Rule family: ``y_t = S_s(y_{t-1}) + x_t`` with cyclic 6D shifts, each shift held
for a fixed number of steps. Motor family: concatenated 2D translation skills.
"""

import csv
import itertools
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import IoFailure, RunLongerThanDuration

N_OPS = 6
RULE_DIM = 6
MOTOR_DIM = 2
DURATIONS = (3, 3, 4, 4, 5, 5)

# Motor skill table: start heading, per-step turn, magnitude ratio.
SKILL_THETA0_DEG = tuple(60.0 * z for z in range(N_OPS))
SKILL_TURN_DEG = tuple(20.0 if z % 2 == 0 else -20.0 for z in range(N_OPS))
SKILL_GAMMA = tuple(1.15 if z % 2 == 0 else 0.85 for z in range(N_OPS))
SKILL_RADIUS = 1.0


def validate_spec(spec, length=3):
    spec = tuple(int(s) for s in spec)
    if length is not None and len(spec) != length:
        raise ValueError(f"task spec must have {length} entries, got {spec}")
    if any(s < 0 or s >= N_OPS for s in spec):
        raise ValueError(f"task spec entries must lie in 0..{N_OPS - 1}: {spec}")
    if length == 3 and len(set(spec)) != len(spec):
        raise ValueError(f"task spec entries must be distinct: {spec}")
    if any(a == b for a, b in zip(spec, spec[1:])):
        raise ValueError(f"consecutive task spec entries must differ: {spec}")
    return spec


def all_specs():
    """All 120 ordered triples of distinct operations."""
    return list(itertools.permutations(range(N_OPS), 3))


def labels_for(spec):
    return np.concatenate([np.full(DURATIONS[s], s, dtype=np.int64) for s in spec])


@dataclass
class Episode:
    y: np.ndarray
    feedback: np.ndarray
    z_true: np.ndarray
    task: tuple
    x: np.ndarray = None

    @property
    def T(self):
        return len(self.y)

    def with_feedback(self, mask):
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != self.feedback.shape:
            raise ValueError("feedback mask length must equal T")
        return Episode(self.y, mask, self.z_true, self.task, self.x)


# ---------------------------------------------------------------------------
# rule family


def shift_apply(s, v):
    """Move entry i of ``v`` to entry (i + s) mod 6."""
    return np.roll(np.asarray(v), int(s), axis=-1)


def shift_matrix(s):
    """Row i holds ``shift_apply(s, e_i)``."""
    return np.stack([shift_apply(s, np.eye(RULE_DIM)[i]) for i in range(RULE_DIM)])


def gen_rule_episode(spec, rng, probe=False, check=True):
    spec = validate_spec(spec, length=3 if check else None)
    z = labels_for(spec)
    T = len(z)
    x = np.zeros((T, RULE_DIM)) if probe else rng.standard_normal((T, RULE_DIM))
    y = np.zeros((T, RULE_DIM))
    prev = np.zeros(RULE_DIM)
    for t in range(T):
        prev = shift_apply(z[t], prev) + x[t]
        y[t] = prev
    return Episode(y=y, feedback=np.ones(T, dtype=bool), z_true=z, task=spec, x=x)


# ---------------------------------------------------------------------------
# motor family


@dataclass(frozen=True)
class MotorSkill:
    id: int
    duration: int
    translations: np.ndarray


def gen_motor_skill(skill_id):
    skill_id = int(skill_id)
    if not 0 <= skill_id < N_OPS:
        raise ValueError(f"skill id must lie in 0..{N_OPS - 1}")
    d = DURATIONS[skill_id]
    theta0 = math.radians(SKILL_THETA0_DEG[skill_id])
    turn = math.radians(SKILL_TURN_DEG[skill_id])
    k = np.arange(d)
    mag = SKILL_RADIUS * SKILL_GAMMA[skill_id] ** k
    ang = theta0 + k * turn
    steps = np.stack([mag * np.cos(ang), mag * np.sin(ang)], axis=1)
    steps.setflags(write=False)
    return MotorSkill(skill_id, d, steps)


def gen_motor_episode(spec, check=True):
    spec = validate_spec(spec, length=3 if check else None)
    y = np.concatenate([gen_motor_skill(s).translations for s in spec])
    T = len(y)
    return Episode(y=y, feedback=np.ones(T, dtype=bool), z_true=labels_for(spec), task=spec, x=None)


def gen_episode(family, spec, rng=None, check=True):
    if family == "rule":
        return gen_rule_episode(spec, rng, check=check)
    if family == "motor":
        return gen_motor_episode(spec, check=check)
    raise ValueError(f"unknown task family {family!r}")


# ---------------------------------------------------------------------------
# splits, masks, long tasks


@dataclass
class DatasetSplit:
    train: list
    test: list
    seed: int

    def to_json(self):
        return json.dumps({"seed": self.seed, "train": [list(s) for s in self.train],
                           "test": [list(s) for s in self.test]}, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        return cls([tuple(s) for s in d["train"]], [tuple(s) for s in d["test"]], d["seed"])

    def save(self, path):
        try:
            Path(path).write_text(self.to_json() + "\n")
        except OSError as exc:
            raise IoFailure(f"cannot write split {path}: {exc}") from exc

    @classmethod
    def load(cls, path):
        try:
            return cls.from_json(Path(path).read_text())
        except OSError as exc:
            raise IoFailure(f"cannot read split {path}: {exc}") from exc


def make_split(n_test, seed):
    specs = all_specs()
    if not 1 <= n_test < len(specs):
        raise ValueError(f"n_test must lie in 1..{len(specs) - 1}")
    rng = np.random.default_rng(seed)
    held = set(rng.choice(len(specs), size=n_test, replace=False).tolist())
    train = [s for i, s in enumerate(specs) if i not in held]
    test = [s for i, s in enumerate(specs) if i in held]
    return DatasetSplit(train, test, seed)


def sparse_mask(T, p, rng):
    if not 0 < p <= 1:
        raise ValueError("feedback probability must lie in (0, 1]")
    mask = rng.random(T) < p
    mask[-1] = True
    return mask


def extend_spec(spec, factor, rng):
    """Continue ``spec`` to 3*factor entries, each differing from its predecessor."""
    if factor < 1:
        raise ValueError("factor must be >= 1")
    out = list(validate_spec(spec))
    while len(out) < 3 * factor:
        choices = [s for s in range(N_OPS) if s != out[-1]]
        out.append(int(rng.choice(choices)))
    return tuple(out)


def ground_truth_transitions(module, run_length):
    """Next-module distribution after ``run_length`` consecutive uses of ``module``."""
    d = DURATIONS[module]
    if run_length < 1:
        raise ValueError("run length must be >= 1")
    if run_length > d:
        raise RunLongerThanDuration(f"module {module} never runs longer than {d} steps")
    p = np.zeros(N_OPS)
    if run_length < d:
        p[module] = 1.0
    else:
        p[:] = 1.0 / (N_OPS - 1)
        p[module] = 0.0
    return p


# ---------------------------------------------------------------------------
# batching and serialisation


def stack_episodes(episodes):
    """Pad a list of episodes to a common length.

    Returns ``(x, y, feedback, lengths)`` with ``x`` None for input-free episodes;
    padded steps carry no feedback.
    """
    B = len(episodes)
    T = max(e.T for e in episodes)
    dy = episodes[0].y.shape[1]
    y = np.zeros((B, T, dy))
    fb = np.zeros((B, T), dtype=bool)
    has_x = episodes[0].x is not None
    x = np.zeros((B, T, episodes[0].x.shape[1])) if has_x else None
    for b, e in enumerate(episodes):
        y[b, :e.T] = e.y
        fb[b, :e.T] = e.feedback
        if has_x:
            x[b, :e.T] = e.x
    lengths = np.array([e.T for e in episodes])
    return x, y, fb, lengths


def write_episode_csv(episode, path):
    dx = 0 if episode.x is None else episode.x.shape[1]
    dy = episode.y.shape[1]
    header = ["t", "feedback", "z_true"] + [f"x{i}" for i in range(dx)] + [f"y{i}" for i in range(dy)]
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for t in range(episode.T):
                row = [t, int(episode.feedback[t]), int(episode.z_true[t])]
                if dx:
                    row += [repr(float(v)) for v in episode.x[t]]
                row += [repr(float(v)) for v in episode.y[t]]
                w.writerow(row)
    except OSError as exc:
        raise IoFailure(f"cannot write episode {path}: {exc}") from exc


def read_episode_csv(path, task=()):
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise IoFailure(f"cannot read episode {path}: {exc}") from exc
    header, body = rows[0], rows[1:]
    xi = [i for i, h in enumerate(header) if h.startswith("x")]
    yi = [i for i, h in enumerate(header) if h.startswith("y")]
    data = np.array([[float(v) for v in r] for r in body])
    x = data[:, xi] if xi else None
    return Episode(y=data[:, yi], feedback=data[:, 1].astype(bool),
                   z_true=data[:, 2].astype(np.int64), task=tuple(task), x=x)
