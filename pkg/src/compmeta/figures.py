"""SVG figures (with the plotted data as CSV alongside) for training, probe and inference runs.

Output is byte-deterministic: fixed SVG hash salt, no date metadata, and data
written with ``repr`` floats in a fixed column order.
"""

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .errors import IoFailure  # noqa: E402

METRICS = "metrics.csv"
PROBE_JSON = "probe.json"
PROBE_MODULES = "probe_modules.csv"
PROBE_TRANSITIONS = "probe_transitions.csv"
EPISODE = "episode.csv"
POSTERIOR = "posterior.csv"
PARTICLES = "particles.npz"
SUMMARY = "summary.json"
RUN_MANIFEST = "manifest.json"

REQUIRED = {
    "train": (METRICS,),
    "probe": (PROBE_JSON, PROBE_MODULES, PROBE_TRANSITIONS),
    "infer": (EPISODE, POSTERIOR, SUMMARY),
}

plt.rcParams.update({"svg.hashsalt": "compmeta", "svg.fonttype": "none", "font.size": 8})


def _save(fig, path):
    try:
        fig.savefig(path, format="svg", metadata={"Date": None})
    except OSError as exc:
        raise IoFailure(f"cannot write figure {path}: {exc}") from exc
    finally:
        plt.close(fig)
    return Path(path)


def _write_rows(path, header, rows):
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for r in rows:
                w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])
    except OSError as exc:
        raise IoFailure(f"cannot write figure data {path}: {exc}") from exc


def _read_csv(path):
    try:
        with open(path, newline="") as fh:
            return list(csv.DictReader(fh))
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# individual figures


def learning_curves(records, out_dir):
    out_dir = Path(out_dir)
    it = np.array([r["iteration"] for r in records], dtype=float)
    cols = ("train_loss", "task_mse", "module_accuracy", "gating_accuracy")
    data = {c: np.array([float(r[c]) for r in records]) for c in cols}
    _write_rows(out_dir / "learning_curves_plot.csv", ("iteration",) + cols,
                [[int(i)] + [data[c][k] for c in cols] for k, i in enumerate(it)])
    fig, axes = plt.subplots(1, 2, figsize=(7, 2.6))
    axes[0].plot(it, data["train_loss"], color="k", label="-log marginal")
    axes[0].set_xlabel("iteration")
    axes[0].set_ylabel("training loss")
    ax2 = axes[0].twinx()
    ax2.plot(it, data["task_mse"], color="tab:red", label="MSE")
    ax2.set_ylabel("task MSE", color="tab:red")
    axes[1].plot(it, data["module_accuracy"], label="module")
    axes[1].plot(it, data["gating_accuracy"], label="gating")
    axes[1].set_ylim(-0.2, 1.05)
    axes[1].set_xlabel("iteration")
    axes[1].set_ylabel("accuracy")
    axes[1].legend(frameon=False)
    fig.tight_layout()
    return _save(fig, out_dir / "learning_curves.svg")


def probe_heatmaps(responses, permutation, family, out_dir):
    """Rule: one 6x6 response matrix per module; motor: each module's rollout path."""
    out_dir = Path(out_dir)
    responses = np.asarray(responses)
    order = np.argsort(permutation)  # learned modules sorted by assigned operation
    N = responses.shape[0]
    fig, axes = plt.subplots(1, N, figsize=(1.3 * N, 1.6))
    rows = []
    for col, j in enumerate(order):
        ax = axes[col]
        r = responses[j]
        if family == "motor":
            path = np.vstack([np.zeros(2), np.cumsum(r, axis=0)])
            ax.plot(path[:, 0], path[:, 1], color="0.4", marker=".", lw=0.8)
            ax.set_aspect("equal")
            for s, step in enumerate(r):
                rows.append([int(j), int(permutation[j]), s, step[0], step[1]])
        else:
            ax.imshow(r.T, cmap="RdBu_r", vmin=-1, vmax=1)
            for i in range(r.shape[0]):
                for k in range(r.shape[1]):
                    rows.append([int(j), int(permutation[j]), i, k, r[i, k]])
        ax.set_title(f"m{j} -> S{permutation[j]}")
        ax.set_xticks([])
        ax.set_yticks([])
    header = ("module", "operation", "step", "dx", "dy") if family == "motor" else \
        ("module", "operation", "input", "output", "value")
    _write_rows(out_dir / "probe_modules_plot.csv", header, rows)
    fig.tight_layout()
    return _save(fig, out_dir / "probe_modules.svg")


def transition_heatmaps(probs, permutation, out_dir):
    """probs (depth, N, N) in learned labels, shown reordered to operation labels."""
    out_dir = Path(out_dir)
    probs = np.asarray(probs)
    inv = np.argsort(permutation)
    P = probs[:, inv][:, :, inv]
    D, N, _ = P.shape
    fig, axes = plt.subplots(1, D, figsize=(1.5 * D, 1.7))
    rows = []
    for h in range(D):
        axes[h].imshow(P[h], cmap="Greys", vmin=0, vmax=1)
        axes[h].set_title(f"after {h + 1}")
        axes[h].set_xticks([])
        axes[h].set_yticks([])
        for i in range(N):
            for k in range(N):
                rows.append([h + 1, i, k, P[h, i, k]])
    _write_rows(out_dir / "transitions_plot.csv", ("depth", "previous", "next", "probability"), rows)
    fig.tight_layout()
    return _save(fig, out_dir / "transitions.svg")


def posterior_heatmap(filtered, feedback, map_ids, true_ids, out_dir, permutation=None):
    out_dir = Path(out_dir)
    filtered = np.asarray(filtered, dtype=np.float64)
    feedback = np.asarray(feedback, dtype=bool)
    sums = filtered[feedback].sum(axis=1)
    if len(sums) and np.abs(sums - 1.0).max() > 1e-6:
        raise ValueError("posterior rows at feedback steps must sum to 1")
    map_ids = np.asarray(map_ids)
    if permutation is not None:
        inv = np.argsort(permutation)
        filtered = filtered[:, inv]
        map_ids = np.asarray(permutation)[map_ids]
    T, N = filtered.shape
    fig, ax = plt.subplots(figsize=(max(3.0, 0.22 * T), 1.8))
    ax.imshow(filtered.T, cmap="Greys", vmin=0, vmax=1, aspect="auto")
    ax.scatter(np.arange(T), map_ids, s=9, color="tab:red", zorder=3, label="MAP")
    if true_ids is not None:
        ax.scatter(np.arange(T), true_ids, s=30, facecolors="none", edgecolors="tab:blue", lw=0.7,
                   zorder=2, label="truth")
    for t in np.flatnonzero(feedback):
        ax.axvline(t, ymin=0.97, ymax=1.0, color="tab:green", lw=2)
    ax.set_xlabel("timestep")
    ax.set_ylabel("module")
    ax.legend(frameon=False, fontsize=6, loc="upper right")
    fig.tight_layout()
    rows = [[t, int(feedback[t])] + list(filtered[t]) + [int(map_ids[t]), "" if true_ids is None else int(true_ids[t])]
            for t in range(T)]
    _write_rows(out_dir / "posterior_plot.csv", ["t", "feedback"] + [f"p{i}" for i in range(N)] + ["map_id", "true_id"],
                rows)
    return _save(fig, out_dir / "posterior.svg")


def hypothesis_branches(particles, feedback, map_mu):
    """Per no-feedback stretch, each particle's own continuation from the MAP position.

    Between feedback steps nothing is resampled, so slot k keeps its lineage and its
    predicted translations trace the hypothesis it is testing.
    """
    mu = np.asarray(particles["mu"])
    feedback = np.asarray(feedback, dtype=bool)
    anchor = np.vstack([np.zeros(mu.shape[2]), np.cumsum(map_mu, axis=0)])
    branches = []
    T = len(feedback)
    t = 0
    while t < T:
        if feedback[t]:
            t += 1
            continue
        start = t
        while t < T and not feedback[t]:
            t += 1
        stop = min(t + 1, T)  # include the step where feedback returns
        seen = set()
        for k in range(mu.shape[1]):
            seg = mu[start:stop, k]
            key = tuple(np.round(seg, 6).ravel())
            if key in seen:
                continue
            seen.add(key)
            branches.append((start, anchor[start] + np.vstack([np.zeros(mu.shape[2]), np.cumsum(seg, axis=0)])))
    return branches


def motor_paths(y, map_mu, feedback, particles, out_dir):
    out_dir = Path(out_dir)
    y = np.asarray(y, dtype=np.float64)
    true_path = np.vstack([np.zeros(2), np.cumsum(y, axis=0)])
    map_path = np.vstack([np.zeros(2), np.cumsum(map_mu, axis=0)])
    branches = hypothesis_branches(particles, feedback, map_mu) if particles is not None else []
    fig, ax = plt.subplots(figsize=(3, 3))
    ax.plot(true_path[:, 0], true_path[:, 1], color="0.6", lw=4, label="target", solid_capstyle="round")
    for _, b in branches:
        ax.plot(b[:, 0], b[:, 1], color="tab:orange", lw=0.6, ls=":")
    ax.plot(map_path[:, 0], map_path[:, 1], color="k", lw=1, marker=".", ms=3, label="MAP")
    fb = np.flatnonzero(np.asarray(feedback, dtype=bool))
    ax.scatter(true_path[fb + 1, 0], true_path[fb + 1, 1], s=12, color="tab:green", zorder=3, label="feedback")
    ax.set_aspect("equal")
    ax.legend(frameon=False, fontsize=6)
    fig.tight_layout()
    rows = [["target", 0, t, p[0], p[1]] for t, p in enumerate(true_path)]
    rows += [["map", 0, t, p[0], p[1]] for t, p in enumerate(map_path)]
    for n, (start, b) in enumerate(branches):
        rows += [["hypothesis", n + 1, start + t, p[0], p[1]] for t, p in enumerate(b)]
    _write_rows(out_dir / "motor_paths_plot.csv", ("kind", "branch", "t", "x", "y"), rows)
    return _save(fig, out_dir / "motor_paths.svg")


# ---------------------------------------------------------------------------
# run directories


def run_kind(run_dir):
    run_dir = Path(run_dir)
    manifest = run_dir / RUN_MANIFEST
    if manifest.exists():
        try:
            kind = json.loads(manifest.read_text()).get("command")
        except (OSError, json.JSONDecodeError) as exc:
            raise IoFailure(f"cannot read run manifest {manifest}: {exc}") from exc
        if kind in REQUIRED:
            return kind
    for kind, names in REQUIRED.items():
        if (run_dir / names[0]).exists():
            return kind
    raise IoFailure(f"{run_dir} holds no recognised run artifact (expected one of "
                    f"{', '.join(sorted(n for names in REQUIRED.values() for n in names))})")


def _require(run_dir, kind):
    missing = [n for n in REQUIRED[kind] if not (Path(run_dir) / n).exists()]
    if missing:
        raise IoFailure(f"missing artifact(s) in {run_dir}: {', '.join(missing)}")


def _load_probe(run_dir):
    info = json.loads((run_dir / PROBE_JSON).read_text())
    perm = np.array(info["permutation"])
    family = info["family"]
    rows = _read_csv(run_dir / PROBE_MODULES)
    N = len(perm)
    if family == "motor":
        steps = max(int(r["step"]) for r in rows) + 1
        resp = np.zeros((N, steps, 2))
        for r in rows:
            resp[int(r["module"]), int(r["step"])] = (float(r["dx"]), float(r["dy"]))
    else:
        d = max(int(r["input"]) for r in rows) + 1
        resp = np.zeros((N, d, d))
        for r in rows:
            resp[int(r["module"]), int(r["input"]), int(r["output"])] = float(r["value"])
    trows = _read_csv(run_dir / PROBE_TRANSITIONS)
    D = max(int(r["depth"]) for r in trows)
    probs = np.zeros((D, N, N))
    for r in trows:
        probs[int(r["depth"]) - 1, int(r["previous"]), int(r["next"])] = float(r["probability"])
    return family, resp, perm, probs


def emit_figures(run_dir, out_dir=None):
    """Render every figure a run directory supports; returns the written SVG paths."""
    run_dir = Path(run_dir)
    out_dir = Path(out_dir) if out_dir is not None else run_dir
    kind = run_kind(run_dir)
    _require(run_dir, kind)
    written = []
    if kind == "train":
        rows = _read_csv(run_dir / METRICS)
        records = [{k: (int(v) if k == "iteration" else float(v)) for k, v in r.items()} for r in rows]
        written.append(learning_curves(records, out_dir))
        if (run_dir / PROBE_JSON).exists():
            kind = "probe"
    if kind == "probe":
        family, resp, perm, probs = _load_probe(run_dir)
        written.append(probe_heatmaps(resp, perm, family, out_dir))
        written.append(transition_heatmaps(probs, perm, out_dir))
    if kind == "infer":
        summary = json.loads((run_dir / SUMMARY).read_text())
        rows = _read_csv(run_dir / POSTERIOR)
        N = sum(1 for k in rows[0] if k.startswith("p") and k[1:].isdigit())
        filtered = np.array([[float(r[f"p{i}"]) for i in range(N)] for r in rows])
        feedback = np.array([r["feedback"] == "1" for r in rows])
        map_ids = np.array([int(r["map_id"]) for r in rows])
        true_ids = np.array([int(r["true_id"]) for r in rows]) if rows[0]["true_id"] != "" else None
        perm = summary.get("permutation")
        written.append(posterior_heatmap(filtered, feedback, map_ids, true_ids, out_dir, perm))
        if summary.get("family") == "motor":
            ep = _read_csv(run_dir / EPISODE)
            y = np.array([[float(r["y0"]), float(r["y1"])] for r in ep])
            particles = None
            if (run_dir / PARTICLES).exists():
                with np.load(run_dir / PARTICLES) as z:
                    particles = {k: z[k] for k in z.files}
            map_mu = np.asarray(summary["map_mu"])
            written.append(motor_paths(y, map_mu, feedback, particles, out_dir))
    return written
