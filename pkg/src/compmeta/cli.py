"""``compmeta`` command line: train, infer, eval, probe, plot, gen and oracle.

Exit codes: 0 success, 1 failed oracle bound, 2 configuration or spec error,
3 training divergence, 4 degenerate particle weights, 5 I/O failure.
"""

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from . import figures, nn, oracles
from .controls import KINDS as CONTROL_KINDS
from .controls import ControlModel, load_control, save_control
from .errors import (ConfigVersionMismatch, DegenerateWeights, DivergenceDetected, IoFailure,
                     ManifestChecksumMismatch)
from .evaluation import (build_oracle_motor_model, build_oracle_rule_model, eval_mse, map_accuracy,
                         recovery_report)
from .experiments import INFER_PARTICLES, episode_set, inference_scores, zero_predictor_mse
from .model import CompositionalModel, load_model, save_model
from .rng import stream
from .smc import run_filter, write_summary, write_trace_csv
from .tasks import DatasetSplit, extend_spec, gen_episode, make_split, sparse_mask, validate_spec, write_episode_csv
from .train import TrainConfig, control_mse, train_control, train_primary

OUT_ENV = "COMPMETA_OUT"
EXIT_ORACLE, EXIT_CONFIG, EXIT_DIVERGED, EXIT_DEGENERATE, EXIT_IO = 1, 2, 3, 4, 5

log = logging.getLogger("compmeta")


class ConfigError(Exception):
    pass


def _version():
    try:
        from importlib.metadata import version

        return version("artifact")
    except Exception:  # not installed as a distribution
        from . import __version__

        return __version__


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _inventory(paths, root=None):
    out = []
    for p in sorted({Path(p) for p in paths}):
        if p.is_file():
            name = str(p.relative_to(root)) if root is not None and p.is_relative_to(root) else str(p)
            out.append({"path": name, "sha256": _sha256(p), "bytes": p.stat().st_size})
    return out


def write_run_manifest(out_dir, command, config, seed, inputs, started, timing=None):
    """List every file read and written (with checksums); timestamps live only here."""
    out_dir = Path(out_dir)
    path = out_dir / figures.RUN_MANIFEST
    outputs = [p for p in out_dir.rglob("*") if p.is_file() and p != path]
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "code_version": _version(),
        "inputs": _inventory(inputs),
        "outputs": _inventory(outputs, out_dir),
        "started": started,
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    if timing:
        manifest["timing"] = timing
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _now():
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


def _out_dir(args, default_name):
    if args.out:
        out = Path(args.out)
    else:
        out = Path(os.environ.get(OUT_ENV, "runs")) / default_name
    out.mkdir(parents=True, exist_ok=True)
    return out


def _parse_spec(text):
    try:
        return tuple(int(s) for s in text.split(","))
    except ValueError as exc:
        raise ConfigError(f"cannot parse task spec {text!r}") from exc


def _load_any(path):
    """A compositional model or a control model from a manifest file."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"model file not found: {path}")
    _, manifest = nn.load_store(path)
    if manifest.get("meta", {}).get("kind") == "control":
        return load_control(path)
    model = load_model(path)
    if model.config.uniform_gating:
        return ControlModel("uniform_gating", model=model)
    return model


# ---------------------------------------------------------------------------
# commands


def train_config_from_args(args):
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            cfg = TrainConfig.from_json(path)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"invalid config {path}: {exc}") from exc
        if args.task and cfg.task_family != args.task:
            raise ConfigError(f"config {path} is for the {cfg.task_family} task, not {args.task}")
    else:
        maker = TrainConfig.desk if args.desk else TrainConfig.paper
        cfg = maker(args.task or "rule")
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.iterations is not None:
        overrides["iterations"] = args.iterations
    if overrides:
        cfg = TrainConfig.from_dict({**cfg.to_dict(), **overrides})
    return cfg


def cmd_train(args):
    try:
        cfg = train_config_from_args(args)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if args.print_config:
        print(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
        return 0
    started = _now()
    kind = args.control or "primary"
    out = _out_dir(args, f"train-{cfg.task_family}-{kind}-seed{cfg.seed}")
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    split = make_split(cfg.n_test, cfg.split_seed)
    split.save(out / "split.json")
    inputs = [args.config] if args.config else []
    if args.control and args.control != "uniform_gating":
        control = ControlModel.init(args.control, cfg.model_config(), split.train, seed=cfg.seed)
        result = train_control(control, split, cfg, out_dir=out)
        save_control(result.model, out / "model.json")
        summary = {"train_mse": control_mse(result.model, episode_set(cfg.task_family, split.train, 64, cfg.seed)),
                   "test_mse": control_mse(result.model, episode_set(cfg.task_family, split.test, 64, cfg.seed))}
    else:
        mcfg = cfg.model_config(uniform_gating=(args.control == "uniform_gating"))
        model = CompositionalModel.init(mcfg, seed=cfg.seed)
        resume_from = args.resume
        if resume_from:
            inputs.append(resume_from)
        result = train_primary(model, split, cfg, out_dir=out, resume_from=resume_from,
                               progress=None if args.quiet else _progress)
        save_model(result.model, out / "model.json")
        summary, mp, tp = recovery_report(result.model)
        _write_probe(out, result.model, mp, tp, summary)
    write_summary(out / "summary.json", **summary)
    figures.emit_figures(out)
    write_run_manifest(out, "train", cfg.to_dict(), cfg.seed, inputs, started, timing=result.metrics.timings())
    print(json.dumps(summary, sort_keys=True))
    return 0


def _progress(rec):
    print(f"iter {rec['iteration']:6d}  loss {rec['train_loss']:9.3f}  mse {rec['task_mse']:8.4f}  "
          f"module {rec['module_accuracy']:.3f}  gating {rec['gating_accuracy']:.3f}", flush=True)


def _write_probe(out, model, mp, tp, report):
    out = Path(out)
    info = dict(report)
    info["family"] = model.config.family
    info["scores"] = [float(s) for s in mp.scores]
    (out / figures.PROBE_JSON).write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
    rows = []
    if model.config.family == "motor":
        header = ("module", "step", "dx", "dy")
        for j, r in enumerate(mp.responses):
            rows += [(j, s, repr(float(v[0])), repr(float(v[1]))) for s, v in enumerate(r)]
    else:
        header = ("module", "input", "output", "value")
        for j, r in enumerate(mp.responses):
            rows += [(j, i, k, repr(float(r[i, k]))) for i in range(r.shape[0]) for k in range(r.shape[1])]
    _csv(out / figures.PROBE_MODULES, header, rows)
    P = tp.probs
    trows = [(h + 1, i, k, repr(float(P[h, i, k]))) for h in range(P.shape[0])
             for i in range(P.shape[1]) for k in range(P.shape[2])]
    _csv(out / figures.PROBE_TRANSITIONS, ("depth", "previous", "next", "probability"), trows)


def _csv(path, header, rows):
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def cmd_probe(args):
    started = _now()
    model = _load_any(args.model)
    if isinstance(model, ControlModel):
        if model.kind != "uniform_gating":
            raise ConfigError("probes need a compositional model")
        model = model.model
    out = _out_dir(args, "probe")
    report, mp, tp = recovery_report(model)
    _write_probe(out, model, mp, tp, report)
    figures.emit_figures(out)
    write_run_manifest(out, "probe", {"model": str(args.model)}, None, [args.model], started)
    print(json.dumps(report, sort_keys=True))
    return 0


def cmd_infer(args):
    started = _now()
    model = _load_any(args.model)
    if isinstance(model, ControlModel):
        if model.kind != "uniform_gating":
            raise ConfigError("inference needs a compositional model")
        model = model.model
    family = model.config.family
    spec = _parse_spec(args.spec)
    try:
        spec = validate_spec(spec)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    rng = stream(args.seed, "infer", *spec)
    if args.extend > 1:
        spec = extend_spec(spec, args.extend, rng)
    ep = gen_episode(family, spec, rng, check=args.extend == 1)
    if not 0 < args.sparse <= 1:
        raise ConfigError("--sparse must lie in (0, 1]")
    if args.sparse < 1:
        ep = ep.with_feedback(sparse_mask(ep.T, args.sparse, rng))
    out = _out_dir(args, f"infer-{family}-{'-'.join(map(str, spec))}")
    report, mp, _ = recovery_report(model)
    perm = mp.permutation
    trace = run_filter(model, ep, args.particles, "bootstrap", rng=stream(args.seed, "infer-filter"))
    write_episode_csv(ep, out / figures.EPISODE)
    write_trace_csv(trace, out / figures.POSTERIOR, ep.z_true)
    np.savez(out / figures.PARTICLES, **{k: np.asarray(v) for k, v in trace.particles.items()})
    summary = {
        "family": family,
        "spec": list(spec),
        "T": int(ep.T),
        "particles": args.particles,
        "feedback_steps": int(ep.feedback.sum()),
        "log_marginal": trace.log_marginal,
        "map_accuracy": map_accuracy(trace, ep.z_true, perm),
        "map_sequence": [int(perm[z]) for z in trace.map_sequence],
        "map_mu": trace.map_mu.tolist(),
        "permutation": [int(p) for p in perm],
    }
    write_summary(out / figures.SUMMARY, **summary)
    figures.emit_figures(out)
    write_run_manifest(out, "infer", vars_clean(args), args.seed, [args.model], started)
    print(json.dumps({k: summary[k] for k in ("log_marginal", "map_accuracy", "map_sequence")}, sort_keys=True))
    return 0


def vars_clean(args):
    return {k: v for k, v in vars(args).items() if k != "func"}


def cmd_eval(args):
    started = _now()
    model = _load_any(args.model)
    split = DatasetSplit.load(args.split)
    out = _out_dir(args, "eval")
    inputs = [args.model, args.split]
    family = model.config.family if isinstance(model, CompositionalModel) else (
        model.model.config.family if model.model is not None else ("rule" if model.d_y == 6 else "motor"))
    res = {"family": family}
    sets = {"train": episode_set(family, split.train, args.episodes, args.seed, p=args.sparse),
            "test": episode_set(family, split.test, args.episodes, args.seed, p=args.sparse)}
    res["zero_predictor_mse"] = {k: zero_predictor_mse(v) for k, v in sets.items()}
    if isinstance(model, ControlModel) and model.kind != "uniform_gating":
        res["kind"] = model.kind
        res["mse"] = {k: eval_mse(model, v) for k, v in sets.items()}
    else:
        core = model.model if isinstance(model, ControlModel) else model
        res["kind"] = "uniform_gating" if isinstance(model, ControlModel) else "compositional"
        report, mp, _ = recovery_report(core)
        res.update(report)
        res["mse"] = {k: eval_mse(core, v, K=args.particles, seed=args.seed) for k, v in sets.items()}
        scores = inference_scores(core, sets["test"], K=args.particles, seed=args.seed, permutation=mp.permutation)
        res["test_map_accuracy"] = [float(a) for a in scores["map_accuracy"]]
        res["test_final_third_accuracy"] = [float(a) for a in scores["final_third"]]
        res["fraction_perfect"] = float(np.mean(scores["map_accuracy"] == 1.0))
    write_summary(out / "eval.json", **res)
    write_run_manifest(out, "eval", vars_clean(args), args.seed, inputs, started)
    print(json.dumps({k: v for k, v in res.items() if not isinstance(v, list)}, sort_keys=True))
    return 0


def cmd_plot(args):
    run = Path(args.run)
    if not run.is_dir():
        raise IoFailure(f"run directory not found: {run}")
    for p in figures.emit_figures(run):
        print(p)
    return 0


def cmd_gen(args):
    started = _now()
    out = _out_dir(args, f"gen-{args.task}")
    split = make_split(args.n_test, args.split_seed)
    split.save(out / "split.json")
    if args.spec:
        try:
            specs = [validate_spec(_parse_spec(args.spec))]
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    else:
        specs = split.test if args.which == "test" else split.train
    rng = stream(args.seed, "gen", args.task)
    for i in range(args.n):
        spec = specs[i % len(specs)]
        check = True
        if args.extend > 1:
            spec, check = extend_spec(spec, args.extend, rng), False
        ep = gen_episode(args.task, spec, rng, check=check)
        if args.sparse < 1:
            ep = ep.with_feedback(sparse_mask(ep.T, args.sparse, rng))
        write_episode_csv(ep, out / f"episode_{i:04d}_{'-'.join(map(str, spec))}.csv")
    write_run_manifest(out, "gen", vars_clean(args), args.seed, [], started)
    print(out)
    return 0


def cmd_oracle(args):
    if args.fixture:
        out = _out_dir(args, "oracle")
        model = build_oracle_rule_model() if args.fixture == "rule" else build_oracle_motor_model()
        path = save_model(model, out / f"oracle_{args.fixture}.json")
        print(path)
        return 0
    names = list(oracles.CHECKS) if args.check == "all" else [args.check]
    results = oracles.run_checks(names)
    ok = True
    for name, res in results.items():
        ok &= bool(res["passed"])
        print(f"{'PASS' if res['passed'] else 'FAIL'}  {name}: "
              + json.dumps({k: v for k, v in res.items() if k != "cases"}, sort_keys=True, default=str))
    return 0 if ok else EXIT_ORACLE


# ---------------------------------------------------------------------------
# parser


def build_parser():
    p = argparse.ArgumentParser(prog="compmeta", description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=int, default=None, help="cap on torch worker threads")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train the compositional model or a control")
    t.add_argument("--task", choices=("rule", "motor"))
    t.add_argument("--config", help="JSON file mirroring the training config")
    t.add_argument("--seed", type=int)
    t.add_argument("--iterations", type=int)
    t.add_argument("--desk", action="store_true", help="start from the scaled-down desk config")
    t.add_argument("--control", choices=CONTROL_KINDS)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--out")
    t.add_argument("--quiet", action="store_true")
    t.add_argument("--print-config", action="store_true", help="print the resolved config and exit")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="filter one test episode")
    i.add_argument("--model", required=True)
    i.add_argument("--spec", required=True, help='comma-separated ids, e.g. "1,4,2"')
    i.add_argument("--sparse", type=float, default=1.0, help="feedback probability per step")
    i.add_argument("--particles", type=int, default=INFER_PARTICLES)
    i.add_argument("--extend", type=int, default=1, help="lengthen the task by this factor")
    i.add_argument("--seed", type=int, default=0)
    i.add_argument("--out")
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="probes, MSE and MAP accuracy on a split")
    e.add_argument("--model", required=True)
    e.add_argument("--split", required=True)
    e.add_argument("--episodes", type=int, default=24)
    e.add_argument("--particles", type=int, default=INFER_PARTICLES)
    e.add_argument("--sparse", type=float, default=1.0)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    pr = sub.add_parser("probe", help="module and transition probes")
    pr.add_argument("--model", required=True)
    pr.add_argument("--out")
    pr.set_defaults(func=cmd_probe)

    pl = sub.add_parser("plot", help="regenerate figures for a run directory")
    pl.add_argument("--run", required=True)
    pl.set_defaults(func=cmd_plot)

    g = sub.add_parser("gen", help="write task episodes and the split")
    g.add_argument("--task", choices=("rule", "motor"), required=True)
    g.add_argument("--spec")
    g.add_argument("--n", type=int, default=8)
    g.add_argument("--which", choices=("train", "test"), default="test")
    g.add_argument("--n-test", type=int, default=24)
    g.add_argument("--split-seed", type=int, default=0)
    g.add_argument("--sparse", type=float, default=1.0)
    g.add_argument("--extend", type=int, default=1)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out")
    g.set_defaults(func=cmd_gen)

    o = sub.add_parser("oracle", help="run reference checks or write oracle fixture models")
    o.add_argument("--check", choices=tuple(oracles.CHECKS) + ("all",), default="all")
    o.add_argument("--fixture", choices=("rule", "motor"), help="write a hand-wired oracle model instead")
    o.add_argument("--out")
    o.set_defaults(func=cmd_oracle)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    if args.threads:
        torch.set_num_threads(args.threads)
    try:
        return args.func(args)
    except (ConfigError, ConfigVersionMismatch) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceDetected as exc:
        print(f"diverged: {exc} (last checkpoint: {exc.checkpoint})", file=sys.stderr)
        return EXIT_DIVERGED
    except DegenerateWeights as exc:
        print(f"degenerate weights: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except (IoFailure, ManifestChecksumMismatch) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
