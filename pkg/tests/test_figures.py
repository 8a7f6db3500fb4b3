import json

import numpy as np
import pytest

from compmeta import cli, figures
from compmeta.errors import IoFailure


def test_missing_metrics_names_the_artifact(tmp_path):
    (tmp_path / figures.RUN_MANIFEST).write_text(json.dumps({"command": "train"}))
    with pytest.raises(IoFailure, match="metrics.csv"):
        figures.emit_figures(tmp_path)


def test_empty_directory_lists_expected_artifacts(tmp_path):
    with pytest.raises(IoFailure, match="summary.json"):
        figures.emit_figures(tmp_path)


def test_learning_curves_are_deterministic(tmp_path):
    recs = [dict(iteration=i, train_loss=100.0 / i, task_mse=1.0 / i, module_accuracy=1 - 1 / i,
                 gating_accuracy=1 - 2 / (i + 1)) for i in range(1, 6)]
    for name in ("a", "b"):
        (tmp_path / name).mkdir()
    a = figures.learning_curves(recs, tmp_path / "a")
    b = figures.learning_curves(recs, tmp_path / "b")
    assert a.read_bytes() == b.read_bytes()
    assert (tmp_path / "a" / "learning_curves_plot.csv").exists()


def test_posterior_rows_validated(tmp_path):
    good = np.full((4, 6), 1 / 6)
    fb = np.array([True, False, True, True])
    figures.posterior_heatmap(good, fb, np.zeros(4, int), None, tmp_path)
    bad = good.copy()
    bad[2] *= 0.5
    with pytest.raises(ValueError):
        figures.posterior_heatmap(bad, fb, np.zeros(4, int), None, tmp_path)
    # rows away from feedback are not checked
    bad = good.copy()
    bad[1] = 0
    figures.posterior_heatmap(bad, fb, np.zeros(4, int), None, tmp_path)


def test_motor_infer_run_renders_paths_and_branches(tmp_path):
    assert cli.main(["oracle", "--fixture", "motor", "--out", str(tmp_path)]) == 0
    out = tmp_path / "inf"
    assert cli.main(["infer", "--model", str(tmp_path / "oracle_motor.json"), "--spec", "0,3,5",
                     "--sparse", "0.3", "--particles", "40", "--seed", "1", "--out", str(out)]) == 0
    svg = (out / "motor_paths.svg").read_bytes()
    rows = (out / "motor_paths_plot.csv").read_text().splitlines()
    kinds = {r.split(",")[0] for r in rows[1:]}
    assert {"target", "map"} <= kinds
    assert figures.emit_figures(out)
    assert (out / "motor_paths.svg").read_bytes() == svg


def test_branches_without_feedback_gaps_are_empty():
    particles = {"mu": np.zeros((3, 4, 2))}
    assert figures.hypothesis_branches(particles, np.ones(3, bool), np.zeros((3, 2))) == []
    fb = np.array([True, False, True])
    particles["mu"][1, :2] = 1.0
    branches = figures.hypothesis_branches(particles, fb, np.zeros((3, 2)))
    assert len(branches) == 2 and all(start == 1 for start, _ in branches)
