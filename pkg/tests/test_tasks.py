import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from compmeta import tasks
from compmeta.errors import RunLongerThanDuration

specs3 = st.permutations(range(6)).map(lambda p: tuple(p[:3]))


def test_shift_identity_and_example():
    v = np.arange(6.0)
    assert np.array_equal(tasks.shift_apply(0, v), v)
    assert np.array_equal(tasks.shift_apply(2, np.eye(6)[0]), np.eye(6)[2])


@given(st.integers(0, 5), st.lists(st.floats(-5, 5), min_size=6, max_size=6))
def test_shift_moves_entry_i_to_i_plus_s(s, v):
    v = np.array(v)
    out = tasks.shift_apply(s, v)
    for i in range(6):
        assert out[(i + s) % 6] == v[i]
    assert np.array_equal(tasks.shift_apply(3, tasks.shift_apply(3, v)), v)


def test_rule_episode_labels_example(rng):
    ep = tasks.gen_rule_episode((1, 4, 2), rng)
    assert ep.T == 12
    assert ep.z_true.tolist() == [1, 1, 1, 4, 4, 4, 4, 4, 2, 2, 2, 2]
    assert ep.feedback.all()


def test_rule_episode_probe_mode_is_pure_shift(rng):
    ep = tasks.gen_rule_episode((1, 4, 2), rng, probe=True)
    assert np.array_equal(ep.x, np.zeros_like(ep.x))
    assert np.array_equal(ep.y, np.zeros_like(ep.y))  # y0 = 0 stays 0 under shifts


@settings(max_examples=60, deadline=None)
@given(specs3, st.integers(0, 2**31))
def test_rule_recursion_holds_exactly(spec, seed):
    ep = tasks.gen_rule_episode(spec, np.random.default_rng(seed))
    prev = np.zeros(6)
    for t in range(ep.T):
        assert np.allclose(ep.y[t] - ep.x[t], tasks.shift_apply(ep.z_true[t], prev), rtol=0, atol=1e-12)
        prev = ep.y[t]
    assert ep.T == sum(tasks.DURATIONS[s] for s in spec)
    assert 10 <= ep.T <= 14


def test_rule_inputs_are_standard_normal():
    rng = np.random.default_rng(0)
    xs = np.concatenate([tasks.gen_rule_episode((0, 1, 2), rng).x for _ in range(10_000)])
    n = len(xs)
    assert np.all(np.abs(xs.mean(0)) < 3 / math.sqrt(n))
    assert np.all(np.abs(xs.var(0) - 1) < 3 * math.sqrt(2 / n))


def test_motor_skill_zero_first_step():
    assert np.allclose(tasks.gen_motor_skill(0).translations[0], [1.0, 0.0])


@pytest.mark.parametrize("z", range(6))
def test_motor_skill_geometry(z):
    sk = tasks.gen_motor_skill(z)
    assert sk.duration == tasks.DURATIONS[z]
    ang = np.unwrap(np.arctan2(sk.translations[:, 1], sk.translations[:, 0]))
    turn = math.radians(20 if z % 2 == 0 else -20)
    assert np.allclose(np.diff(ang), turn)
    mag = np.linalg.norm(sk.translations, axis=1)
    assert np.allclose(mag[1:] / mag[:-1], 1.15 if z % 2 == 0 else 0.85)
    assert math.isclose(math.degrees(ang[0]) % 360, 60 * z, abs_tol=1e-9)


def test_motor_episode():
    ep = tasks.gen_motor_episode((0, 2, 4))
    assert ep.T == 12 and ep.x is None
    assert np.array_equal(ep.y[:3], tasks.gen_motor_skill(0).translations)
    assert np.array_equal(ep.y, tasks.gen_motor_episode((0, 2, 4)).y)
    assert ep.z_true.tolist() == [0] * 3 + [2] * 4 + [4] * 5


def test_spec_validation():
    with pytest.raises(ValueError):
        tasks.validate_spec((1, 1, 2))
    with pytest.raises(ValueError):
        tasks.validate_spec((1, 2))
    with pytest.raises(ValueError):
        tasks.validate_spec((1, 2, 6))


def test_all_specs_count():
    specs = tasks.all_specs()
    assert len(specs) == len(set(specs)) == 6 * 5 * 4
    assert set(specs) == {p for p in itertools.product(range(6), repeat=3) if len(set(p)) == 3}


def test_split_sizes_and_determinism():
    s = tasks.make_split(24, 0)
    assert len(s.train) == 96 and len(s.test) == 24
    assert not set(s.train) & set(s.test)
    assert set(s.train) | set(s.test) == set(tasks.all_specs())
    assert s.to_json() == tasks.make_split(24, 0).to_json()
    assert s.to_json() != tasks.make_split(24, 1).to_json()
    assert len(tasks.make_split(119, 0).train) == 1
    with pytest.raises(ValueError):
        tasks.make_split(120, 0)


def test_split_file_round_trip(tmp_path):
    s = tasks.make_split(24, 3)
    s.save(tmp_path / "split.json")
    assert tasks.DatasetSplit.load(tmp_path / "split.json") == s


def test_sparse_mask():
    rng = np.random.default_rng(0)
    assert tasks.sparse_mask(10, 1.0, rng).all()
    counts = np.array([tasks.sparse_mask(48, 0.25, rng).sum() for _ in range(10_000)])
    assert all(tasks.sparse_mask(7, 0.01, rng)[-1] for _ in range(100))
    expected = 47 * 0.25 + 1
    se = math.sqrt(47 * 0.25 * 0.75 / len(counts))
    assert abs(counts.mean() - expected) < 3 * se


def test_extend_spec():
    rng = np.random.default_rng(0)
    assert tasks.extend_spec((1, 4, 2), 1, rng) == (1, 4, 2)
    for _ in range(200):
        spec = tasks.extend_spec((1, 4, 2), 4, rng)
        assert len(spec) == 12 and spec[:3] == (1, 4, 2)
        assert all(a != b for a, b in zip(spec, spec[1:]))
        ep = tasks.gen_episode("rule", spec, rng, check=False)
        assert 40 <= ep.T <= 56


def test_ground_truth_transitions():
    assert tasks.ground_truth_transitions(0, 1).tolist() == [1, 0, 0, 0, 0, 0]
    assert np.allclose(tasks.ground_truth_transitions(0, 3), [0, .2, .2, .2, .2, .2])
    assert tasks.ground_truth_transitions(4, 4).tolist() == [0, 0, 0, 0, 1, 0]
    with pytest.raises(RunLongerThanDuration):
        tasks.ground_truth_transitions(0, 4)


def test_ground_truth_matches_generator_statistics():
    """Empirical next-op frequencies over all train specs agree with the rule."""
    counts = np.zeros((6, 6))
    for spec in tasks.all_specs():
        z = tasks.labels_for(spec)
        for t in range(1, len(z)):
            run = 1
            while t - 1 - run >= 0 and z[t - 1 - run] == z[t - 1]:
                run += 1
            if run == tasks.DURATIONS[z[t - 1]]:
                counts[z[t - 1], z[t]] += 1
    freq = counts / counts.sum(1, keepdims=True)
    for s in range(6):
        assert np.allclose(freq[s], tasks.ground_truth_transitions(s, tasks.DURATIONS[s]))


def test_episode_csv_round_trip(tmp_path, rng):
    ep = tasks.gen_rule_episode((3, 0, 5), rng)
    ep = ep.with_feedback(np.arange(ep.T) % 2 == 1)
    tasks.write_episode_csv(ep, tmp_path / "e.csv")
    back = tasks.read_episode_csv(tmp_path / "e.csv", ep.task)
    assert np.array_equal(back.y, ep.y) and np.array_equal(back.x, ep.x)
    assert np.array_equal(back.feedback, ep.feedback) and np.array_equal(back.z_true, ep.z_true)
    header = (tmp_path / "e.csv").read_text().splitlines()[0]
    assert header == "t,feedback,z_true,x0,x1,x2,x3,x4,x5,y0,y1,y2,y3,y4,y5"


def test_stack_episodes_pads_without_feedback(rng):
    eps = [tasks.gen_rule_episode((0, 1, 2), rng), tasks.gen_rule_episode((4, 5, 3), rng)]
    x, y, fb, lengths = tasks.stack_episodes(eps)
    assert lengths.tolist() == [10, 14]
    assert x.shape == (2, 14, 6) and not fb[0, 10:].any() and fb[1].all()
